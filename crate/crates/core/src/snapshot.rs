//! Binary snapshot files.
//!
//! A snapshot is `"NLDD"`, the format version (`u32`), `d: u32`, `n: u32`, `L: f64`, `s: f64`,
//! `t: f64` and then the `n^d` samples, row-major. Every number is little-endian. A trajectory
//! file is a `u32` count followed by that many snapshots. Heat-kernel estimates are trajectories
//! followed by an extension block `"HKEX"`, `η: f64`, the `d` coordinates of `y` and a `u32`
//! count of mollification widths with the widths themselves.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::evolution::TrajectoryStore;
use crate::field::ScalarField;
use crate::grid::GridSpec;
use crate::heat_kernel::HeatKernelEstimate;

pub const MAGIC: &[u8; 4] = b"NLDD";
pub const VERSION: u32 = 1;
const KERNEL_MAGIC: &[u8; 4] = b"HKEX";
/// Refuse headers describing more samples than this before allocating.
const MAX_SAMPLES: u64 = 1 << 31;

/// A field together with the kernel order stored in its header.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub field: ScalarField,
    pub s: f64,
}

/// Stored form of a [`HeatKernelEstimate`]; the drift is not persisted.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredKernel {
    pub s: f64,
    pub eta: f64,
    pub y: Vec<f64>,
    pub mollification_widths: Vec<f64>,
    pub fields: Vec<ScalarField>,
}

pub fn encode_field(f: &ScalarField, s: f64, out: &mut Vec<u8>) {
    let g = f.grid();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(g.dim() as u32).to_le_bytes());
    out.extend_from_slice(&(g.n() as u32).to_le_bytes());
    out.extend_from_slice(&g.length().to_le_bytes());
    out.extend_from_slice(&s.to_le_bytes());
    out.extend_from_slice(&f.time().to_le_bytes());
    out.reserve(8 * f.samples().len());
    for v in f.samples() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_trajectory(fields: &[ScalarField], s: f64, out: &mut Vec<u8>) {
    out.extend_from_slice(&(fields.len() as u32).to_le_bytes());
    for f in fields {
        encode_field(f, s, out);
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, k: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < k {
            return Err(Error::Format(format!("truncated payload while reading {what}")));
        }
        let out = &self.bytes[self.pos..self.pos + k];
        self.pos += k;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }

    fn peek_is(&self, tag: &[u8; 4]) -> bool {
        self.bytes[self.pos..].starts_with(tag)
    }

    fn field(&mut self) -> Result<Snapshot> {
        if self.take(4, "magic")? != MAGIC {
            return Err(Error::Format("bad magic bytes".into()));
        }
        let version = self.u32("version")?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion { found: version, supported: VERSION });
        }
        let d = self.u32("dimension")? as usize;
        let n = self.u32("resolution")? as usize;
        let length = self.f64("period")?;
        let s = self.f64("order")?;
        let t = self.f64("time")?;
        if (n as u64).checked_pow(d as u32).is_none_or(|c| c > MAX_SAMPLES) {
            return Err(Error::Format(format!("implausible header d = {d}, n = {n}")));
        }
        let grid = GridSpec::new(d, n, length).map_err(|e| Error::Format(e.to_string()))?;
        let raw = self.take(8 * grid.len(), "samples")?;
        let samples = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        Ok(Snapshot { field: ScalarField::new(grid, samples, t)?, s })
    }

    fn trajectory(&mut self) -> Result<(Vec<ScalarField>, f64)> {
        let count = self.u32("snapshot count")? as usize;
        let mut fields = Vec::with_capacity(count.min(1024));
        let mut s = f64::NAN;
        for _ in 0..count {
            let snap = self.field()?;
            if !fields.is_empty() && snap.s.to_bits() != s.to_bits() {
                return Err(Error::Format("snapshots disagree on the kernel order".into()));
            }
            s = snap.s;
            fields.push(snap.field);
        }
        Ok((fields, s))
    }
}

pub fn decode_field(bytes: &[u8]) -> Result<Snapshot> {
    let mut r = Reader { bytes, pos: 0 };
    let snap = r.field()?;
    if !r.done() {
        return Err(Error::Format("trailing bytes after snapshot".into()));
    }
    Ok(snap)
}

/// Decodes a trajectory; a trailing heat-kernel extension block is skipped.
pub fn decode_trajectory(bytes: &[u8]) -> Result<(TrajectoryStore, f64)> {
    let mut r = Reader { bytes, pos: 0 };
    let (fields, s) = r.trajectory()?;
    if !r.done() && !r.peek_is(KERNEL_MAGIC) {
        return Err(Error::Format("trailing bytes after trajectory".into()));
    }
    Ok((TrajectoryStore::new(fields, None)?, s))
}

pub fn encode_kernel(est: &HeatKernelEstimate, out: &mut Vec<u8>) {
    encode_trajectory(&est.fields, est.kernel.order(), out);
    out.extend_from_slice(KERNEL_MAGIC);
    out.extend_from_slice(&est.eta.to_le_bytes());
    for c in &est.y {
        out.extend_from_slice(&c.to_le_bytes());
    }
    out.extend_from_slice(&(est.mollification_widths.len() as u32).to_le_bytes());
    for w in &est.mollification_widths {
        out.extend_from_slice(&w.to_le_bytes());
    }
}

pub fn decode_kernel(bytes: &[u8]) -> Result<StoredKernel> {
    let mut r = Reader { bytes, pos: 0 };
    let (fields, s) = r.trajectory()?;
    let d = fields.first().ok_or_else(|| Error::Format("kernel file without fields".into()))?.grid().dim();
    if r.take(4, "extension tag")? != KERNEL_MAGIC {
        return Err(Error::Format("missing heat-kernel extension".into()));
    }
    let eta = r.f64("source time")?;
    let y = (0..d).map(|_| r.f64("source point")).collect::<Result<Vec<_>>>()?;
    let count = r.u32("width count")? as usize;
    if count > 16 {
        return Err(Error::Format(format!("implausible width count {count}")));
    }
    let mollification_widths = (0..count).map(|_| r.f64("width")).collect::<Result<Vec<_>>>()?;
    if !r.done() {
        return Err(Error::Format("trailing bytes after kernel extension".into()));
    }
    Ok(StoredKernel { s, eta, y, mollification_widths, fields })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(bytes)?;
    f.sync_all()?;
    Ok(())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    Ok(bytes)
}

pub fn save_field(path: impl AsRef<Path>, f: &ScalarField, s: f64) -> Result<()> {
    let mut out = Vec::new();
    encode_field(f, s, &mut out);
    write_file(path.as_ref(), &out)
}

pub fn load_field(path: impl AsRef<Path>) -> Result<Snapshot> {
    decode_field(&read_file(path.as_ref())?)
}

pub fn save_trajectory(path: impl AsRef<Path>, traj: &TrajectoryStore, s: f64) -> Result<()> {
    let mut out = Vec::new();
    encode_trajectory(traj.snapshots(), s, &mut out);
    write_file(path.as_ref(), &out)
}

pub fn load_trajectory(path: impl AsRef<Path>) -> Result<(TrajectoryStore, f64)> {
    decode_trajectory(&read_file(path.as_ref())?)
}

pub fn save_kernel(path: impl AsRef<Path>, est: &HeatKernelEstimate) -> Result<()> {
    let mut out = Vec::new();
    encode_kernel(est, &mut out);
    write_file(path.as_ref(), &out)
}

pub fn load_kernel(path: impl AsRef<Path>) -> Result<StoredKernel> {
    decode_kernel(&read_file(path.as_ref())?)
}
