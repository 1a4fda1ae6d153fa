//! Binary checkpoint format.
//!
//! ```text
//! "AUGS" | version u32 | spec hash u64 | init seed u64 | init scale f64
//! | tensor count u32 | tensor records...
//! | adam flag u8 [ step u64 | beta1 f64 | beta2 f64 | eps f64
//!                  | first-moment records... | second-moment records... ]
//! tensor record: name len u32 | name utf-8 | rank u32 | dims u64... | f64 payload
//! ```
//! All integers and floats are little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use super::adam::AdamState;
use super::network::{NetworkSpec, ParameterSet};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"AUGS";
pub const FORMAT_VERSION: u32 = 1;

fn write_record(w: &mut impl Write, name: &str, t: &Tensor) -> std::io::Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for d in t.shape() {
        w.write_all(&(*d as u64).to_le_bytes())?;
    }
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn save_checkpoint(params: &ParameterSet, adam: Option<&AdamState>, path: &Path) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    let mut body = || -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&params.spec_hash().to_le_bytes())?;
        w.write_all(&params.init_seed.to_le_bytes())?;
        w.write_all(&params.init_scale.to_le_bytes())?;
        w.write_all(&(params.entries().len() as u32).to_le_bytes())?;
        for (name, t) in params.entries() {
            write_record(&mut w, name, t)?;
        }
        match adam {
            None => w.write_all(&[0u8])?,
            Some(s) => {
                w.write_all(&[1u8])?;
                w.write_all(&s.step.to_le_bytes())?;
                for v in [s.beta1, s.beta2, s.eps] {
                    w.write_all(&v.to_le_bytes())?;
                }
                for ((name, _), m) in params.entries().iter().zip(&s.first) {
                    write_record(&mut w, name, m)?;
                }
                for ((name, _), v) in params.entries().iter().zip(&s.second) {
                    write_record(&mut w, name, v)?;
                }
            }
        }
        w.flush()
    };
    body().map_err(io)
}

struct Reader<'p, R> {
    inner: R,
    path: &'p Path,
}

impl<R: Read> Reader<'_, R> {
    fn corrupt(&self, reason: impl Into<String>) -> Error {
        Error::CorruptCheckpoint {
            path: self.path.to_path_buf(),
            reason: reason.into(),
        }
    }

    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.inner.read_exact(&mut b).map_err(|e| self.corrupt(format!("truncated: {e}")))?;
        Ok(b)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }

    fn record(&mut self) -> Result<(String, Tensor)> {
        let len = self.u32()? as usize;
        if len > 4096 {
            return Err(self.corrupt("tensor name too long"));
        }
        let mut name = vec![0u8; len];
        self.inner
            .read_exact(&mut name)
            .map_err(|e| self.corrupt(format!("truncated: {e}")))?;
        let name = String::from_utf8(name).map_err(|_| self.corrupt("tensor name is not utf-8"))?;
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(self.corrupt("tensor rank too large"));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u64()? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, d| a.checked_mul(*d))
            .filter(|n| *n <= 1 << 32)
            .ok_or_else(|| self.corrupt("tensor too large"))?;
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(self.f64()?);
        }
        let t = Tensor::from_parts(shape, data).map_err(|e| self.corrupt(e.to_string()))?;
        Ok((name, t))
    }
}

/// Loads a checkpoint written for `spec`. A different spec hash is rejected.
pub fn load_checkpoint(path: &Path, spec: &NetworkSpec) -> Result<(ParameterSet, Option<AdamState>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        inner: BufReader::new(file),
        path,
    };
    if &r.bytes::<4>()? != MAGIC {
        return Err(r.corrupt("bad magic bytes"));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint {
            path: path.to_path_buf(),
            reason: format!("format version {version}, expected {FORMAT_VERSION}"),
        });
    }
    let hash = r.u64()?;
    if hash != spec.hash() {
        return Err(Error::Checkpoint {
            path: path.to_path_buf(),
            reason: format!("spec hash {hash:016x} does not match network spec {:016x}", spec.hash()),
        });
    }
    let init_seed = r.u64()?;
    let init_scale = r.f64()?;
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        entries.push(r.record()?);
    }
    let params = ParameterSet::from_entries(Arc::new(spec.clone()), entries, init_seed, init_scale)
        .map_err(|e| r.corrupt(e.to_string()))?;
    let adam = match r.bytes::<1>()?[0] {
        0 => None,
        1 => {
            let step = r.u64()?;
            let (beta1, beta2, eps) = (r.f64()?, r.f64()?, r.f64()?);
            let mut first = Vec::with_capacity(count);
            for _ in 0..count {
                first.push(r.record()?.1);
            }
            let mut second = Vec::with_capacity(count);
            for _ in 0..count {
                second.push(r.record()?.1);
            }
            let s = AdamState { first, second, step, beta1, beta2, eps };
            if !s.matches(&params) {
                return Err(r.corrupt("adam moments do not match parameters"));
            }
            Some(s)
        }
        _ => return Err(r.corrupt("bad adam flag")),
    };
    let mut trailing = [0u8; 1];
    if r.inner.read(&mut trailing).map_err(|e| Error::io(path, e))? != 0 {
        return Err(r.corrupt("trailing bytes after checkpoint"));
    }
    Ok((params, adam))
}
