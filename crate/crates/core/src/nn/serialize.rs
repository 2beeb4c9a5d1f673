//! Binary container for [`ParamSet`].
//!
//! Layout (little endian):
//!
//! ```text
//! magic "TLPS" | u32 version | u8 scheme | u64 seed | u32 count
//! count × { u32 name_len | name utf-8 | u32 layer | u8 role | u8 trainable
//!           | u32 ndim | ndim × u64 dim | θ f64 payload | θ0 f64 payload }
//! ```

use std::path::{Path, PathBuf};

use super::{InitScheme, ParamEntry, ParamRole, ParamSet};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"TLPS";
const VERSION: u32 = 1;

pub fn to_bytes(params: &ParamSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(32 + params.num_params() * 16);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(match params.scheme() {
        InitScheme::Standard => 0,
        InitScheme::Ntk => 1,
    });
    out.extend_from_slice(&params.seed().to_le_bytes());
    out.extend_from_slice(&(params.entries().len() as u32).to_le_bytes());
    for e in params.entries() {
        out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.extend_from_slice(&(e.layer as u32).to_le_bytes());
        out.push(match e.role {
            ParamRole::Weight => 0,
            ParamRole::Bias => 1,
        });
        out.push(u8::from(e.trainable));
        out.extend_from_slice(&(e.theta.shape().len() as u32).to_le_bytes());
        for &d in e.theta.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for t in [&e.theta, &e.anchor] {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            offset: self.pos as u64,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.err(format!("truncated while reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = n
            .checked_mul(8)
            .ok_or_else(|| self.err(format!("{what} size overflows")))?;
        let raw = self.take(bytes, what)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

pub fn from_bytes(buf: &[u8], path: &Path) -> Result<ParamSet> {
    let mut r = Reader { buf, pos: 0, path };
    if r.take(4, "magic")? != MAGIC {
        r.pos = 0;
        return Err(r.err("bad magic, not a parameter container"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(r.err(format!("unsupported version {version}")));
    }
    let scheme = match r.u8("scheme")? {
        0 => InitScheme::Standard,
        1 => InitScheme::Ntk,
        other => return Err(r.err(format!("unknown scheme byte {other}"))),
    };
    let seed = r.u64("seed")?;
    let count = r.u32("record count")?;
    let mut entries = Vec::new();
    for _ in 0..count {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| r.err("parameter name is not utf-8"))?
            .to_string();
        let layer = r.u32("layer")? as usize;
        let role = match r.u8("role")? {
            0 => ParamRole::Weight,
            1 => ParamRole::Bias,
            other => return Err(r.err(format!("unknown role byte {other}"))),
        };
        let trainable = r.u8("trainable flag")? != 0;
        let ndim = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(ndim.min(8));
        for _ in 0..ndim {
            shape.push(r.u64("dimension")? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| r.err("shape size overflows"))?;
        let theta = Tensor::new(shape.clone(), r.f64s(n, "payload")?)?;
        let anchor = Tensor::new(shape, r.f64s(n, "anchor payload")?)?;
        entries.push(ParamEntry { name, layer, role, trainable, theta, anchor });
    }
    if r.pos != buf.len() {
        return Err(r.err("trailing bytes after last record"));
    }
    ParamSet::from_entries(scheme, seed, entries)
}

pub fn save(params: &ParamSet, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(params)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ParamSet> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&buf, path)
}

/// Placeholder path used for in-memory decoding errors.
pub fn memory_path() -> PathBuf {
    PathBuf::from("<memory>")
}
