//! Flat binary parameter checkpoints.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! "FOFCKPT1" | json_len | json (UTF-8 config)
//! repeated until EOF: name_len | name | rank | dims[rank] | f32 LE values
//! ```

use std::fs;
use std::path::Path;

use super::params::ParamSet;
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

pub const MAGIC: &[u8; 8] = b"FOFCKPT1";

pub fn encode<T: Scalar>(config_json: &str, params: &ParamSet<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + config_json.len() + params.num_scalars() * 4);
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, config_json.len());
    out.extend_from_slice(config_json.as_bytes());
    for (name, t) in params.iter() {
        put_u32(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.rank());
        for &d in t.shape() {
            put_u32(&mut out, d);
        }
        for x in t.data() {
            out.extend_from_slice(&x.to_f32().unwrap_or(f32::NAN).to_le_bytes());
        }
    }
    out
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    let v = u32::try_from(v).expect("checkpoint field exceeds u32");
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(self.path, field, "unexpected end of file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, field: &str) -> Result<usize> {
        let b = self.take(4, field)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn string(&mut self, len: usize, field: &str) -> Result<String> {
        let b = self.take(len, field)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::format(self.path, field, "invalid UTF-8"))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

/// Parses a checkpoint; `path` is only used in error messages.
pub fn decode<T: Scalar>(bytes: &[u8], path: &Path) -> Result<(String, ParamSet<T>)> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::format(path, "magic", "not a FOFCKPT1 checkpoint"));
    }
    let n = r.u32("config length")?;
    let config = r.string(n, "config")?;
    let mut params = ParamSet::new();
    while !r.done() {
        let n = r.u32("name length")?;
        let name = r.string(n, "name")?;
        let rank = r.u32(&format!("{name}.rank"))?;
        let dims = (0..rank)
            .map(|_| r.u32(&format!("{name}.dims")))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = dims.iter().product();
        let raw = r.take(numel * 4, &format!("{name}.values"))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| T::from_f32(f32::from_le_bytes(c.try_into().expect("4 bytes"))).unwrap_or(T::nan()))
            .collect();
        params.push(name, Tensor::new(&dims, data)?);
    }
    Ok((config, params))
}

pub fn save<T: Scalar>(path: &Path, config_json: &str, params: &ParamSet<T>) -> Result<()> {
    fs::write(path, encode(config_json, params)).map_err(|e| Error::io(path, e))
}

pub fn load<T: Scalar>(path: &Path) -> Result<(String, ParamSet<T>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
