//! Binary tensor and checkpoint containers, and PGM export.
//!
//! Tensor (`STNT`): magic, version 0x01, dtype (0x01 f64, 0x02 f32), u32 ndim,
//! ndim u32 dims, row-major payload. Checkpoint (`STCK`): magic, version
//! 0x01, u32 entry count, then per entry a u32 name length, the UTF-8 name
//! and an embedded tensor. All integers and values are little-endian.

use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::{numel, Tensor};

pub const TENSOR_MAGIC: &[u8; 4] = b"STNT";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"STCK";
pub const VERSION: u8 = 0x01;

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.pos as u64,
                format!("truncated {what}: need {n} bytes, {} remain", self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let start = self.pos;
        let got = self.take(4, "magic")?;
        if got != expected {
            return Err(Error::format(
                start as u64,
                format!("bad magic {:?}, expected {:?}", String::from_utf8_lossy(got), String::from_utf8_lossy(expected)),
            ));
        }
        let at = self.pos;
        let v = self.u8("version")?;
        if v != VERSION {
            return Err(Error::format(at as u64, format!("unsupported version {v}")));
        }
        Ok(())
    }

    fn tensor<T: Scalar>(&mut self) -> Result<Tensor<T>> {
        self.magic(TENSOR_MAGIC)?;
        let at = self.pos;
        let dtype = self.u8("dtype")?;
        let ndim = self.u32("ndim")? as usize;
        let mut shape = Vec::with_capacity(ndim.min(16));
        for _ in 0..ndim {
            let d_at = self.pos;
            let d = self.u32("dimension")? as usize;
            if d == 0 {
                return Err(Error::format(d_at as u64, "zero-sized dimension"));
            }
            shape.push(d);
        }
        let n = numel(&shape);
        let payload_at = self.pos;
        let data: Vec<T> = match dtype {
            0x01 => self.take(n * 8, "payload")?.chunks_exact(8).map(|c| T::lit(f64::read_le(c))).collect(),
            0x02 => self
                .take(n * 4, "payload")?
                .chunks_exact(4)
                .map(|c| T::from_f32(f32::read_le(c)).expect("f32 converts"))
                .collect(),
            d => return Err(Error::format(at as u64, format!("unknown dtype 0x{d:02x}"))),
        };
        Tensor::new(&shape, data).map_err(|e| Error::format(payload_at as u64, e.to_string()))
    }
}

fn write_tensor_into<T: Scalar>(t: &Tensor<T>, out: &mut Vec<u8>) {
    out.extend_from_slice(TENSOR_MAGIC);
    out.push(VERSION);
    out.push(T::DTYPE);
    out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.reserve(t.len() * T::BYTES);
    for &v in t.data() {
        v.write_le(out);
    }
}

pub fn encode_tensor<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::new();
    write_tensor_into(t, &mut out);
    out
}

/// Decodes a tensor of either stored dtype into `T`.
pub fn decode_tensor<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    let mut r = Reader { bytes, pos: 0 };
    let t = r.tensor()?;
    if r.pos != bytes.len() {
        return Err(Error::format(r.pos as u64, "trailing bytes after tensor"));
    }
    Ok(t)
}

pub fn encode_checkpoint<T: Scalar>(store: &ParamStore<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        write_tensor_into(t, &mut out);
    }
    out
}

pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<ParamStore<T>> {
    let mut r = Reader { bytes, pos: 0 };
    r.magic(CHECKPOINT_MAGIC)?;
    let count = r.u32("entry count")?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = r.u32("name length")? as usize;
        let at = r.pos;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::format(at as u64, "entry name is not UTF-8"))?
            .to_owned();
        let t = r.tensor()?;
        store
            .insert(name, t)
            .map_err(|e| Error::format(at as u64, e.to_string()))?;
    }
    if r.pos != bytes.len() {
        return Err(Error::format(r.pos as u64, "trailing bytes after checkpoint"));
    }
    Ok(store)
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn in_file<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Format { offset, message } => Error::Format {
            offset,
            message: format!("{}: {message}", path.display()),
        },
        e => e,
    })
}

pub fn save_tensor<T: Scalar>(path: &Path, t: &Tensor<T>) -> Result<()> {
    write_file(path, &encode_tensor(t))
}

pub fn load_tensor<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    in_file(path, decode_tensor(&read_file(path)?))
}

pub fn save_checkpoint<T: Scalar>(path: &Path, store: &ParamStore<T>) -> Result<()> {
    write_file(path, &encode_checkpoint(store))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<ParamStore<T>> {
    in_file(path, decode_checkpoint(&read_file(path)?))
}

/// Binary PGM of an H×W map with entries in [0, 1]: pixel = round(255·v).
pub fn encode_pgm<T: Scalar>(map: &Tensor<T>) -> Result<Vec<u8>> {
    let (h, w) = map.as_matrix()?;
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    for &v in map.data() {
        let v = v.as_f64();
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Domain(format!("map value {v} outside [0, 1]")));
        }
        out.push((255.0 * v).round() as u8);
    }
    Ok(out)
}
