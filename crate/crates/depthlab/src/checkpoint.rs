//! Binary checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        4 bytes  "FLN1"
//! version      u16      currently 1
//! config len   u32
//! config       UTF-8 `key = value` lines
//! repeated tensor records until EOF:
//!   name len   u32
//!   name       UTF-8 bytes
//!   dtype      u8       1 = f32, 2 = f64
//!   rank       u8
//!   dims       u32 * rank
//!   data       raw little-endian scalars, row-major
//! ```
//!
//! The reader rejects wrong magic, unknown versions, unknown dtype codes,
//! and truncated files.

use crate::error::{Error, Result};
use crate::tensor::{Dtype, Real, Tensor};
use std::io::Write;
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"FLN1";
pub const VERSION: u16 = 1;

/// A tensor as serialized: raw bytes plus dtype and shape metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub bytes: Vec<u8>,
}

impl TensorRecord {
    pub fn from_tensor<T: Real>(name: impl Into<String>, t: &Tensor<T>) -> Self {
        let mut bytes = Vec::with_capacity(t.numel() * T::DTYPE.size_bytes());
        for v in t.data() {
            v.write_le(&mut bytes);
        }
        TensorRecord {
            name: name.into(),
            dtype: T::DTYPE,
            shape: t.shape().to_vec(),
            bytes,
        }
    }

    /// Decodes into a tensor of element type `T`, converting across dtypes
    /// when the stored one differs.
    pub fn to_tensor<T: Real>(&self) -> Result<Tensor<T>> {
        let width = self.dtype.size_bytes();
        let data: Vec<T> = match (self.dtype, T::DTYPE) {
            (Dtype::F32, Dtype::F32) | (Dtype::F64, Dtype::F64) => self
                .bytes
                .chunks_exact(width)
                .map(|c| T::read_le(c))
                .collect(),
            (Dtype::F32, Dtype::F64) => self
                .bytes
                .chunks_exact(4)
                .map(|c| T::from_f64(f32::from_le_bytes(c.try_into().unwrap()) as f64))
                .collect(),
            (Dtype::F64, Dtype::F32) => self
                .bytes
                .chunks_exact(8)
                .map(|c| T::from_f64(f64::from_le_bytes(c.try_into().unwrap())))
                .collect(),
        };
        Tensor::from_vec(self.shape.clone(), data)
    }
}

pub fn write_checkpoint(
    path: impl AsRef<Path>,
    config_block: &str,
    tensors: &[TensorRecord],
) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(config_block.len() as u32).to_le_bytes());
    buf.extend_from_slice(config_block.as_bytes());
    for t in tensors {
        buf.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(t.name.as_bytes());
        buf.push(t.dtype.code());
        buf.push(t.shape.len() as u8);
        for &d in &t.shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        buf.extend_from_slice(&t.bytes);
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(
                self.path.to_path_buf(),
                format!(
                    "truncated: wanted {n} bytes at offset {}, file has {}",
                    self.pos,
                    self.bytes.len()
                ),
            ));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u16_le(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32_le(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<(String, Vec<TensorRecord>)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cur = Cursor {
        bytes: &bytes,
        pos: 0,
        path,
    };
    let magic = cur.take(4)?;
    if magic != MAGIC {
        return Err(Error::format(
            path.to_path_buf(),
            format!("bad magic {magic:?}, expected {MAGIC:?}"),
        ));
    }
    let version = cur.u16_le()?;
    if version != VERSION {
        return Err(Error::format(
            path.to_path_buf(),
            format!("unsupported format version {version}, expected {VERSION}"),
        ));
    }
    let config_len = cur.u32_le()? as usize;
    let config_block = String::from_utf8(cur.take(config_len)?.to_vec())
        .map_err(|_| Error::format(path.to_path_buf(), "config block is not UTF-8"))?;

    let mut tensors = Vec::new();
    while !cur.done() {
        let name_len = cur.u32_le()? as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|_| Error::format(path.to_path_buf(), "tensor name is not UTF-8"))?;
        let dtype = Dtype::from_code(cur.u8()?).ok_or_else(|| {
            Error::format(path.to_path_buf(), format!("unknown dtype code in `{name}`"))
        })?;
        let rank = cur.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32_le()? as usize);
        }
        let numel: usize = shape.iter().product();
        let bytes = cur.take(numel * dtype.size_bytes())?.to_vec();
        tensors.push(TensorRecord {
            name,
            dtype,
            shape,
            bytes,
        });
    }
    Ok((config_block, tensors))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_records() -> Vec<TensorRecord> {
        let a = Tensor::<f64>::from_vec(vec![2, 2], vec![1.0, -2.5, 3.25, 0.0]).unwrap();
        let b = Tensor::<f32>::from_vec(vec![3], vec![0.5, 1.5, -9.0]).unwrap();
        vec![
            TensorRecord::from_tensor("weights", &a),
            TensorRecord::from_tensor("bias", &b),
        ]
    }

    #[test]
    fn save_load_save_produces_identical_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.fln");
        let p2 = dir.path().join("b.fln");
        write_checkpoint(&p1, "arch = gpt\nsteps = 3\n", &sample_records()).unwrap();
        let (cfg, tensors) = read_checkpoint(&p1).unwrap();
        write_checkpoint(&p2, &cfg, &tensors).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn round_trip_preserves_values_and_dtype() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.fln");
        write_checkpoint(&p, "", &sample_records()).unwrap();
        let (_, tensors) = read_checkpoint(&p).unwrap();
        assert_eq!(tensors[0].dtype, Dtype::F64);
        let w: Tensor<f64> = tensors[0].to_tensor().unwrap();
        assert_eq!(w.data(), &[1.0, -2.5, 3.25, 0.0]);
        assert_eq!(tensors[1].dtype, Dtype::F32);
        let b: Tensor<f32> = tensors[1].to_tensor().unwrap();
        assert_eq!(b.data(), &[0.5, 1.5, -9.0]);
    }

    #[test]
    fn reader_rejects_bad_magic_version_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.fln");
        write_checkpoint(&p, "k = v\n", &sample_records()).unwrap();
        let good = std::fs::read(&p).unwrap();

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        std::fs::write(&p, &bad_magic).unwrap();
        assert!(matches!(read_checkpoint(&p), Err(Error::Format { .. })));

        let mut bad_version = good.clone();
        bad_version[4] = 99;
        std::fs::write(&p, &bad_version).unwrap();
        assert!(matches!(read_checkpoint(&p), Err(Error::Format { .. })));

        std::fs::write(&p, &good[..good.len() - 3]).unwrap();
        assert!(matches!(read_checkpoint(&p), Err(Error::Format { .. })));
    }
}
