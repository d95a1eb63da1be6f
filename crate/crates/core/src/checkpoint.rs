//! Versioned binary checkpoint container.
//!
//! Layout: magic `HQCK`, format version, model kind, a JSON config map, then
//! ordered named parameter entries (shape list + raw little-endian `f64`
//! values). A save/load round trip reproduces bit-identical tensors.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"HQCK";
pub const FORMAT_VERSION: u32 = 1;

/// In-memory form of a checkpoint file.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub format_version: u32,
    /// Model kind tag, e.g. "cgnn" or "ntm".
    pub kind: String,
    /// Arbitrary JSON configuration map (model config, vocab, flags).
    pub config: serde_json::Value,
    /// Named parameters in a fixed, meaningful order.
    pub params: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(kind: impl Into<String>, config: serde_json::Value) -> Self {
        Checkpoint {
            format_version: FORMAT_VERSION,
            kind: kind.into(),
            config,
            params: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.params.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Takes a required tensor by name, or reports the checkpoint as corrupt.
    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::CheckpointFormat(format!("missing parameter {:?}", name)))
    }

    /// Fails unless the stored kind matches `expected`.
    pub fn expect_kind(&self, expected: &str) -> Result<()> {
        if self.kind != expected {
            return Err(Error::ModelKindMismatch {
                expected: expected.to_string(),
                found: self.kind.clone(),
            });
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(self.format_version)?;
        write_string(&mut w, &self.kind)?;
        write_string(&mut w, &serde_json::to_string(&self.config)?)?;
        w.write_u32::<LittleEndian>(self.params.len() as u32)?;
        for (name, tensor) in &self.params {
            write_string(&mut w, name)?;
            w.write_u32::<LittleEndian>(tensor.shape().len() as u32)?;
            for &e in tensor.shape() {
                w.write_u64::<LittleEndian>(e as u64)?;
            }
            for &v in tensor.data() {
                w.write_f64::<LittleEndian>(v)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::CheckpointFormat("bad magic; not a checkpoint file".into()));
        }
        let format_version = r.read_u32::<LittleEndian>()?;
        if format_version != FORMAT_VERSION {
            return Err(Error::CheckpointFormat(format!(
                "unsupported format version {} (expected {})",
                format_version, FORMAT_VERSION
            )));
        }
        let kind = read_string(&mut r)?;
        let config: serde_json::Value = serde_json::from_str(&read_string(&mut r)?)?;
        let n_params = r.read_u32::<LittleEndian>()? as usize;
        let mut params = Vec::with_capacity(n_params);
        for _ in 0..n_params {
            let name = read_string(&mut r)?;
            let ndim = r.read_u32::<LittleEndian>()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.read_u64::<LittleEndian>()? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = vec![0.0; numel];
            r.read_f64_into::<LittleEndian>(&mut data)?;
            params.push((name, Tensor::new(shape, data).map_err(|e| Error::CheckpointFormat(e.to_string()))?));
        }
        Ok(Checkpoint { format_version, kind, config, params })
    }
}

fn write_string<W: Write>(w: &mut W, s: &str) -> Result<()> {
    w.write_u64::<LittleEndian>(s.len() as u64)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_string<R: Read>(r: &mut R) -> Result<String> {
    let len = r.read_u64::<LittleEndian>()? as usize;
    if len > 1 << 30 {
        return Err(Error::CheckpointFormat(format!("implausible string length {}", len)));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::CheckpointFormat(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut ck = Checkpoint::new("cgnn", json!({"h": 3, "widths": [4]}));
        ck.push("w", Tensor::matrix(2, 3, vec![0.1, -0.2, 1e-300, f64::MAX, -0.0, 3.7]).unwrap());
        ck.push("b", Tensor::vector(vec![0.25]));
        ck.save(&path).unwrap();

        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.kind, "cgnn");
        assert_eq!(loaded.config["h"], 3);
        assert_eq!(loaded.params.len(), 2);
        for ((n0, t0), (n1, t1)) in ck.params.iter().zip(&loaded.params) {
            assert_eq!(n0, n1);
            assert_eq!(t0.shape(), t1.shape());
            let bits0: Vec<u64> = t0.data().iter().map(|v| v.to_bits()).collect();
            let bits1: Vec<u64> = t1.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits0, bits1);
        }
    }

    #[test]
    fn kind_mismatch_detected() {
        let ck = Checkpoint::new("ntm", json!({}));
        assert!(ck.expect_kind("cgnn").is_err());
        assert!(ck.expect_kind("ntm").is_ok());
    }

    #[test]
    fn rejects_non_checkpoint_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk");
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }
}
