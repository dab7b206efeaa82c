//! Portable checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes   b"SOFTCOT\0"
//! version    u32       1
//! header_len u64       length of the UTF-8 JSON header that follows
//! header     bytes     {"kind": ..., "model": ModelConfig, ...}
//! count      u32       number of tensors
//! per tensor:
//!   name_len u32, name bytes (UTF-8)
//!   rank     u32, dims u64 x rank
//!   data     f64 x prod(dims), IEEE-754 little-endian
//! ```

use std::io::{Read, Write};
use std::path::Path;

use serde_json::Value;

use super::{ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"SOFTCOT\0";
const VERSION: u32 = 1;
/// Tensor-name prefix reserved for optimizer state.
pub const OPTIM_PREFIX: &str = "optim.";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: Value,
    pub tensors: Vec<(String, Tensor)>,
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

impl Checkpoint {
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let header = serde_json::to_vec(&self.header)?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for d in t.shape() {
                w.write_all(&(*d as u64).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(t.numel() * 8);
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let hlen = read_u64(r)? as usize;
        let mut hbuf = vec![0u8; hlen];
        r.read_exact(&mut hbuf)?;
        let header: Value = serde_json::from_slice(&hbuf)?;
        let count = read_u32(r)? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let nlen = read_u32(r)? as usize;
            let mut nbuf = vec![0u8; nlen];
            r.read_exact(&mut nbuf)?;
            let name =
                String::from_utf8(nbuf).map_err(|_| Error::Checkpoint("tensor name not UTF-8".into()))?;
            let rank = read_u32(r)? as usize;
            let shape = (0..rank)
                .map(|_| read_u64(r).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let mut raw = vec![0u8; n * 8];
            r.read_exact(&mut raw)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        Ok(Self { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f)
    }
}

impl ModelParams {
    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            header: serde_json::json!({ "kind": "model", "model": self.config() }),
            tensors: self
                .names()
                .iter()
                .cloned()
                .zip(self.tensors().iter().cloned())
                .collect(),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_value(
            ck.header
                .get("model")
                .cloned()
                .ok_or_else(|| Error::Checkpoint("header has no model config".into()))?,
        )?;
        // training-state checkpoints carry optimizer moments alongside
        let tensors = ck
            .tensors
            .into_iter()
            .filter(|(name, _)| !name.starts_with(OPTIM_PREFIX))
            .collect();
        ModelParams::from_named(cfg, tensors)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(Checkpoint::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_bitwise() {
        let m = ModelParams::init(ModelConfig::default(), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        m.save(&path).unwrap();
        let back = ModelParams::load(&path).unwrap();
        assert_eq!(m, back);
        for (a, b) in m.tensors().iter().zip(back.tensors()) {
            let bits_a: Vec<u64> = a.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
    }

    #[test]
    fn rejects_garbage() {
        let mut bytes: &[u8] = b"NOTACKPT\x01\x00\x00\x00";
        assert!(matches!(Checkpoint::read_from(&mut bytes), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn rejects_missing_tensor() {
        let m = ModelParams::init(ModelConfig::default(), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let mut ck = m.to_checkpoint();
        ck.tensors.pop();
        assert!(ModelParams::from_checkpoint(ck).is_err());
    }
}
