//! Parameter checkpoints in the same little-endian envelope style as the
//! feature container.
//!
//! ```text
//! "PSET" | version u16 = 1 | metadata: len u32 + UTF-8 JSON | count u32
//! per param: name len u16 + UTF-8 | trainable u8 | rank u8 | dims u32 each | f32 values
//! ```

use std::path::Path;

use serde::{de::DeserializeOwned, Serialize};

use crate::engine::{ParamSet, Tensor};
use crate::error::{ContainerErrorKind, Error, Result};

pub const MAGIC: [u8; 4] = *b"PSET";
pub const VERSION: u16 = 1;

pub fn encode<M: Serialize>(params: &ParamSet<f32>, metadata: &M) -> Result<Vec<u8>> {
    let meta = serde_json::to_vec(metadata).map_err(|e| Error::Config(format!("checkpoint metadata: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, p) in params.iter() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(p.trainable as u8);
        out.push(p.tensor.rank() as u8);
        for &d in p.tensor.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in p.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'b> {
    bytes: &'b [u8],
    pos: usize,
}

impl<'b> Cursor<'b> {
    fn err(&self, kind: ContainerErrorKind) -> Error {
        Error::Container { offset: self.pos, kind }
    }

    fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(self.err(ContainerErrorKind::Truncated { needed: n, available }));
        }
        self.pos += n;
        Ok(&self.bytes[self.pos - n..self.pos])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn utf8(&mut self, n: usize) -> Result<&'b str> {
        let at = self.pos;
        std::str::from_utf8(self.take(n)?).map_err(|_| Error::Container { offset: at, kind: ContainerErrorKind::InvalidUtf8 })
    }
}

pub fn decode<M: DeserializeOwned>(bytes: &[u8]) -> Result<(ParamSet<f32>, M)> {
    let mut c = Cursor { bytes, pos: 0 };
    let magic: [u8; 4] = c.take(4)?.try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(Error::Container { offset: 0, kind: ContainerErrorKind::BadMagic(magic) });
    }
    let version = c.u16()?;
    if version != VERSION {
        return Err(Error::Container { offset: 4, kind: ContainerErrorKind::UnsupportedVersion(version) });
    }
    let meta_len = c.u32()? as usize;
    let meta_text = c.utf8(meta_len)?;
    let meta = serde_json::from_str(meta_text).map_err(|e| Error::Json { path: "checkpoint metadata".into(), detail: e.to_string() })?;
    let count = c.u32()?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let len = c.u16()? as usize;
        let name = c.utf8(len)?.to_string();
        let flags = c.take(2)?;
        let (trainable, rank) = (flags[0] != 0, flags[1] as usize);
        let shape = (0..rank).map(|_| c.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if rank == 0 || shape.contains(&0) {
            return Err(c.err(ContainerErrorKind::ZeroDimension));
        }
        let n = shape.iter().try_fold(4usize, |acc, &d| acc.checked_mul(d)).unwrap_or(usize::MAX);
        let data = c.take(n)?.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
        params.insert(name, Tensor::new(shape, data)?, trainable)?;
    }
    if c.pos != bytes.len() {
        return Err(c.err(ContainerErrorKind::TrailingBytes(bytes.len() - c.pos)));
    }
    Ok((params, meta))
}

pub fn save<M: Serialize>(path: &Path, params: &ParamSet<f32>, metadata: &M) -> Result<()> {
    std::fs::write(path, encode(params, metadata)?).map_err(|e| Error::io(path, e))
}

pub fn load<M: DeserializeOwned>(path: &Path) -> Result<(ParamSet<f32>, M)> {
    decode(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::ModelConfig;

    #[test]
    fn round_trip_preserves_names_flags_and_bits() {
        let cfg = ModelConfig::default();
        let mut params = cfg.init_params::<f32>(5).unwrap();
        params.set_trainable("classifier.b", false).unwrap();
        let bytes = encode(&params, &cfg).unwrap();
        let (back, meta): (ParamSet<f32>, ModelConfig) = decode(&bytes).unwrap();
        assert_eq!(meta, cfg);
        assert_eq!(back.len(), params.len());
        for (name, p) in params.iter() {
            let q = back.get(name).unwrap();
            assert_eq!(p.trainable, q.trainable);
            assert_eq!(p.tensor.shape(), q.tensor.shape());
            assert!(p.tensor.data().iter().zip(q.tensor.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn corruption_is_reported() {
        let params = ModelConfig::default().init_params::<f32>(0).unwrap();
        let bytes = encode(&params, &()).unwrap();
        assert!(matches!(decode::<()>(&bytes[..bytes.len() - 3]), Err(Error::Container { .. })));
        assert!(matches!(decode::<()>(b"FSTK\x01\x00"), Err(Error::Container { kind: ContainerErrorKind::BadMagic(_), .. })));
        let mut extra = bytes.clone();
        extra.push(1);
        assert!(matches!(decode::<()>(&extra), Err(Error::Container { kind: ContainerErrorKind::TrailingBytes(1), .. })));
    }
}
