//! Flat sectioned binary checkpoints.
//!
//! ```text
//! "SHLK" | version u32 | fft convention u32 | config digest [32]
//! | section count u32 | sections...
//! section: name length u32 | name utf-8 | rank u32 | dims u64... | f64 payload
//! ```
//! All integers and floats are little-endian.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::Params;
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 4] = b"SHLK";
pub const VERSION: u32 = 1;
/// Unnormalized forward transform, `1/(H·W)` on the inverse.
pub const FFT_CONVENTION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub name: String,
    pub dims: Vec<u64>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_digest: [u8; 32],
    pub sections: Vec<Section>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format(format!("checkpoint truncated at byte {}", self.at)))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

impl Checkpoint {
    pub fn new(config_digest: [u8; 32]) -> Self {
        Self {
            config_digest,
            sections: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: &Tensor) {
        self.sections.push(Section {
            name: name.into(),
            dims: t.shape().iter().map(|&d| d as u64).collect(),
            data: t.data().to_vec(),
        });
    }

    pub fn push_params(&mut self, prefix: &str, p: &Params) {
        for (n, t) in p.iter() {
            self.push(format!("{prefix}/{n}"), t);
        }
    }

    pub fn get(&self, name: &str) -> Result<Tensor> {
        let s = self
            .sections
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::Format(format!("checkpoint has no section {name}")))?;
        let dims: Vec<usize> = s.dims.iter().map(|&d| d as usize).collect();
        Tensor::new(&dims, s.data.clone())
    }

    pub fn has(&self, name: &str) -> bool {
        self.sections.iter().any(|s| s.name == name)
    }

    /// Every section under `prefix/`, with the prefix stripped.
    pub fn params(&self, prefix: &str) -> Result<Params> {
        let lead = format!("{prefix}/");
        let mut p = Params::new();
        for s in &self.sections {
            if let Some(n) = s.name.strip_prefix(&lead) {
                p.insert(n, self.get(&s.name)?);
            }
        }
        Ok(p)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&FFT_CONVENTION.to_le_bytes());
        out.extend_from_slice(&self.config_digest);
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for s in &self.sections {
            out.extend_from_slice(&(s.name.len() as u32).to_le_bytes());
            out.extend_from_slice(s.name.as_bytes());
            out.extend_from_slice(&(s.dims.len() as u32).to_le_bytes());
            for d in &s.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in &s.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("checkpoint version {version}, expected {VERSION}")));
        }
        let fft = r.u32()?;
        if fft != FFT_CONVENTION {
            return Err(Error::Format(format!("checkpoint FFT convention {fft}, expected {FFT_CONVENTION}")));
        }
        let config_digest: [u8; 32] = r.take(32)?.try_into().unwrap();
        let count = r.u32()? as usize;
        let mut sections = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Format("section name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let mut dims = Vec::with_capacity(rank.min(16));
            for _ in 0..rank {
                dims.push(r.u64()?);
            }
            let n = dims
                .iter()
                .try_fold(1u64, |a, &d| a.checked_mul(d))
                .and_then(|n| usize::try_from(n).ok())
                .ok_or_else(|| Error::Format(format!("section {name} is too large")))?;
            let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Format("section too large".into()))?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            sections.push(Section { name, dims, data });
        }
        if r.at != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes after checkpoint", bytes.len() - r.at)));
        }
        Ok(Self {
            config_digest,
            sections,
        })
    }

    /// Writes through a temporary file so an interrupted save keeps the old
    /// checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.encode()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new([7; 32]);
        c.push("encoder/w", &Tensor::new(&[2, 3], vec![1.0, -2.5, 3.25, f64::MIN_POSITIVE, 0.0, -0.0]).unwrap());
        c.push("rng", &Tensor::vector(vec![42.0]));
        c
    }

    #[test]
    fn roundtrip_is_byte_exact() {
        let c = sample();
        let bytes = c.encode();
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back.encode(), bytes);
        assert_eq!(back.get("encoder/w").unwrap().data()[5].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn corrupt_inputs_are_format_errors() {
        let bytes = sample().encode();
        assert!(matches!(Checkpoint::decode(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::decode(&bad), Err(Error::Format(_))));
        let mut long = bytes;
        long.push(0);
        assert!(matches!(Checkpoint::decode(&long), Err(Error::Format(_))));
    }

    #[test]
    fn params_by_prefix() {
        let mut p = Params::new();
        p.insert("a", Tensor::vector(vec![1.0]));
        p.insert("b.c", Tensor::zeros(&[2, 2]));
        let mut c = Checkpoint::new([0; 32]);
        c.push_params("online", &p);
        assert_eq!(c.params("online").unwrap(), p);
        assert!(c.params("other").unwrap().is_empty());
    }
}
