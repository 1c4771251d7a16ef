//! Binary checkpoints: a header, the run configuration text, and every
//! parameter as a named little-endian blob in name order.

use std::path::Path;

use crate::config::RunConfig;
use crate::detector::Detector;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{ParamStore, Tensor};

const MAGIC: &[u8; 8] = b"CIRCLNET";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<S> {
    pub config: RunConfig,
    pub step: u64,
    pub params: ParamStore<S>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    put_u32(out, b.len() as u32);
    out.extend_from_slice(b);
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid utf-8".into()))
    }
}

impl<S: Scalar> Checkpoint<S> {
    pub fn of(detector: &Detector<S>, config: &RunConfig, step: u64) -> Self {
        Checkpoint { config: config.clone(), step, params: detector.params.clone() }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        out.extend_from_slice(&self.step.to_le_bytes());
        put_bytes(&mut out, self.config.to_text().as_bytes());
        put_bytes(&mut out, S::DTYPE.as_bytes());
        put_u32(&mut out, self.params.len() as u32);
        for (name, t) in self.params.iter() {
            put_bytes(&mut out, name.as_bytes());
            for d in t.shape() {
                put_u32(&mut out, d as u32);
            }
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let step = r.u64()?;
        let config = RunConfig::parse(&r.string()?)?;
        let dtype = r.string()?;
        if dtype != S::DTYPE {
            return Err(Error::Checkpoint(format!("stored as {dtype}, requested {}", S::DTYPE)));
        }
        let count = r.u32()?;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let name = r.string()?;
            let mut shape = [0usize; 4];
            for d in &mut shape {
                *d = r.u32()? as usize;
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n * S::BYTES)?;
            let data = raw.chunks_exact(S::BYTES).map(S::read_le).collect();
            params.insert(name, Tensor::new(shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { config, step, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Rebuilds the detector, rejecting any parameter whose name or shape
    /// differs from what the stored configuration produces.
    pub fn into_detector(self) -> Result<Detector<S>> {
        Detector::from_params(self.config.detector.clone(), self.params)
    }
}
