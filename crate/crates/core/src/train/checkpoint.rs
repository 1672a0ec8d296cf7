use std::path::Path;

use crate::backbone::Model;
use crate::config::{model_echo, parse_model_echo};
use crate::error::{io_err, Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SGLN";
pub const FORMAT_VERSION: u32 = 1;

/// Named model parameters plus the model configuration that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub config: String,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated while reading {what} at byte {} ({} bytes total)", self.at, self.bytes.len()))
        })?;
        let out = &self.bytes[self.at..end];
        self.at = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        String::from_utf8(self.take(n, what)?.to_vec()).map_err(|_| Error::Checkpoint(format!("{what} is not UTF-8")))
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

impl Checkpoint {
    pub fn from_model(model: &Model) -> Self {
        Self {
            version: FORMAT_VERSION,
            config: model_echo(&model.config),
            tensors: model.params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        put_str(&mut out, &self.config);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &e in t.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parse a complete checkpoint. Trailing or missing bytes are errors.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version} (expected {FORMAT_VERSION})")));
        }
        let config = r.string("config")?;
        let count = r.u32("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for k in 0..count {
            let name = r.string(&format!("name of tensor {k}"))?;
            let rank = r.u32(&format!("{name}: rank"))? as usize;
            let shape = (0..rank)
                .map(|_| r.u64(&format!("{name}: extents")).map(|e| e as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e));
            let bytes = numel
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| Error::Checkpoint(format!("{name}: extents {shape:?} overflow")))?;
            let payload = r.take(bytes, &format!("{name}: payload"))?;
            let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if r.at != bytes.len() {
            return Err(Error::Checkpoint(format!("{} unexpected trailing bytes", bytes.len() - r.at)));
        }
        Ok(Self { version, config, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(io_err(path))?;
        Self::from_bytes(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {}", path.display(), e.to_string().trim_start_matches("checkpoint: "))))
    }

    /// Copy the stored tensors into `model`. Names, order and shapes are all
    /// checked before anything is written.
    pub fn apply(&self, model: &mut Model) -> Result<()> {
        if self.tensors.len() != model.params.len() {
            let first = model
                .params
                .iter()
                .zip(&self.tensors)
                .find(|((a, _), (b, _))| a != b)
                .map(|((a, _), _)| a.to_string())
                .unwrap_or_default();
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, model has {}{}",
                self.tensors.len(),
                model.params.len(),
                if first.is_empty() { String::new() } else { format!("; first mismatch at {first}") }
            )));
        }
        for ((name, have), (stored, t)) in model.params.iter().zip(&self.tensors) {
            if name != stored {
                return Err(Error::Checkpoint(format!("tensor {stored} found where model expects {name}")));
            }
            if have.shape() != t.shape() {
                return Err(Error::Checkpoint(format!("{name}: stored shape {:?} vs model shape {:?}", t.shape(), have.shape())));
            }
        }
        for (dst, (_, src)) in model.params.tensors_mut().iter_mut().zip(&self.tensors) {
            *dst = src.clone();
        }
        Ok(())
    }

    /// Rebuild the model described by the stored configuration.
    pub fn to_model(&self) -> Result<Model> {
        let mut model = Model::new(parse_model_echo(&self.config)?)?;
        self.apply(&mut model)?;
        Ok(model)
    }
}
