//! Binary checkpoint format.
//!
//! ```text
//! "ULMF" | version u32 | meta_len u32 | meta JSON | n_tensors u32 |
//!   { name_len u32 | name | rank u32 | dims u32 * rank | f32 * numel }* | crc32 u32
//! ```
//! All integers and floats are little-endian; the CRC covers every byte
//! before it.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::EngineError;
use crate::classifier::{Classifier, HeadConfig};
use crate::lm::{LmConfig, LmModel};
use crate::tensor::{ParamStore, Tensor};
use crate::text::{TokenizeMode, Vocab};

pub const MAGIC: &[u8; 4] = b"ULMF";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Lm,
    Classifier,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: ModelKind,
    pub lm: LmConfig,
    pub head: Option<HeadConfig>,
    pub tokenize: TokenizeMode,
    pub vocab: Vec<String>,
    /// Class names in label-id order; empty for language models.
    pub labels: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

fn format_err(msg: impl Into<String>) -> EngineError {
    EngineError::Checkpoint(msg.into())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], EngineError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| format_err("unexpected end of checkpoint data"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, EngineError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

impl Checkpoint {
    pub fn from_params(meta: CheckpointMeta, params: &ParamStore<f32>) -> Self {
        let tensors = params
            .iter()
            .map(|(_, p)| (p.name.clone(), p.tensor.clone().with_requires_grad(false)))
            .collect();
        Self { meta, tensors }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.meta).expect("metadata serialises");
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, EngineError> {
        if bytes.len() < 4 {
            return Err(EngineError::Checksum);
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().unwrap()) {
            return Err(EngineError::Checksum);
        }
        let mut r = Reader { buf: body, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(format_err("not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(EngineError::Version {
                found: version,
                expected: VERSION,
            });
        }
        let meta_len = r.u32()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| format_err(format!("bad metadata: {e}")))?;
        let n = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| format_err("tensor name is not UTF-8"))?
                .to_string();
            let rank = r.u32()? as usize;
            let dims: Vec<usize> = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_, _>>()?;
            let numel: usize = dims.iter().product();
            let raw = r.take(numel.checked_mul(4).ok_or_else(|| format_err("tensor too large"))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(dims, data).map_err(|e| format_err(format!("tensor {name}: {e}")))?;
            tensors.push((name, t));
        }
        if r.pos != body.len() {
            return Err(format_err("trailing bytes after tensor records"));
        }
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<(), EngineError> {
        std::fs::write(path, self.to_bytes()).map_err(|e| EngineError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, EngineError> {
        let bytes = std::fs::read(path).map_err(|e| EngineError::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Overwrites every parameter in `params` by name. The checkpoint must
    /// hold exactly the same names with the same shapes.
    pub fn apply_to(&self, params: &mut ParamStore<f32>) -> Result<(), EngineError> {
        for (name, t) in &self.tensors {
            let id = params.id(name).ok_or_else(|| EngineError::UnknownTensor(name.clone()))?;
            let dst = params.get_mut(id);
            if dst.shape() != t.shape() {
                return Err(EngineError::TensorShape {
                    name: name.clone(),
                    expected: dst.shape().to_vec(),
                    found: t.shape().to_vec(),
                });
            }
            dst.data_mut().copy_from_slice(t.data());
        }
        if self.tensors.len() != params.len() {
            let missing = params
                .iter()
                .find(|(_, p)| !self.tensors.iter().any(|(n, _)| *n == p.name))
                .map(|(_, p)| p.name.clone())
                .unwrap_or_default();
            return Err(EngineError::MissingTensor(missing));
        }
        Ok(())
    }

    pub fn vocab(&self) -> Result<Vocab, EngineError> {
        Ok(Vocab::from_tokens(self.meta.vocab.iter().cloned())?)
    }

    /// Rebuilds the language model (for a classifier checkpoint, its trunk
    /// and head parameters are both restored via [`Checkpoint::classifier`]).
    pub fn lm_model(&self) -> Result<LmModel<f32>, EngineError> {
        if self.meta.kind != ModelKind::Lm {
            return Err(format_err("expected a language-model checkpoint"));
        }
        let mut model = LmModel::new(self.meta.lm.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
        self.apply_to(&mut model.params)?;
        Ok(model)
    }

    pub fn classifier(&self) -> Result<Classifier<f32>, EngineError> {
        let head = match (self.meta.kind, self.meta.head) {
            (ModelKind::Classifier, Some(h)) => h,
            _ => return Err(format_err("expected a classifier checkpoint")),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let lm = LmModel::new(self.meta.lm.clone(), &mut rng)?;
        let mut model = Classifier::new(lm, head, &mut rng)?;
        self.apply_to(&mut model.lm.params)?;
        Ok(model)
    }
}
