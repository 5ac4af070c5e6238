//! `PQTC` training checkpoints.
//!
//! ```text
//! magic    "PQTC"
//! version  u32
//! config   u64 length + UTF-8 TOML ([model] and [train] sections)
//! vocab    u64 length + symbol bytes
//! step     u64
//! tensors  u64 count, then per tensor:
//!            u64 length + name, u64 rows, u64 cols,
//!            u64 count + f32 values (row-major)
//! ```
//!
//! All integers and floats are little-endian. Tensors appear in the
//! model's parameter declaration order.

use std::path::Path;

use crate::binio::{Reader, Writer};
use crate::config::{RunConfig, TrainConfig};
use crate::corpus::CharVocab;
use crate::error::{Error, Result};
use crate::model::Transformer;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PQTC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Transformer,
    pub train: TrainConfig,
    pub vocab: CharVocab,
    pub step: u64,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        let cfg = RunConfig { model: self.model.cfg.clone(), train: self.train.clone(), plan: None };
        w.str(&cfg.to_toml());
        w.blob(self.vocab.symbols());
        w.u64(self.step);
        let params = self.model.params();
        w.u64(params.len() as u64);
        for p in params {
            w.str(&p.name);
            w.u64(p.rows as u64);
            w.u64(p.cols as u64);
            w.f32s(p.data);
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(CHECKPOINT_MAGIC)?;
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("checkpoint version {version}, this build reads {CHECKPOINT_VERSION}")));
        }
        let cfg = RunConfig::from_toml(&r.str()?)?;
        let vocab = CharVocab::from_symbols(r.blob()?.to_vec())?;
        if vocab.len() != cfg.model.vocab_size {
            return Err(Error::Format(format!("vocab has {} symbols, config says {}", vocab.len(), cfg.model.vocab_size)));
        }
        let step = r.u64()?;
        let mut model = Transformer::init(&cfg.model, 0)?;
        let count = r.len()?;
        {
            let mut params = model.params_mut();
            if count != params.len() {
                return Err(Error::Format(format!("{count} tensors, model has {}", params.len())));
            }
            for p in params.iter_mut() {
                let name = r.str()?;
                let (rows, cols) = (r.len()?, r.len()?);
                let data = r.f32s()?;
                if name != p.name || rows * cols != p.data.len() || data.len() != p.data.len() {
                    return Err(Error::Format(format!("tensor {name} ({rows}x{cols}) does not match {}", p.name)));
                }
                if data.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Format(format!("tensor {name} holds non-finite values")));
                }
                p.data.copy_from_slice(&data);
            }
        }
        r.finish()?;
        Ok(Self { model, train: cfg.train, vocab, step })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
