//! JSON checkpoints. Tensors are stored as base64 of little-endian `f32`.

use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use spectra_numerics::{ParamStore, Tensor};

use super::{AdamW, TrainConfig};
use crate::error::{Result, SpectraError};
use crate::finetune::TaskSpec;
use crate::text::Vocab;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: String,
}

impl TensorRecord {
    pub fn encode(name: &str, t: &Tensor<f32>) -> Self {
        let mut bytes = Vec::with_capacity(t.numel() * 4);
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        TensorRecord {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            data: STANDARD.encode(bytes),
        }
    }

    pub fn decode(&self) -> Result<Tensor<f32>> {
        let bytes = STANDARD
            .decode(&self.data)
            .map_err(|e| SpectraError::Invalid(format!("tensor {}: bad base64: {e}", self.name)))?;
        if bytes.len() % 4 != 0 {
            return Err(SpectraError::Invalid(format!("tensor {}: {} bytes is not a whole number of f32", self.name, bytes.len())));
        }
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        Ok(Tensor::new(self.shape.clone(), data)?)
    }
}

/// Random state of a run. Every step's stream is derived from the seed and
/// the step number, so the seed and the next step determine it fully.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngRecord {
    pub algorithm: String,
    pub seed: u64,
    pub next_step: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerRecord {
    pub t: u64,
    pub m: Vec<TensorRecord>,
    pub v: Vec<TensorRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub step: usize,
    pub config: TrainConfig,
    /// Ordinary vocabulary tokens, in id order after the specials.
    pub vocab: Vec<String>,
    pub params: Vec<TensorRecord>,
    pub optimizer: OptimizerRecord,
    pub rng: RngRecord,
    /// Present for fine-tuned models.
    pub task: Option<TaskSpec>,
}

impl Checkpoint {
    pub fn capture(
        config: &TrainConfig,
        vocab: &Vocab,
        store: &ParamStore<f32>,
        optimizer: &AdamW<f32>,
        step: usize,
        task: Option<TaskSpec>,
    ) -> Self {
        let names: Vec<&str> = store.iter().map(|(_, p)| p.name.as_str()).collect();
        Checkpoint {
            version: CHECKPOINT_VERSION,
            step,
            config: config.clone(),
            vocab: vocab.regular_ids().map(|i| vocab.token(i).to_string()).collect(),
            params: store.iter().map(|(_, p)| TensorRecord::encode(&p.name, &p.value)).collect(),
            optimizer: OptimizerRecord {
                t: optimizer.t,
                m: optimizer.m.iter().zip(&names).map(|(t, n)| TensorRecord::encode(n, t)).collect(),
                v: optimizer.v.iter().zip(&names).map(|(t, n)| TensorRecord::encode(n, t)).collect(),
            },
            rng: RngRecord {
                algorithm: "chacha8".into(),
                seed: config.seed,
                next_step: step,
            },
            task,
        }
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::new(self.vocab.iter().cloned())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(SpectraError::io(dir))?;
        }
        let json = serde_json::to_vec(self).map_err(SpectraError::json(path))?;
        // write then rename so a crash never leaves a torn checkpoint
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, json).map_err(SpectraError::io(&tmp))?;
        fs::rename(&tmp, path).map_err(SpectraError::io(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = fs::read(path).map_err(SpectraError::io(path))?;
        let value: serde_json::Value = serde_json::from_slice(&raw).map_err(SpectraError::json(path))?;
        let found = value.get("version").and_then(serde_json::Value::as_u64).unwrap_or(0) as u32;
        if found != CHECKPOINT_VERSION {
            return Err(SpectraError::Invalid(format!(
                "{}: checkpoint version {found} is not supported (expected {CHECKPOINT_VERSION})",
                path.display()
            )));
        }
        serde_json::from_value(value).map_err(SpectraError::json(path))
    }

    /// Copies stored values into `store` by name. Every stored tensor must
    /// exist with the same shape; unless `allow_missing`, every store
    /// parameter must be covered.
    pub fn restore_params(&self, store: &mut ParamStore<f32>, allow_missing: bool) -> Result<()> {
        for rec in &self.params {
            let id = store
                .find(&rec.name)
                .ok_or_else(|| SpectraError::Invalid(format!("checkpoint parameter {} is not part of the model", rec.name)))?;
            store.set_value(id, rec.decode()?)?;
        }
        if !allow_missing && self.params.len() != store.len() {
            let missing: Vec<_> = store
                .iter()
                .map(|(_, p)| p.name.clone())
                .filter(|n| !self.params.iter().any(|r| &r.name == n))
                .collect();
            return Err(SpectraError::Invalid(format!("checkpoint lacks parameters {missing:?}")));
        }
        Ok(())
    }

    pub fn restore_optimizer(&self, store: &ParamStore<f32>) -> Result<AdamW<f32>> {
        let mut opt = AdamW::new(self.config.optimizer, store);
        let o = &self.optimizer;
        if o.m.len() != store.len() || o.v.len() != store.len() {
            return Err(SpectraError::Invalid(format!(
                "checkpoint optimizer state covers {} tensors for {} parameters",
                o.m.len(),
                store.len()
            )));
        }
        for (i, (_, p)) in store.iter().enumerate() {
            for (rec, slot) in [(&o.m[i], &mut opt.m[i]), (&o.v[i], &mut opt.v[i])] {
                let t = rec.decode()?;
                if rec.name != p.name || t.shape() != p.value.shape() {
                    return Err(SpectraError::Invalid(format!(
                        "optimizer state {} {:?} does not match parameter {} {:?}",
                        rec.name,
                        t.shape(),
                        p.name,
                        p.value.shape()
                    )));
                }
                *slot = t;
            }
        }
        opt.t = o.t;
        Ok(opt)
    }
}
