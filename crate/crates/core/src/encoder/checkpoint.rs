//! JSON checkpoint container:
//!
//! ```json
//! {"format": "mmoe-checkpoint", "version": 1, "config": {...},
//!  "params": [{"name": "patch.weight", "shape": [64, 64], "values": [...]}, ...]}
//! ```
//!
//! Parameter names, in file order: `patch.weight` (p²×d), `patch.bias`, `pos`
//! (n×d); per block `k`: `blocks.k.ln1.{gamma,beta}`,
//! `blocks.k.attn.{wq,bq,wk,bk,wv,bv,wo,bo}` (weights d×d, applied as x·W),
//! `blocks.k.ln2.{gamma,beta}`, `blocks.k.mlp.{w1,b1,w2,b2}`, and when the MoE
//! branch is on `blocks.k.moe.{phi,w1,b1,w2,b2}`; then `ln_post.{gamma,beta}`,
//! `proj.{weight,bias}`, `labels.embed` (2×d, row 0 real) and
//! `labels.log_scale` (scalar). Values are row-major.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EncoderConfig, Model};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT: &str = "mmoe-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    config: EncoderConfig,
    params: Vec<ParamEntry>,
}

impl Model {
    pub fn to_checkpoint_json(&self) -> Result<String> {
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: self.config().clone(),
            params: self
                .named_params()
                .into_iter()
                .map(|(name, t)| ParamEntry { name, shape: t.shape().to_vec(), values: t.to_vec() })
                .collect(),
        };
        serde_json::to_string(&file).map_err(|e| Error::Format { what: "checkpoint", detail: e.to_string() })
    }

    pub fn from_checkpoint_json(json: &str) -> Result<Self> {
        let file: CheckpointFile =
            serde_json::from_str(json).map_err(|e| Error::Format { what: "checkpoint", detail: e.to_string() })?;
        if file.format != CHECKPOINT_FORMAT || file.version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointMismatch(format!(
                "unsupported container {} v{}",
                file.format, file.version
            )));
        }
        let mut model = Model::init(&file.config)?;
        let mut by_name: HashMap<String, ParamEntry> = HashMap::new();
        for p in file.params {
            if by_name.contains_key(&p.name) {
                return Err(Error::CheckpointMismatch(format!("duplicate parameter {}", p.name)));
            }
            by_name.insert(p.name.clone(), p);
        }
        let names: Vec<(String, Vec<usize>)> =
            model.named_params().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
        let mut values = Vec::with_capacity(names.len());
        for (name, shape) in &names {
            let entry = by_name
                .remove(name)
                .ok_or_else(|| Error::CheckpointMismatch(format!("missing parameter {name}")))?;
            if &entry.shape != shape {
                return Err(Error::CheckpointMismatch(format!(
                    "{name} has shape {:?}, configuration implies {shape:?}",
                    entry.shape
                )));
            }
            values.push(
                Tensor::parameter(shape, entry.values)
                    .map_err(|e| Error::CheckpointMismatch(format!("{name}: {e}")))?,
            );
        }
        if let Some(extra) = by_name.keys().min() {
            return Err(Error::CheckpointMismatch(format!("unexpected parameter {extra}")));
        }
        model.set_params(values)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let json = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_json(&json)
    }
}
