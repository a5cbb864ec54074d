//! JSON checkpoints that restore a model and optimizer state bit-for-bit.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{KgsError, Result};
use crate::export::write_json;
use crate::network::model::RunningStats;
use crate::network::{Model, RunConfig};
use crate::tensor::Tensor;

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SavedParameter {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub momentum: Vec<f64>,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    /// Number of completed epochs; training resumes at this epoch index.
    pub epoch: usize,
    pub run: RunConfig,
    pub params: Vec<SavedParameter>,
    pub running: BTreeMap<String, RunningStats>,
}

impl Checkpoint {
    pub fn capture(model: &Model, run: &RunConfig, epoch: usize) -> Self {
        let params = model
            .params
            .iter()
            .map(|p| SavedParameter {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                value: p.value.data().to_vec(),
                momentum: p.momentum.data().to_vec(),
                trainable: p.trainable,
            })
            .collect();
        Self {
            format_version: FORMAT_VERSION,
            epoch,
            run: RunConfig {
                model: model.config.clone(),
                ..run.clone()
            },
            params,
            running: model.running.clone(),
        }
    }

    /// Rebuilds the model described by `run.model` and overwrites every parameter by name.
    pub fn restore(&self) -> Result<Model> {
        if self.format_version != FORMAT_VERSION {
            return Err(KgsError::Data(format!(
                "unsupported checkpoint format {}",
                self.format_version
            )));
        }
        let mut model = Model::new(self.run.model.clone())?;
        if model.params.len() != self.params.len() {
            return Err(KgsError::Data(format!(
                "checkpoint has {} parameters, model expects {}",
                self.params.len(),
                model.params.len()
            )));
        }
        for saved in &self.params {
            let id = model
                .params
                .id(&saved.name)
                .ok_or_else(|| KgsError::Data(format!("unknown parameter `{}`", saved.name)))?;
            let param = model.params.get_mut(id);
            if param.value.shape() != saved.shape.as_slice() {
                return Err(KgsError::Shape(format!(
                    "parameter `{}` has shape {:?}, checkpoint stores {:?}",
                    saved.name,
                    param.value.shape(),
                    saved.shape
                )));
            }
            param.value = Tensor::new(saved.shape.clone(), saved.value.clone())?;
            param.momentum = Tensor::new(saved.shape.clone(), saved.momentum.clone())?;
            param.trainable = saved.trainable;
        }
        for (key, stats) in &self.running {
            let slot = model
                .running
                .get_mut(key)
                .ok_or_else(|| KgsError::Data(format!("unknown normalization layer `{key}`")))?;
            if slot.mean.len() != stats.mean.len() || slot.var.len() != stats.var.len() {
                return Err(KgsError::Shape(format!("running statistics of `{key}` have the wrong width")));
            }
            *slot = stats.clone();
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(path.as_ref(), self)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| KgsError::io(path, e))?;
        serde_json::from_str(&text).map_err(KgsError::from_json)
    }
}
