//! JSON checkpoint: config, seed, epoch and every parameter tensor by name.
//! Floats are written with shortest round-trip formatting, so loading a
//! saved checkpoint reproduces the parameters bit for bit.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelError, ModelParams, ModelState};

pub const FORMAT: &str = "trajfm-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub seed: u64,
    pub epoch: usize,
    /// Resolved run configuration of the producing command, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_config: Option<serde_json::Value>,
    pub tensors: BTreeMap<String, Vec<f64>>,
}

impl Checkpoint {
    pub fn from_state(state: &ModelState) -> Self {
        let mut tensors = BTreeMap::new();
        state.params.for_each(&mut |name, t| {
            tensors.insert(name.to_string(), t.clone());
        });
        Self {
            format: FORMAT.into(),
            version: VERSION,
            config: state.config.clone(),
            seed: state.config.seed,
            epoch: state.epoch,
            run_config: None,
            tensors,
        }
    }

    pub fn to_state(&self) -> Result<ModelState, ModelError> {
        if self.format != FORMAT || self.version != VERSION {
            return Err(ModelError::Checkpoint(format!(
                "unsupported container {} v{}",
                self.format, self.version
            )));
        }
        self.config.validate()?;
        let mut params = ModelParams::init(&self.config, self.seed);
        let mut problem = None;
        let mut seen = 0;
        params.for_each_mut(&mut |name, t| match self.tensors.get(name) {
            Some(v) if v.len() == t.len() => {
                t.copy_from_slice(v);
                seen += 1;
            }
            Some(v) => {
                problem.get_or_insert(format!("{name}: {} values, expected {}", v.len(), t.len()));
            }
            None => {
                problem.get_or_insert(format!("missing tensor {name}"));
            }
        });
        if let Some(p) = problem {
            return Err(ModelError::Checkpoint(p));
        }
        if seen != self.tensors.len() {
            return Err(ModelError::Checkpoint("unexpected extra tensors".into()));
        }
        if !params.all_finite() {
            return Err(ModelError::Checkpoint("non-finite parameter".into()));
        }
        Ok(ModelState {
            config: self.config.clone(),
            params,
            epoch: self.epoch,
        })
    }

    pub fn write<W: Write>(&self, out: W) -> Result<(), ModelError> {
        serde_json::to_writer(out, self).map_err(|e| ModelError::Checkpoint(e.to_string()))
    }

    pub fn read<R: Read>(input: R) -> Result<Self, ModelError> {
        serde_json::from_reader(input).map_err(|e| ModelError::Checkpoint(e.to_string()))
    }
}
