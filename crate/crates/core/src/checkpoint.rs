//! Versioned JSON container of named parameter arrays plus hyperparameters.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Method, TrajectoryModel};
use crate::nn::Matrix;
use crate::types::HyperParams;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub method: Method,
    pub hyper: HyperParams,
    /// Epoch whose parameters were retained.
    pub epoch: usize,
    pub params: BTreeMap<String, Matrix>,
}

impl Checkpoint {
    pub fn from_model(model: &TrajectoryModel, epoch: usize) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            method: model.method,
            hyper: model.hp.clone(),
            epoch,
            params: model.store.iter().map(|(n, m)| (n.clone(), m.clone())).collect(),
        }
    }

    pub fn into_model(self) -> Result<TrajectoryModel> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {} (expected {FORMAT_VERSION})",
                self.format_version
            )));
        }
        for (name, m) in &self.params {
            if m.data.len() != m.rows * m.cols {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` declares {}×{} but stores {} values",
                    m.rows,
                    m.cols,
                    m.data.len()
                )));
            }
        }
        TrajectoryModel::from_params(self.method, &self.hyper, self.params.into_iter().collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }
}

pub fn save_model(model: &TrajectoryModel, epoch: usize, path: &Path) -> Result<()> {
    Checkpoint::from_model(model, epoch).save(path)
}

pub fn load_model(path: &Path) -> Result<TrajectoryModel> {
    Checkpoint::load(path)?.into_model()
}
