//! Single-file JSON model format.
//!
//! ```json
//! { "format_version": 1, "model": { "tensorized": { ... } } }
//! ```
//!
//! Floats are written with round-trip precision, so a reloaded model makes
//! bitwise-identical predictions.

use std::fs;
use std::path::Path;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::BaselineModel;
use crate::cp::TaskGrid;
use crate::data::MultiTaskDataset;
use crate::train::{TrainError, TrainedModel, Variant};

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelIoError {
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed model file: {0}")]
    Json(#[from] serde_json::Error),
    #[error("model format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnyModel {
    Tensorized(TrainedModel),
    Baseline(BaselineModel),
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format_version: u32,
    model: AnyModel,
}

#[derive(Deserialize)]
struct VersionProbe {
    format_version: u32,
}

impl AnyModel {
    pub fn grid(&self) -> &TaskGrid {
        match self {
            AnyModel::Tensorized(m) => &m.grid,
            AnyModel::Baseline(b) => &b.grid,
        }
    }

    pub fn variant(&self) -> Variant {
        match self {
            AnyModel::Tensorized(m) => m.variant,
            AnyModel::Baseline(b) => b.variant,
        }
    }

    pub fn predict_many(&self, x: ArrayView2<'_, f64>, tasks: &[usize]) -> Result<Vec<f64>, TrainError> {
        match self {
            AnyModel::Tensorized(m) => m.predict_many(x, tasks),
            AnyModel::Baseline(b) => b.predict_many(x, tasks),
        }
    }

    pub fn predict_dataset(&self, data: &MultiTaskDataset) -> Result<Vec<Vec<f64>>, TrainError> {
        match self {
            AnyModel::Tensorized(m) => m.predict_dataset(data),
            AnyModel::Baseline(b) => b.predict_dataset(data),
        }
    }

    pub fn to_json(&self) -> Result<String, ModelIoError> {
        let file = ModelFile {
            format_version: MODEL_FORMAT_VERSION,
            model: self.clone(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self, ModelIoError> {
        let probe: VersionProbe = serde_json::from_str(text)?;
        if probe.format_version != MODEL_FORMAT_VERSION {
            return Err(ModelIoError::Version {
                found: probe.format_version,
                expected: MODEL_FORMAT_VERSION,
            });
        }
        let file: ModelFile = serde_json::from_str(text)?;
        Ok(file.model)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelIoError> {
        fs::write(path, self.to_json()?).map_err(|source| ModelIoError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, ModelIoError> {
        let text = fs::read_to_string(path).map_err(|source| ModelIoError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }
}
