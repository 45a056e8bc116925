use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ElboReport, LdgdModel, ModelConfig, TrainConfig};
use crate::data::Standardizer;
use crate::error::{LdgdError, Result};
use crate::optim::{Mat, ParameterVector, Transform};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// One parameter block in unconstrained storage, row-major with its shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredBlock {
    pub name: String,
    pub transform: Transform,
    pub shape: [usize; 2],
    pub values: Vec<Vec<f64>>,
}

/// Versioned JSON snapshot of a model plus what is needed to reuse it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub tool_version: String,
    pub q: usize,
    pub d: usize,
    pub k: usize,
    pub n: usize,
    pub m_r: usize,
    pub m_c: usize,
    pub model_config: ModelConfig,
    pub blocks: Vec<StoredBlock>,
    pub label_names: Vec<String>,
    pub feature_names: Vec<String>,
    /// Feature scaling applied before training, if any.
    pub standardizer: Option<Standardizer>,
    pub train_config: Option<TrainConfig>,
    /// Free-form record of the run configuration.
    pub config_echo: serde_json::Value,
    pub final_report: Option<ElboReport>,
    /// Class index of every training row, in training order.
    #[serde(default)]
    pub train_labels: Vec<usize>,
}

impl Checkpoint {
    pub fn from_model(model: &LdgdModel, label_names: Vec<String>, feature_names: Vec<String>) -> Self {
        let blocks = model
            .params
            .blocks()
            .iter()
            .map(|b| {
                let s = b.storage();
                StoredBlock {
                    name: b.name.clone(),
                    transform: b.transform,
                    shape: [b.rows, b.cols],
                    values: s.row_iter().map(|r| r.iter().copied().collect()).collect(),
                }
            })
            .collect();
        Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            q: model.config.latent_dim,
            d: model.d,
            k: model.k,
            n: model.n,
            m_r: model.config.inducing_reg,
            m_c: model.config.inducing_cls,
            model_config: model.config.clone(),
            blocks,
            label_names,
            feature_names,
            standardizer: None,
            train_config: None,
            config_echo: serde_json::Value::Null,
            final_report: None,
            train_labels: Vec::new(),
        }
    }

    pub fn to_model(&self) -> Result<LdgdModel> {
        if self.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(LdgdError::Checkpoint(format!(
                "unsupported format version {}",
                self.format_version
            )));
        }
        let c = &self.model_config;
        if (c.latent_dim, c.inducing_reg, c.inducing_cls) != (self.q, self.m_r, self.m_c) {
            return Err(LdgdError::Checkpoint("header disagrees with model config".into()));
        }
        let mut params = ParameterVector::new();
        for b in &self.blocks {
            let [rows, cols] = b.shape;
            if b.values.len() != rows || b.values.iter().any(|r| r.len() != cols) {
                return Err(LdgdError::Checkpoint(format!("block `{}` does not match its shape", b.name)));
            }
            let flat: Vec<f64> = b.values.iter().flatten().copied().collect();
            if flat.iter().any(|v| !v.is_finite()) {
                return Err(LdgdError::Checkpoint(format!("block `{}` holds non-finite values", b.name)));
            }
            params.push_storage(&b.name, &Mat::from_row_slice(rows, cols, &flat), b.transform)?;
        }
        LdgdModel::from_params(c.clone(), self.d, self.k, self.n, params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| LdgdError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                LdgdError::MissingFile(path.to_path_buf())
            } else {
                LdgdError::io(path, e)
            }
        })?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_moons;
    use crate::model::{evaluate_elbo, train, ModelKind};

    #[test]
    fn round_trip_reproduces_model_and_elbo() {
        let data = synthetic_moons(30, 2, 0.1, 4).unwrap();
        for kind in [ModelKind::Ldgd, ModelKind::FastLdgd] {
            let config = ModelConfig {
                kind,
                inducing_reg: 5,
                inducing_cls: 4,
                encoder_hidden: vec![6],
                ..ModelConfig::default()
            };
            let mut model = LdgdModel::init(&data, config, 6).unwrap();
            let tc = TrainConfig { iters: 25, batch_size: 10, seed: 2, ..TrainConfig::default() };
            let result = train(&mut model, &data, &tc).unwrap();
            let mut ck = Checkpoint::from_model(&model, data.label_names.clone(), data.feature_names.clone());
            ck.final_report = Some(result.final_report);
            ck.train_config = Some(tc.clone());
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("m.json");
            ck.save(&path).unwrap();
            let back = Checkpoint::load(&path).unwrap();
            assert_eq!(back, ck);
            let reloaded = back.to_model().unwrap();
            assert_eq!(reloaded, model);
            let again = evaluate_elbo(&reloaded, &data, tc.report_samples, tc.seed).unwrap();
            assert!((again.elbo - result.final_report.elbo).abs() < 1e-9);
        }
    }

    #[test]
    fn damaged_checkpoints_are_rejected() {
        let data = synthetic_moons(10, 2, 0.1, 4).unwrap();
        let model = LdgdModel::init(&data, ModelConfig { inducing_reg: 3, inducing_cls: 3, ..ModelConfig::default() }, 1).unwrap();
        let ck = Checkpoint::from_model(&model, data.label_names.clone(), data.feature_names.clone());
        let mut bad = ck.clone();
        bad.format_version = 99;
        assert!(matches!(bad.to_model(), Err(LdgdError::Checkpoint(_))));
        let mut bad = ck.clone();
        bad.blocks.pop();
        assert!(matches!(bad.to_model(), Err(LdgdError::Checkpoint(_))));
        let mut bad = ck;
        bad.blocks[0].values[0].push(1.0);
        assert!(matches!(bad.to_model(), Err(LdgdError::Checkpoint(_))));
        assert!(matches!(
            Checkpoint::load(Path::new("/nonexistent/ck.json")),
            Err(LdgdError::MissingFile(_))
        ));
    }
}
