use std::path::{Path, PathBuf};

use clap::Args;
use ldgd::data::{load_csv, load_idx_images, split, Dataset, Scaling};
use ldgd::model::{InducingInit, LatentInit, ModelConfig, ModelKind, TestInferenceConfig, TestInit, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const SEED_ENV: &str = "LDGD_SEED";

/// Every free choice of a run. Read from TOML, then overridden by flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub kind: ModelKind,
    pub latent_dim: usize,
    pub inducing_reg: usize,
    pub inducing_cls: usize,
    pub quadrature_order: usize,
    pub latent_samples: usize,
    pub latent_init: LatentInit,
    pub inducing_init: InducingInit,
    pub encoder_hidden: Vec<usize>,
    pub batch_size: usize,
    pub lr: f64,
    pub iters: usize,
    pub report_samples: usize,
    pub test_lr: f64,
    pub test_iters: usize,
    pub test_init: TestInit,
    pub seed: Option<u64>,
    pub scaling: Scaling,
    pub data: Option<PathBuf>,
    pub label_column: String,
    pub idx_images: Option<PathBuf>,
    pub idx_labels: Option<PathBuf>,
    pub digits: Option<Vec<u8>>,
    pub max_per_digit: Option<usize>,
    /// Held-out fraction; when set, training uses the stratified train part.
    pub test_fraction: Option<f64>,
    pub split_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let t = TrainConfig::default();
        let i = TestInferenceConfig::default();
        RunConfig {
            kind: m.kind,
            latent_dim: m.latent_dim,
            inducing_reg: m.inducing_reg,
            inducing_cls: m.inducing_cls,
            quadrature_order: m.quadrature_order,
            latent_samples: m.latent_samples,
            latent_init: m.latent_init,
            inducing_init: m.inducing_init,
            encoder_hidden: m.encoder_hidden,
            batch_size: t.batch_size,
            lr: t.lr,
            iters: t.iters,
            report_samples: t.report_samples,
            test_lr: i.lr,
            test_iters: i.iters,
            test_init: i.init,
            seed: None,
            scaling: Scaling::Standardize,
            data: None,
            label_column: "label".into(),
            idx_images: None,
            idx_labels: None,
            digits: None,
            max_per_digit: None,
            test_fraction: None,
            split_seed: 0,
        }
    }
}

/// Flags shared by commands that build or run a model.
#[derive(Debug, Clone, Default, Args)]
pub struct RunFlags {
    /// TOML file with run settings; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub kind: Option<KindArg>,
    #[arg(long)]
    pub latent_dim: Option<usize>,
    #[arg(long)]
    pub inducing_reg: Option<usize>,
    #[arg(long)]
    pub inducing_cls: Option<usize>,
    #[arg(long)]
    pub quadrature_order: Option<usize>,
    #[arg(long)]
    pub latent_samples: Option<usize>,
    #[arg(long, value_enum)]
    pub latent_init: Option<LatentInitArg>,
    #[arg(long, value_delimiter = ',')]
    pub encoder_hidden: Option<Vec<usize>>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub test_lr: Option<f64>,
    #[arg(long)]
    pub test_iters: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub scaling: Option<ScalingArg>,
    /// CSV dataset with a header row.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub label_column: Option<String>,
    #[arg(long)]
    pub idx_images: Option<PathBuf>,
    #[arg(long)]
    pub idx_labels: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub digits: Option<Vec<u8>>,
    #[arg(long)]
    pub max_per_digit: Option<usize>,
    #[arg(long)]
    pub test_fraction: Option<f64>,
    #[arg(long)]
    pub split_seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum KindArg {
    Ldgd,
    FastLdgd,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum LatentInitArg {
    Ppca,
    Random,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum ScalingArg {
    Standardize,
    Center,
    None,
}

macro_rules! override_fields {
    ($cfg:ident, $flags:ident, $($field:ident),*) => {
        $(if let Some(v) = $flags.$field.clone() { $cfg.$field = v.into(); })*
    };
}

impl RunFlags {
    /// Reads the TOML file (if any), applies the flags and resolves the seed.
    pub fn resolve(&self) -> CliResult<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => read_config(path)?,
            None => RunConfig::default(),
        };
        self.apply(&mut cfg);
        cfg.seed = Some(resolve_seed(cfg.seed)?);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&self, cfg: &mut RunConfig) {
        let flags = self;
        override_fields!(
            cfg, flags, latent_dim, inducing_reg, inducing_cls, quadrature_order, latent_samples, encoder_hidden,
            batch_size, lr, iters, test_lr, test_iters, label_column, split_seed
        );
        if let Some(k) = flags.kind {
            cfg.kind = match k {
                KindArg::Ldgd => ModelKind::Ldgd,
                KindArg::FastLdgd => ModelKind::FastLdgd,
            };
        }
        if let Some(l) = flags.latent_init {
            cfg.latent_init = match l {
                LatentInitArg::Ppca => LatentInit::Ppca,
                LatentInitArg::Random => LatentInit::Random,
            };
        }
        if let Some(s) = flags.scaling {
            cfg.scaling = match s {
                ScalingArg::Standardize => Scaling::Standardize,
                ScalingArg::Center => Scaling::Center,
                ScalingArg::None => Scaling::None,
            };
        }
        for (slot, value) in [
            (&mut cfg.data, &flags.data),
            (&mut cfg.idx_images, &flags.idx_images),
            (&mut cfg.idx_labels, &flags.idx_labels),
        ] {
            if value.is_some() {
                *slot = value.clone();
            }
        }
        if flags.seed.is_some() {
            cfg.seed = flags.seed;
        }
        if flags.digits.is_some() {
            cfg.digits = flags.digits.clone();
        }
        if flags.max_per_digit.is_some() {
            cfg.max_per_digit = flags.max_per_digit;
        }
        if flags.test_fraction.is_some() {
            cfg.test_fraction = flags.test_fraction;
        }
    }
}

fn read_config(path: &Path) -> CliResult<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|source| CliError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    toml::from_str(&text).map_err(|source| CliError::Config {
        path: path.to_path_buf(),
        source,
    })
}

/// Explicit seed, else `LDGD_SEED`, else 0.
pub fn resolve_seed(explicit: Option<u64>) -> CliResult<u64> {
    if let Some(s) = explicit {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| CliError::Validation(format!("{SEED_ENV} must be an unsigned integer, got {v:?}"))),
        Err(_) => Ok(0),
    }
}

impl RunConfig {
    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn validate(&self) -> CliResult<()> {
        self.model_config().validate()?;
        self.train_config().validate()?;
        if !(self.test_lr > 0.0 && self.test_lr.is_finite()) {
            return Err(CliError::Validation("test_lr must be positive".into()));
        }
        if self.kind == ModelKind::FastLdgd && self.encoder_hidden.is_empty() {
            return Err(CliError::Validation("fast_ldgd needs encoder hidden sizes".into()));
        }
        if let Some(f) = self.test_fraction {
            if !(f > 0.0 && f < 1.0) {
                return Err(CliError::Validation("test_fraction must lie in (0, 1)".into()));
            }
        }
        if self.idx_images.is_some() != self.idx_labels.is_some() {
            return Err(CliError::Validation("idx_images and idx_labels go together".into()));
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            kind: self.kind,
            latent_dim: self.latent_dim,
            inducing_reg: self.inducing_reg,
            inducing_cls: self.inducing_cls,
            quadrature_order: self.quadrature_order,
            latent_samples: self.latent_samples,
            latent_init: self.latent_init,
            inducing_init: self.inducing_init,
            encoder_hidden: self.encoder_hidden.clone(),
            ..ModelConfig::default()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            lr: self.lr,
            iters: self.iters,
            seed: self.seed(),
            report_samples: self.report_samples,
        }
    }

    pub fn test_config(&self) -> TestInferenceConfig {
        TestInferenceConfig {
            lr: self.test_lr,
            iters: self.test_iters,
            seed: self.seed(),
            init: self.test_init,
            ..TestInferenceConfig::default()
        }
    }

    pub fn load_data(&self) -> CliResult<Dataset> {
        if let (Some(images), Some(labels)) = (&self.idx_images, &self.idx_labels) {
            return Ok(load_idx_images(images, labels, self.digits.as_deref(), self.max_per_digit)?);
        }
        match &self.data {
            Some(path) => Ok(load_csv(path, &self.label_column)?),
            None => Err(CliError::Validation("no dataset given (use --data or --idx-images/--idx-labels)".into())),
        }
    }

    /// Train and test row indices under the configured split.
    pub fn partition(&self, data: &Dataset) -> CliResult<(Vec<usize>, Vec<usize>)> {
        match self.test_fraction {
            Some(f) => {
                let s = split(&data.labels(), f, self.split_seed)?;
                Ok((s.train, s.test))
            }
            None => Ok(((0..data.len()).collect(), Vec::new())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_toml() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "latent_dim = 7\nlr = 0.5\nseed = 3\nkind = \"fast_ldgd\"\n").unwrap();
        let flags = RunFlags {
            config: Some(path),
            lr: Some(0.02),
            ..RunFlags::default()
        };
        let cfg = flags.resolve().unwrap();
        assert_eq!(cfg.latent_dim, 7);
        assert_eq!(cfg.lr, 0.02);
        assert_eq!(cfg.seed, Some(3));
        assert_eq!(cfg.kind, ModelKind::FastLdgd);
    }

    #[test]
    fn bad_settings_are_validation_errors() {
        let flags = RunFlags {
            latent_dim: Some(0),
            seed: Some(1),
            ..RunFlags::default()
        };
        assert_eq!(flags.resolve().unwrap_err().exit_code(), 1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.toml");
        std::fs::write(&path, "no_such_field = 1\n").unwrap();
        let flags = RunFlags {
            config: Some(path),
            ..RunFlags::default()
        };
        assert_eq!(flags.resolve().unwrap_err().exit_code(), 1);
        let flags = RunFlags {
            config: Some(dir.path().join("missing.toml")),
            ..RunFlags::default()
        };
        assert_eq!(flags.resolve().unwrap_err().exit_code(), 3);
    }
}
