//! The full model: two sparse GP paths over a shared latent space.

mod checkpoint;
mod elbo;
mod experiment;
mod gradcheck;
mod predict;
mod sgpr;
mod train;

use serde::{Deserialize, Serialize};

use crate::baselines::{fit_ppca, ppca_project};
use crate::data::Dataset;
use crate::error::{LdgdError, Result};
use crate::kernels::ArdKernel;
use crate::latent::{AmortizedEncoder, FreeFormLatent};
use crate::likelihoods::GaussianNoise;
use crate::numerics::{gauss_hermite, QuadratureRule, SeededRng};
use crate::optim::{Mat, ParameterVector, Transform};
use crate::svgp::{unstack_columns, InducingSet, SvgpPath};

pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT_VERSION};
pub use elbo::{elbo, evaluate_elbo, ElboReport};
pub use experiment::{run_holdout, HoldoutRun};
pub use gradcheck::{block_names, gradcheck, GradCheckInstance};
pub use predict::{
    decode_labels, generate, infer_test_latent, Decoded, Generated, InferredLatent, TestInferenceConfig, TestInit,
};
pub use sgpr::{exact_log_marginal, fit_sparse_regression, SparseRegressionFit};
pub use train::{moving_average, train, TrainConfig, TrainFailure, TrainResult};

/// Parameter block names.
pub mod blocks {
    pub const REG_VARIANCE: &str = "reg.variance";
    pub const REG_ALPHA: &str = "reg.alpha";
    pub const REG_Z: &str = "reg.z";
    pub const REG_MEAN: &str = "reg.mean";
    pub const REG_CHOL: &str = "reg.chol";
    pub const NOISE: &str = "reg.noise";
    pub const CLS_VARIANCE: &str = "cls.variance";
    pub const CLS_ALPHA: &str = "cls.alpha";
    pub const CLS_Z: &str = "cls.z";
    pub const CLS_MEAN: &str = "cls.mean";
    pub const CLS_CHOL: &str = "cls.chol";
    pub const LATENT_MEAN: &str = "latent.mean";
    pub const LATENT_SCALE: &str = "latent.scale";

    pub fn encoder_weight(layer: usize) -> String {
        format!("encoder.w{layer}")
    }

    pub fn encoder_bias(layer: usize) -> String {
        format!("encoder.b{layer}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Free-form per-row latent posteriors.
    Ldgd,
    /// Amortized encoder posteriors.
    FastLdgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentInit {
    /// PPCA projection scaled to unit column variance.
    Ppca,
    /// `N(0, 0.1²)` draws.
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InducingInit {
    /// Standard-normal draws.
    Normal,
    /// A random subset of the initial latent means.
    Subset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub latent_dim: usize,
    pub inducing_reg: usize,
    pub inducing_cls: usize,
    pub quadrature_order: usize,
    pub latent_samples: usize,
    pub latent_init: LatentInit,
    pub inducing_init: InducingInit,
    pub encoder_hidden: Vec<usize>,
    pub init_kernel_variance: f64,
    pub init_inv_lengthscale: f64,
    pub init_latent_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kind: ModelKind::Ldgd,
            latent_dim: 2,
            inducing_reg: 25,
            inducing_cls: 25,
            quadrature_order: 20,
            latent_samples: 1,
            latent_init: LatentInit::Ppca,
            inducing_init: InducingInit::Normal,
            encoder_hidden: vec![64, 32],
            init_kernel_variance: 1.0,
            init_inv_lengthscale: 1.0,
            init_latent_scale: 0.5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("latent_dim", self.latent_dim),
            ("inducing_reg", self.inducing_reg),
            ("inducing_cls", self.inducing_cls),
            ("quadrature_order", self.quadrature_order),
            ("latent_samples", self.latent_samples),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(LdgdError::InvalidArgument(format!("{name} must be positive")));
            }
        }
        if self.kind == ModelKind::FastLdgd && self.encoder_hidden.contains(&0) {
            return Err(LdgdError::InvalidArgument("encoder hidden sizes must be positive".into()));
        }
        for (name, v) in [
            ("init_kernel_variance", self.init_kernel_variance),
            ("init_inv_lengthscale", self.init_inv_lengthscale),
            ("init_latent_scale", self.init_latent_scale),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(LdgdError::InvalidArgument(format!("{name} must be positive")));
            }
        }
        gauss_hermite(self.quadrature_order)?;
        Ok(())
    }
}

/// Model state: configuration, data shapes and every trainable block in
/// unconstrained storage.
#[derive(Debug, Clone, PartialEq)]
pub struct LdgdModel {
    pub config: ModelConfig,
    /// Regression output dimension D.
    pub d: usize,
    /// Number of classes K.
    pub k: usize,
    /// Training rows N covered by the latent blocks.
    pub n: usize,
    pub params: ParameterVector,
    rule: QuadratureRule,
}

impl LdgdModel {
    /// Initializes a model for `data`. Inducing inputs, latent noise and
    /// encoder weights draw from labelled substreams of `seed`.
    pub fn init(data: &Dataset, config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if data.is_empty() {
            return Err(LdgdError::InvalidArgument("training data is empty".into()));
        }
        let (n, d, k, q) = (data.len(), data.n_features(), data.n_classes(), config.latent_dim);
        let root = SeededRng::new(seed);
        let mut params = ParameterVector::new();

        let latent_mean = initial_latent(&data.yr, q, config.latent_init, &mut root.substream("latent-init"))?;
        let kernel = |p: &mut ParameterVector, var: &str, alpha: &str| -> Result<()> {
            p.push(var, &Mat::from_element(1, 1, config.init_kernel_variance), Transform::Log)?;
            p.push(alpha, &Mat::from_element(1, q, config.init_inv_lengthscale), Transform::Log)
        };
        let inducing = |m: usize, label: &str| -> Mat {
            let mut rng = root.substream(label);
            match config.inducing_init {
                InducingInit::Normal => rng.normal_matrix(m, q),
                InducingInit::Subset => {
                    let mut idx = rng.sample_indices(n, m);
                    while idx.len() < m {
                        idx.push(rng.index(n));
                    }
                    Mat::from_fn(m, q, |i, j| latent_mean[(idx[i], j)] + 0.01 * rng.normal())
                }
            }
        };
        let whitened = |c: usize, m: usize| (Mat::zeros(m, c), Mat::zeros(c * m, m));

        let (mr, mc) = (config.inducing_reg, config.inducing_cls);
        kernel(&mut params, blocks::REG_VARIANCE, blocks::REG_ALPHA)?;
        params.push(blocks::REG_Z, &inducing(mr, "inducing-reg"), Transform::Identity)?;
        let (mean, chol) = whitened(d, mr);
        params.push(blocks::REG_MEAN, &mean, Transform::Identity)?;
        params.push_storage(blocks::REG_CHOL, &chol, Transform::LowerLogDiag)?;
        let noise = GaussianNoise::from_data(&data.yr);
        params.push(blocks::NOISE, &Mat::from_row_slice(1, d, &noise.variances), Transform::Log)?;

        kernel(&mut params, blocks::CLS_VARIANCE, blocks::CLS_ALPHA)?;
        params.push(blocks::CLS_Z, &inducing(mc, "inducing-cls"), Transform::Identity)?;
        let (mean, chol) = whitened(k, mc);
        params.push(blocks::CLS_MEAN, &mean, Transform::Identity)?;
        params.push_storage(blocks::CLS_CHOL, &chol, Transform::LowerLogDiag)?;

        match config.kind {
            ModelKind::Ldgd => {
                params.push(blocks::LATENT_MEAN, &latent_mean, Transform::Identity)?;
                params.push(
                    blocks::LATENT_SCALE,
                    &Mat::from_element(n, q, config.init_latent_scale),
                    Transform::Log,
                )?;
            }
            ModelKind::FastLdgd => {
                let enc = AmortizedEncoder::new(d, &config.encoder_hidden, q, &mut root.substream("encoder"))?;
                for (l, (w, b)) in enc.layers.iter().enumerate() {
                    params.push(&blocks::encoder_weight(l), w, Transform::Identity)?;
                    params.push(&blocks::encoder_bias(l), b, Transform::Identity)?;
                }
            }
        }
        let rule = gauss_hermite(config.quadrature_order)?;
        Ok(LdgdModel { config, d, k, n, params, rule })
    }

    /// Rebuilds a model around existing parameter blocks.
    pub fn from_params(config: ModelConfig, d: usize, k: usize, n: usize, params: ParameterVector) -> Result<Self> {
        config.validate()?;
        let q = config.latent_dim;
        let expect = |name: &str, rows: usize, cols: usize| -> Result<()> {
            match params.block(name) {
                Some(b) if (b.rows, b.cols) == (rows, cols) => Ok(()),
                Some(b) => Err(LdgdError::Checkpoint(format!(
                    "block `{name}` is {}×{}, expected {rows}×{cols}",
                    b.rows, b.cols
                ))),
                None => Err(LdgdError::Checkpoint(format!("missing block `{name}`"))),
            }
        };
        let (mr, mc) = (config.inducing_reg, config.inducing_cls);
        expect(blocks::REG_VARIANCE, 1, 1)?;
        expect(blocks::REG_ALPHA, 1, q)?;
        expect(blocks::REG_Z, mr, q)?;
        expect(blocks::REG_MEAN, mr, d)?;
        expect(blocks::REG_CHOL, d * mr, mr)?;
        expect(blocks::NOISE, 1, d)?;
        expect(blocks::CLS_VARIANCE, 1, 1)?;
        expect(blocks::CLS_ALPHA, 1, q)?;
        expect(blocks::CLS_Z, mc, q)?;
        expect(blocks::CLS_MEAN, mc, k)?;
        expect(blocks::CLS_CHOL, k * mc, mc)?;
        match config.kind {
            ModelKind::Ldgd => {
                expect(blocks::LATENT_MEAN, n, q)?;
                expect(blocks::LATENT_SCALE, n, q)?;
            }
            ModelKind::FastLdgd => {
                let layers = config.encoder_hidden.len() + 1;
                let mut sizes = vec![d];
                sizes.extend_from_slice(&config.encoder_hidden);
                sizes.push(2 * q);
                for l in 0..layers {
                    expect(&blocks::encoder_weight(l), sizes[l], sizes[l + 1])?;
                    expect(&blocks::encoder_bias(l), 1, sizes[l + 1])?;
                }
            }
        }
        let rule = gauss_hermite(config.quadrature_order)?;
        Ok(LdgdModel { config, d, k, n, params, rule })
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    pub fn quadrature(&self) -> &QuadratureRule {
        &self.rule
    }

    fn kernel(&self, var: &str, alpha: &str) -> ArdKernel {
        ArdKernel {
            variance: self.params.constrained(var)[(0, 0)],
            inv_lengthscales: self.params.constrained(alpha).iter().copied().collect(),
        }
    }

    fn path(&self, var: &str, alpha: &str, z: &str, mean: &str, chol: &str) -> SvgpPath {
        SvgpPath {
            kernel: self.kernel(var, alpha),
            inducing: InducingSet { z: self.params.constrained(z) },
            columns: unstack_columns(&self.params.constrained(mean), &self.params.constrained(chol)),
        }
    }

    pub fn regression_path(&self) -> SvgpPath {
        use blocks::*;
        self.path(REG_VARIANCE, REG_ALPHA, REG_Z, REG_MEAN, REG_CHOL)
    }

    pub fn classification_path(&self) -> SvgpPath {
        use blocks::*;
        self.path(CLS_VARIANCE, CLS_ALPHA, CLS_Z, CLS_MEAN, CLS_CHOL)
    }

    pub fn regression_kernel(&self) -> ArdKernel {
        self.kernel(blocks::REG_VARIANCE, blocks::REG_ALPHA)
    }

    pub fn classification_kernel(&self) -> ArdKernel {
        self.kernel(blocks::CLS_VARIANCE, blocks::CLS_ALPHA)
    }

    pub fn noise(&self) -> GaussianNoise {
        GaussianNoise {
            variances: self.params.constrained(blocks::NOISE).iter().copied().collect(),
        }
    }

    /// Free-form training latent, if this is an [`ModelKind::Ldgd`] model.
    pub fn latent(&self) -> Option<FreeFormLatent> {
        (self.config.kind == ModelKind::Ldgd).then(|| FreeFormLatent {
            mean: self.params.constrained(blocks::LATENT_MEAN),
            scale: self.params.constrained(blocks::LATENT_SCALE),
        })
    }

    /// Encoder, if this is a [`ModelKind::FastLdgd`] model.
    pub fn encoder(&self) -> Option<AmortizedEncoder> {
        (self.config.kind == ModelKind::FastLdgd).then(|| {
            let layers = (0..=self.config.encoder_hidden.len())
                .map(|l| {
                    (
                        self.params.constrained(&blocks::encoder_weight(l)),
                        self.params.constrained(&blocks::encoder_bias(l)),
                    )
                })
                .collect();
            AmortizedEncoder {
                layers,
                latent_dim: self.config.latent_dim,
            }
        })
    }

    /// Latent means and scales of the training rows: the free-form posterior
    /// or the encoder applied to `yr`.
    pub fn training_latent(&self, yr: &Mat) -> Result<FreeFormLatent> {
        match self.config.kind {
            ModelKind::Ldgd => Ok(self.latent().expect("free-form model")),
            ModelKind::FastLdgd => {
                let (mean, scale) = crate::latent::encode(&self.encoder().expect("encoder model"), yr)?;
                Ok(FreeFormLatent { mean, scale })
            }
        }
    }

    pub(crate) fn check_data(&self, data: &Dataset) -> Result<()> {
        if data.n_features() != self.d || data.n_classes() != self.k {
            return Err(LdgdError::InvalidArgument(format!(
                "model expects D={}, K={}; data has D={}, K={}",
                self.d,
                self.k,
                data.n_features(),
                data.n_classes()
            )));
        }
        if self.config.kind == ModelKind::Ldgd && data.len() != self.n {
            return Err(LdgdError::InvalidArgument(format!(
                "model holds latents for {} rows, data has {}",
                self.n,
                data.len()
            )));
        }
        Ok(())
    }
}

/// Initial latent means: PPCA on up to `min(Q, D-1, rank)` components scaled
/// to unit column variance, remaining columns `N(0, 0.1²)`; or all random.
fn initial_latent(yr: &Mat, q: usize, init: LatentInit, rng: &mut SeededRng) -> Result<Mat> {
    let (n, d) = yr.shape();
    let mut out = rng.normal_matrix(n, q) * 0.1;
    if init == LatentInit::Random {
        return Ok(out);
    }
    let mut comps = q.min(d.saturating_sub(1)).min(n.saturating_sub(1));
    // rank-deficient data supports fewer components
    let model = loop {
        if comps == 0 {
            return Ok(out);
        }
        match fit_ppca(yr, comps) {
            Ok(m) => break m,
            Err(e) if e.is_numerical() => comps -= 1,
            Err(e) => return Err(e),
        }
    };
    let proj = ppca_project(&model, yr)?;
    for j in 0..comps {
        let col = proj.column(j);
        let mean = col.mean();
        let sd = (col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64).sqrt();
        let sd = if sd > 0.0 { sd } else { 1.0 };
        for i in 0..n {
            out[(i, j)] = (proj[(i, j)] - mean) / sd;
        }
    }
    Ok(out)
}
