use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::elbo::{build, check_batch, evaluate_elbo, ElboReport};
use super::LdgdModel;
use crate::data::Dataset;
use crate::error::{LdgdError, Result};
use crate::numerics::SeededRng;
use crate::optim::{adam_step, gradient, AdamState, Tape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub iters: usize,
    pub seed: u64,
    /// Latent draws per row for the final full-batch report.
    pub report_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 100,
            lr: 0.01,
            iters: 1500,
            seed: 0,
            report_samples: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.report_samples == 0 {
            return Err(LdgdError::InvalidArgument(
                "batch_size and report_samples must be positive".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(LdgdError::InvalidArgument(format!("lr must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainResult {
    /// Minibatch report of every iteration, taken before its update.
    pub trace: Vec<ElboReport>,
    /// Full-batch report after the last update.
    pub final_report: ElboReport,
}

/// Training stopped early; `trace` covers the iterations completed.
#[derive(Debug, Error)]
#[error("training aborted after {} iterations: {error}", trace.len())]
pub struct TrainFailure {
    #[source]
    pub error: LdgdError,
    pub trace: Vec<ElboReport>,
}

/// Adam ascent on the ELBO over every parameter block.
///
/// Batches are drawn without replacement from the `batch` substream of the
/// seed; with `batch_size ≥ N` every step uses all rows in order. Latent
/// noise comes from the `eps` substream.
pub fn train(model: &mut LdgdModel, data: &Dataset, config: &TrainConfig) -> std::result::Result<TrainResult, TrainFailure> {
    let fail = |error, trace| TrainFailure { error, trace };
    if let Err(e) = config.validate().and_then(|_| {
        if data.is_empty() {
            Err(LdgdError::InvalidArgument("training data is empty".into()))
        } else {
            check_batch(model, data, &[0])
        }
    }) {
        return Err(fail(e, Vec::new()));
    }
    let n = data.len();
    let root = SeededRng::new(config.seed);
    let mut batch_rng = root.substream("batch");
    let mut eps_rng = root.substream("eps");
    let mut adam = AdamState::new(model.params.flat().len(), config.lr);
    let mut trace = Vec::with_capacity(config.iters);
    let j = model.config.latent_samples;
    let q = model.latent_dim();

    for it in 0..config.iters {
        let batch: Vec<usize> = if config.batch_size >= n {
            (0..n).collect()
        } else {
            batch_rng.sample_indices(n, config.batch_size)
        };
        let eps = eps_rng.normal_matrix(j * batch.len(), q);
        let mut report = None;
        let step = gradient(&model.params, |tape: &Tape, bound| {
            let terms = build(tape, bound, model, data, &batch, &eps)?;
            let r = terms.report(tape, it);
            report = Some(r);
            if !r.elbo.is_finite() {
                return Err(LdgdError::NonFiniteObjective { iteration: it });
            }
            Ok(tape.scale(terms.total, -1.0))
        });
        let grad = match step {
            Ok((_, g)) => g,
            Err(e) => return Err(fail(e.at_iteration(it), trace)),
        };
        trace.push(report.expect("objective ran"));
        if let Err(e) = adam_step(&mut adam, &mut model.params, &grad) {
            return Err(fail(e.at_iteration(it), trace));
        }
    }
    match evaluate_elbo(model, data, config.report_samples, config.seed) {
        Ok(mut final_report) => {
            final_report.iteration = config.iters;
            Ok(TrainResult { trace, final_report })
        }
        Err(e) => Err(fail(e.at_iteration(config.iters), trace)),
    }
}

/// Moving average of the ELBO trace with the given window.
pub fn moving_average(trace: &[ElboReport], window: usize) -> Vec<f64> {
    if window == 0 || trace.len() < window {
        return Vec::new();
    }
    trace
        .windows(window)
        .map(|w| w.iter().map(|r| r.elbo).sum::<f64>() / window as f64)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_moons;
    use crate::model::{ModelConfig, ModelKind};

    fn setup(kind: ModelKind) -> (LdgdModel, Dataset) {
        let data = synthetic_moons(40, 2, 0.1, 2).unwrap();
        let config = ModelConfig {
            kind,
            latent_dim: 2,
            inducing_reg: 6,
            inducing_cls: 6,
            encoder_hidden: vec![8],
            ..ModelConfig::default()
        };
        (LdgdModel::init(&data, config, 3).unwrap(), data)
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = TrainConfig {
            batch_size: 16,
            iters: 30,
            seed: 11,
            ..TrainConfig::default()
        };
        for kind in [ModelKind::Ldgd, ModelKind::FastLdgd] {
            let (mut a, data) = setup(kind);
            let mut b = a.clone();
            let ra = train(&mut a, &data, &cfg).unwrap();
            let rb = train(&mut b, &data, &cfg).unwrap();
            assert_eq!(ra, rb);
            assert_eq!(a, b);
            for r in &ra.trace {
                assert!(r.kl_x >= 0.0 && r.kl_u_reg >= 0.0 && r.kl_u_cls >= 0.0);
                assert!((r.elbo - r.recomputed()).abs() <= 1e-12 * r.elbo.abs().max(1.0));
            }
        }
    }

    #[test]
    fn elbo_improves() {
        let (mut model, data) = setup(ModelKind::Ldgd);
        let cfg = TrainConfig {
            batch_size: 20,
            iters: 200,
            seed: 1,
            ..TrainConfig::default()
        };
        let r = train(&mut model, &data, &cfg).unwrap();
        let ma = moving_average(&r.trace, 50);
        assert!(ma.last().unwrap() >= ma.first().unwrap());
    }

    #[test]
    fn zero_iterations_leave_model_unchanged() {
        let (mut model, data) = setup(ModelKind::Ldgd);
        let before = model.clone();
        let r = train(&mut model, &data, &TrainConfig { iters: 0, ..TrainConfig::default() }).unwrap();
        assert!(r.trace.is_empty());
        assert_eq!(model, before);
    }

    #[test]
    fn invalid_config_fails_before_training() {
        let (mut model, data) = setup(ModelKind::Ldgd);
        let err = train(&mut model, &data, &TrainConfig { lr: 0.0, ..TrainConfig::default() }).unwrap_err();
        assert!(err.trace.is_empty());
        assert!(!err.error.is_numerical());
    }

    #[test]
    fn non_finite_objective_aborts_with_trace() {
        let (mut model, data) = setup(ModelKind::Ldgd);
        let d = data.n_features();
        model
            .params
            .set_storage(crate::model::blocks::NOISE, &crate::optim::Mat::from_element(1, d, -800.0))
            .unwrap();
        let cfg = TrainConfig { iters: 5, ..TrainConfig::default() };
        let f = train(&mut model, &data, &cfg).unwrap_err();
        assert!(f.error.is_numerical(), "{}", f.error);
        assert!(f.trace.is_empty());
        assert!(f.error.to_string().contains("iteration 0"), "{}", f.error);
    }
}
