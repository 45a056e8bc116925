use serde::{Deserialize, Serialize};

use super::elbo::whitened_projection;
use super::{LdgdModel, ModelKind};
use crate::baselines::{fit_ppca, ppca_project};
use crate::data::argmax_rows;
use crate::error::{LdgdError, Result};
use crate::latent::{encode, FreeFormLatent};
use crate::likelihoods::class_probability;
use crate::numerics::SeededRng;
use crate::optim::{AdamState, Mat, ParameterVector, Tape, Transform};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestInit {
    /// `μ* = 0`, `s* = 1`.
    Prior,
    /// PPCA projection of the test rows, scales at 1.
    Ppca,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TestInferenceConfig {
    pub lr: f64,
    pub iters: usize,
    pub seed: u64,
    /// Latent draws per row and step.
    pub samples: usize,
    pub init: TestInit,
}

impl Default for TestInferenceConfig {
    fn default() -> Self {
        TestInferenceConfig {
            lr: 0.01,
            iters: 500,
            seed: 0,
            samples: 1,
            init: TestInit::Prior,
        }
    }
}

/// Test-row latent posterior and the number of optimization steps taken.
#[derive(Debug, Clone, PartialEq)]
pub struct InferredLatent {
    pub latent: FreeFormLatent,
    pub iterations: usize,
}

/// Fits `q(X*)` for new rows against the regression-path ELL and the latent
/// KL, with every model parameter frozen. Fast models encode in one pass.
pub fn infer_test_latent(model: &LdgdModel, yr: &Mat, config: &TestInferenceConfig) -> Result<InferredLatent> {
    if yr.ncols() != model.d {
        return Err(LdgdError::InvalidArgument(format!(
            "model expects {} features, test data has {}",
            model.d,
            yr.ncols()
        )));
    }
    if model.config.kind == ModelKind::FastLdgd {
        let (mean, scale) = encode(&model.encoder().expect("encoder model"), yr)?;
        return Ok(InferredLatent {
            latent: FreeFormLatent { mean, scale },
            iterations: 0,
        });
    }
    if !(config.lr > 0.0) || config.samples == 0 {
        return Err(LdgdError::InvalidArgument(
            "test inference needs a positive lr and sample count".into(),
        ));
    }
    let (nt, q) = (yr.nrows(), model.latent_dim());
    if nt == 0 {
        return Ok(InferredLatent {
            latent: FreeFormLatent::prior(0, q),
            iterations: 0,
        });
    }

    let frozen = FrozenRegression::new(model)?;
    let mut params = ParameterVector::new();
    let (init_mean, init_scale) = match config.init {
        TestInit::Prior => (Mat::zeros(nt, q), Mat::from_element(nt, q, 1.0)),
        TestInit::Ppca => (ppca_init(yr, q)?, Mat::from_element(nt, q, 1.0)),
    };
    params.push("mean", &init_mean, Transform::Identity)?;
    params.push("scale", &init_scale, Transform::Log)?;

    let mut rng = SeededRng::new(config.seed).substream("test-eps");
    let mut adam = AdamState::new(params.flat().len(), config.lr);
    let rep: Vec<usize> = (0..config.samples).flat_map(|_| 0..nt).collect();
    let y_rep = Mat::from_fn(rep.len(), model.d, |i, j| yr[(rep[i], j)]);
    let data_scale = 1.0 / config.samples as f64;
    for it in 0..config.iters {
        let eps = rng.normal_matrix(rep.len(), q);
        let (_, grad) = crate::optim::gradient(&params, |tape, p| {
            let (mean, scale) = (p.get("mean"), p.get("scale"));
            let x = tape.add(
                tape.gather_rows(mean, &rep),
                tape.mul(tape.gather_rows(scale, &rep), tape.constant(eps.clone())),
            );
            let ell = tape.scale(frozen.ell(tape, x, &y_rep)?, data_scale);
            let objective = tape.sub(ell, tape.kl_latent(mean, scale));
            if !tape.scalar(objective).is_finite() {
                return Err(LdgdError::NonFiniteObjective { iteration: it });
            }
            Ok(tape.scale(objective, -1.0))
        })
        .map_err(|e| e.at_iteration(it))?;
        crate::optim::adam_step(&mut adam, &mut params, &grad).map_err(|e| e.at_iteration(it))?;
    }
    Ok(InferredLatent {
        latent: FreeFormLatent {
            mean: params.constrained("mean"),
            scale: params.constrained("scale"),
        },
        iterations: config.iters,
    })
}

fn ppca_init(yr: &Mat, q: usize) -> Result<Mat> {
    let (n, d) = yr.shape();
    let comps = q.min(d.saturating_sub(1)).min(n.saturating_sub(1));
    let mut out = Mat::zeros(n, q);
    if comps > 0 {
        let proj = ppca_project(&fit_ppca(yr, comps)?, yr)?;
        out.columns_mut(0, comps).copy_from(&proj);
    }
    Ok(out)
}

/// Regression path with every parameter fixed, reduced to the pieces the
/// test objective needs: `Σ_c Σ_f,c / σ_c²` is `σ_f² Σ_c 1/σ_c² + âᵀ S â`
/// with `S = Σ_c (Ŵ_c Ŵ_cᵀ − I) / σ_c²`.
struct FrozenRegression {
    z: Mat,
    variance: f64,
    alpha: Mat,
    means: Mat,
    noise: Mat,
    s: Mat,
    inv_noise_sum: f64,
}

impl FrozenRegression {
    fn new(model: &LdgdModel) -> Result<Self> {
        use super::blocks::*;
        let p = &model.params;
        let means = p.constrained(REG_MEAN);
        let chols = p.constrained(REG_CHOL);
        let noise = p.constrained(NOISE);
        let m = means.nrows();
        let mut s = Mat::zeros(m, m);
        let mut inv_noise_sum = 0.0;
        for c in 0..model.d {
            let w = chols.view((c * m, 0), (m, m));
            let inv = 1.0 / noise[(0, c)];
            s.gemm(inv, &w, &w.transpose(), 1.0);
            for i in 0..m {
                s[(i, i)] -= inv;
            }
            inv_noise_sum += inv;
        }
        Ok(FrozenRegression {
            z: p.constrained(REG_Z),
            variance: p.constrained(REG_VARIANCE)[(0, 0)],
            alpha: p.constrained(REG_ALPHA),
            means,
            noise,
            s,
            inv_noise_sum,
        })
    }

    fn ell(&self, tape: &Tape, x: crate::optim::Var, y: &Mat) -> Result<crate::optim::Var> {
        let b = y.nrows();
        let variance = tape.constant(Mat::from_element(1, 1, self.variance));
        let a = whitened_projection(
            tape,
            tape.constant(self.z.clone()),
            x,
            variance,
            tape.constant(self.alpha.clone()),
        )?;
        let mean = tape.matmul(tape.transpose(a), tape.constant(self.means.clone()));
        let zero_var = tape.constant(Mat::zeros(b, self.means.ncols()));
        let fit = tape.ell_gaussian(y, mean, zero_var, tape.constant(self.noise.clone()));
        let quad = tape.sum(tape.mul(a, tape.matmul(tape.constant(self.s.clone()), a)));
        let spread = tape.scale(quad, -0.5);
        let offset = tape.scalar_constant(-0.5 * b as f64 * self.variance * self.inv_noise_sum);
        Ok(tape.add(tape.add(fit, spread), offset))
    }
}

/// Class probabilities and argmax labels decoded from latent means.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    /// N×K, entry-wise in `[0, 1]`.
    pub probabilities: Mat,
    pub labels: Vec<usize>,
}

/// Classification-path predictive at each latent row, squashed through the
/// probit link.
pub fn decode_labels(model: &LdgdModel, latent_mean: &Mat) -> Result<Decoded> {
    check_latent(model, latent_mean)?;
    if latent_mean.nrows() == 0 {
        return Ok(Decoded {
            probabilities: Mat::zeros(0, model.k),
            labels: Vec::new(),
        });
    }
    let (mu, var) = model.classification_path().predict_diag(latent_mean)?;
    let probabilities = mu.zip_map(&var, class_probability);
    let labels = argmax_rows(&probabilities);
    Ok(Decoded { probabilities, labels })
}

/// Generated feature vectors with their per-dimension predictive variance
/// (latent function variance plus noise).
#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub mean: Mat,
    pub variance: Mat,
    /// Mean plus `N(0, σ_d²)` draws, when requested.
    pub samples: Option<Mat>,
}

/// Regression-path predictive at latent points `P×Q`. With `noise_rng`,
/// adds observation-noise draws to the mean.
pub fn generate(model: &LdgdModel, points: &Mat, noise_rng: Option<&mut SeededRng>) -> Result<Generated> {
    check_latent(model, points)?;
    let p = points.nrows();
    if p == 0 {
        return Ok(Generated {
            mean: Mat::zeros(0, model.d),
            variance: Mat::zeros(0, model.d),
            samples: noise_rng.map(|_| Mat::zeros(0, model.d)),
        });
    }
    let (mean, fvar) = model.regression_path().predict_diag(points)?;
    let noise = model.noise().variances;
    let variance = Mat::from_fn(p, model.d, |i, j| fvar[(i, j)] + noise[j]);
    let samples = noise_rng.map(|rng| Mat::from_fn(p, model.d, |i, j| mean[(i, j)] + noise[j].sqrt() * rng.normal()));
    Ok(Generated { mean, variance, samples })
}

fn check_latent(model: &LdgdModel, x: &Mat) -> Result<()> {
    if x.ncols() != model.latent_dim() {
        return Err(LdgdError::InvalidArgument(format!(
            "latent points have {} columns, model has Q={}",
            x.ncols(),
            model.latent_dim()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthetic_moons, Dataset};
    use crate::model::{blocks, ModelConfig};

    fn model(kind: ModelKind, k_cols: Option<usize>) -> (LdgdModel, Dataset) {
        let mut data = synthetic_moons(30, 2, 0.1, 5).unwrap();
        if let Some(k) = k_cols {
            data.yc = data.yc.columns(0, k).into_owned();
            data.label_names.truncate(k);
        }
        let config = ModelConfig {
            kind,
            latent_dim: 2,
            inducing_reg: 5,
            inducing_cls: 5,
            encoder_hidden: vec![6],
            ..ModelConfig::default()
        };
        (LdgdModel::init(&data, config, 2).unwrap(), data)
    }

    #[test]
    fn prior_classifier_is_undecided() {
        let (m, _) = model(ModelKind::Ldgd, Some(1));
        let x = SeededRng::new(1).normal_matrix(7, 2);
        let d = decode_labels(&m, &x).unwrap();
        assert!(d.probabilities.iter().all(|&p| p == 0.5));
        assert_eq!(d.labels, vec![0; 7]);
    }

    #[test]
    fn decode_matches_direct_probabilities() {
        let (mut m, _) = model(ModelKind::Ldgd, None);
        let mean = SeededRng::new(3).normal_matrix(5, 2);
        m.params.set_storage(blocks::CLS_MEAN, &mean).unwrap();
        let x = SeededRng::new(4).normal_matrix(9, 2);
        let d = decode_labels(&m, &x).unwrap();
        let (mu, var) = m.classification_path().predict_diag(&x).unwrap();
        for i in 0..9 {
            for c in 0..2 {
                let p = class_probability(mu[(i, c)], var[(i, c)]);
                assert!((d.probabilities[(i, c)] - p).abs() < 1e-12);
                assert!((0.0..=1.0).contains(&p));
            }
            assert_eq!(d.labels[i], argmax_rows(&d.probabilities)[i]);
        }
        assert!(decode_labels(&m, &Mat::zeros(2, 3)).is_err());
    }

    #[test]
    fn prior_generation_has_zero_mean() {
        let (m, _) = model(ModelKind::Ldgd, None);
        let g = generate(&m, &SeededRng::new(0).normal_matrix(4, 2), None).unwrap();
        assert!(g.mean.iter().all(|&v| v == 0.0));
        assert!(g.variance.iter().all(|&v| v > 0.0));
        let mut rng = SeededRng::new(8);
        let g = generate(&m, &Mat::zeros(0, 2), Some(&mut rng)).unwrap();
        assert_eq!(g.mean.nrows(), 0);
        assert_eq!(g.samples.unwrap().nrows(), 0);
    }

    #[test]
    fn fast_model_skips_optimization() {
        let (m, data) = model(ModelKind::FastLdgd, None);
        let r = infer_test_latent(&m, &data.yr, &TestInferenceConfig::default()).unwrap();
        assert_eq!(r.iterations, 0);
        assert_eq!(r.latent.mean.shape(), (30, 2));
        assert!(r.latent.scale.iter().all(|&s| s > 0.0));
    }

    #[test]
    fn frozen_objective_matches_generic_ell() {
        let (mut m, data) = model(ModelKind::Ldgd, None);
        let mut rng = SeededRng::new(12);
        for name in [blocks::REG_MEAN, blocks::REG_CHOL] {
            let s = m.params.storage(name);
            m.params.set_storage(name, &(&s + rng.normal_matrix(s.nrows(), s.ncols()) * 0.3)).unwrap();
        }
        let frozen = FrozenRegression::new(&m).unwrap();
        let x = rng.normal_matrix(6, 2);
        let y = data.yr.rows(0, 6).into_owned();
        let tape = Tape::new();
        let got = tape.scalar(frozen.ell(&tape, tape.constant(x.clone()), &y).unwrap());
        let (mu, var) = m.regression_path().predict_diag(&x).unwrap();
        let noise = m.noise().variances;
        let mut want = 0.0;
        for i in 0..6 {
            for c in 0..m.d {
                want += crate::likelihoods::ell_regression(y[(i, c)], mu[(i, c)], var[(i, c)], noise[c]);
            }
        }
        assert!((got - want).abs() < 1e-9 * want.abs().max(1.0), "{got} vs {want}");
    }

    #[test]
    fn test_inference_is_deterministic_and_rejects_bad_shapes() {
        let (m, data) = model(ModelKind::Ldgd, None);
        let cfg = TestInferenceConfig { iters: 20, ..TestInferenceConfig::default() };
        let a = infer_test_latent(&m, &data.yr, &cfg).unwrap();
        let b = infer_test_latent(&m, &data.yr, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.iterations, 20);
        assert!(infer_test_latent(&m, &Mat::zeros(2, 5), &cfg).is_err());
    }
}
