//! Variational posteriors over latent coordinates.

use crate::error::{LdgdError, Result};
use crate::numerics::SeededRng;
use crate::optim::tape::softplus;
use crate::optim::{Mat, Tape, Var};

/// Per-row diagonal Gaussians `N(μ_i, diag(s_i²))`.
#[derive(Debug, Clone, PartialEq)]
pub struct FreeFormLatent {
    pub mean: Mat,
    /// Standard deviations, strictly positive.
    pub scale: Mat,
}

impl FreeFormLatent {
    pub fn new(mean: Mat, scale: Mat) -> Result<Self> {
        if mean.shape() != scale.shape() {
            return Err(LdgdError::InvalidArgument(
                "latent mean and scale shapes differ".into(),
            ));
        }
        if scale.iter().any(|s| !(*s > 0.0)) {
            return Err(LdgdError::InvalidArgument(
                "latent scales must be positive".into(),
            ));
        }
        Ok(FreeFormLatent { mean, scale })
    }

    /// `μ = 0, s = 1` for `n` rows.
    pub fn prior(n: usize, q: usize) -> Self {
        FreeFormLatent {
            mean: Mat::zeros(n, q),
            scale: Mat::from_element(n, q, 1.0),
        }
    }

    pub fn rows(&self) -> usize {
        self.mean.nrows()
    }

    pub fn dim(&self) -> usize {
        self.mean.ncols()
    }

    pub fn kl(&self) -> f64 {
        kl_latent(&self.mean, &self.scale)
    }
}

/// `μ_i + s_i ⊙ ε`.
pub fn sample_latent(mean: &[f64], scale: &[f64], eps: &[f64]) -> Result<Vec<f64>> {
    if mean.len() != eps.len() || scale.len() != eps.len() {
        return Err(LdgdError::InvalidArgument(format!(
            "latent has {} dimensions, noise has {}",
            mean.len(),
            eps.len()
        )));
    }
    Ok(mean
        .iter()
        .zip(scale)
        .zip(eps)
        .map(|((m, s), e)| m + s * e)
        .collect())
}

/// `Σ_i KL(N(μ_i, diag(s_i²)) ‖ N(0, I))`.
pub fn kl_latent(mean: &Mat, scale: &Mat) -> f64 {
    0.5 * mean
        .iter()
        .zip(scale.iter())
        .map(|(m, s)| m * m + s * s - 1.0 - 2.0 * s.ln())
        .sum::<f64>()
}

/// Dense feed-forward network `D → hidden… → 2Q` with tanh hidden layers.
/// The first Q outputs are means, the last Q pass through softplus to give
/// scales.
#[derive(Debug, Clone, PartialEq)]
pub struct AmortizedEncoder {
    /// Per layer: weights (in×out) and bias (1×out).
    pub layers: Vec<(Mat, Mat)>,
    pub latent_dim: usize,
}

impl AmortizedEncoder {
    /// Random weights `N(0, 1/fan_in)` and zero biases.
    pub fn new(input_dim: usize, hidden: &[usize], latent_dim: usize, rng: &mut SeededRng) -> Result<Self> {
        if input_dim == 0 || latent_dim == 0 || hidden.contains(&0) {
            return Err(LdgdError::InvalidArgument(
                "encoder layer sizes must be positive".into(),
            ));
        }
        let mut sizes = vec![input_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(2 * latent_dim);
        let layers = sizes
            .windows(2)
            .map(|w| {
                let std = (1.0 / w[0] as f64).sqrt();
                (rng.normal_matrix(w[0], w[1]) * std, Mat::zeros(1, w[1]))
            })
            .collect();
        Ok(AmortizedEncoder { layers, latent_dim })
    }

    /// Builds an encoder from explicit layers.
    pub fn from_layers(layers: Vec<(Mat, Mat)>) -> Result<Self> {
        let last = layers
            .last()
            .ok_or_else(|| LdgdError::InvalidArgument("encoder needs a layer".into()))?;
        if last.0.ncols() % 2 != 0 {
            return Err(LdgdError::InvalidArgument(
                "encoder output width must be even".into(),
            ));
        }
        for w in layers.windows(2) {
            if w[0].0.ncols() != w[1].0.nrows() {
                return Err(LdgdError::InvalidArgument("encoder layer shapes do not chain".into()));
            }
        }
        for (w, b) in &layers {
            if b.shape() != (1, w.ncols()) {
                return Err(LdgdError::InvalidArgument("encoder bias shape mismatch".into()));
            }
        }
        let latent_dim = last.0.ncols() / 2;
        Ok(AmortizedEncoder { layers, latent_dim })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].0.nrows()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|(w, b)| w.len() + b.len()).sum()
    }
}

/// Forward pass: `(μ, s)`, both B×Q.
pub fn encode(encoder: &AmortizedEncoder, y: &Mat) -> Result<(Mat, Mat)> {
    if y.ncols() != encoder.input_dim() {
        return Err(LdgdError::InvalidArgument(format!(
            "encoder expects {} inputs, batch has {} columns",
            encoder.input_dim(),
            y.ncols()
        )));
    }
    let mut h = y.clone();
    let last = encoder.layers.len() - 1;
    for (k, (w, b)) in encoder.layers.iter().enumerate() {
        h *= w;
        for mut r in h.row_iter_mut() {
            r += b;
        }
        if k < last {
            h.apply(|v| *v = v.tanh());
        }
    }
    let q = encoder.latent_dim;
    let mean = h.columns(0, q).into_owned();
    let scale = h.columns(q, q).map(softplus);
    Ok((mean, scale))
}

impl Tape {
    /// Encoder forward pass on the tape; `layers` holds `(weights, bias)` nodes.
    pub fn encode(&self, y: Var, layers: &[(Var, Var)], latent_dim: usize) -> (Var, Var) {
        let mut h = y;
        for (k, &(w, b)) in layers.iter().enumerate() {
            h = self.add_row(self.matmul(h, w), b);
            if k + 1 < layers.len() {
                h = self.tanh(h);
            }
        }
        let mean = self.slice_cols(h, 0, latent_dim);
        let scale = self.softplus(self.slice_cols(h, latent_dim, latent_dim));
        (mean, scale)
    }

    /// `Σ KL(N(μ, s²) ‖ N(0, 1))` over all entries of `mean`, `scale`.
    pub fn kl_latent(&self, mean: Var, scale: Var) -> Var {
        let vm = self.value(mean);
        let vs = self.value(scale);
        let value = kl_latent(&vm, &vs);
        self.push(Mat::from_element(1, 1, value), &[mean, scale], move |g, need| {
            let c = g[(0, 0)];
            vec![
                need[0].then(|| &*vm * c),
                need[1].then(|| vs.map(|s| c * (s - 1.0 / s))),
            ]
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::{check_gradient, gradient, ParameterVector, Transform, FD_STEP, FD_TOLERANCE};

    #[test]
    fn zero_noise_returns_mean() {
        let x = sample_latent(&[1.0, -2.0], &[0.3, 4.0], &[0.0, 0.0]).unwrap();
        assert_eq!(x, vec![1.0, -2.0]);
        assert!(sample_latent(&[1.0], &[1.0], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn standard_sampling_has_unit_variance() {
        let mut rng = SeededRng::new(17);
        let n = 100_000;
        for _ in 0..2 {
            let draws: Vec<f64> = (0..n)
                .map(|_| sample_latent(&[0.0], &[1.0], &[rng.normal()]).unwrap()[0])
                .collect();
            let mean = draws.iter().sum::<f64>() / n as f64;
            let var = draws.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / n as f64;
            assert!((var - 1.0).abs() < 0.05);
        }
    }

    #[test]
    fn sample_gradient_wrt_scale_is_noise() {
        let eps = Mat::from_row_slice(1, 3, &[0.4, -1.2, 2.0]);
        let mut p = ParameterVector::new();
        p.push("mu", &Mat::from_row_slice(1, 3, &[0.1, 0.2, 0.3]), Transform::Identity).unwrap();
        p.push("s", &Mat::from_row_slice(1, 3, &[0.5, 1.0, 2.0]), Transform::Identity).unwrap();
        for k in 0..3 {
            let (_, g) = gradient(&p, |t, b| {
                let e = t.constant(eps.clone());
                let x = t.add(b.get("mu"), t.mul(b.get("s"), e));
                Ok(t.slice_cols(x, k, 1))
            })
            .unwrap();
            for j in 0..3 {
                let want = if j == k { eps[(0, k)] } else { 0.0 };
                assert_eq!(g[3 + j], want);
            }
        }
    }

    #[test]
    fn kl_examples() {
        assert_eq!(FreeFormLatent::prior(4, 3).kl(), 0.0);
        let one = FreeFormLatent::new(Mat::from_element(1, 1, 1.0), Mat::from_element(1, 1, 1.0)).unwrap();
        assert!((one.kl() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn kl_matches_generic_oracle() {
        let mut rng = SeededRng::new(2);
        for _ in 0..20 {
            let mean = rng.normal_matrix(5, 3);
            let scale = rng.normal_matrix(5, 3).map(|v| (0.5 * v).exp());
            // KL(N(m, v) ‖ N(0, 1)) = ½(v + m² - 1 - ln v), one coordinate at a time
            let mut oracle = 0.0;
            for i in 0..5 {
                for q in 0..3 {
                    let v = scale[(i, q)].powi(2);
                    oracle += 0.5 * (v + mean[(i, q)].powi(2) - 1.0 - v.ln());
                }
            }
            let k = kl_latent(&mean, &scale);
            assert!((k - oracle).abs() < 1e-10 * oracle.max(1.0));
            assert!(k >= 0.0);
            let perm = [2, 0, 1];
            let pm = Mat::from_fn(5, 3, |i, q| mean[(i, perm[q])]);
            let ps = Mat::from_fn(5, 3, |i, q| scale[(i, perm[q])]);
            assert!((kl_latent(&pm, &ps) - k).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_encoder_is_constant() {
        let enc = AmortizedEncoder::from_layers(vec![
            (Mat::zeros(3, 4), Mat::zeros(1, 4)),
            (Mat::zeros(4, 4), Mat::zeros(1, 4)),
        ])
        .unwrap();
        let y = Mat::from_row_slice(2, 3, &[1.0, -2.0, 3.0, 0.5, 0.0, 9.0]);
        let (m, s) = encode(&enc, &y).unwrap();
        assert!(m.iter().all(|v| *v == 0.0));
        assert!(s.iter().all(|v| (v - std::f64::consts::LN_2).abs() < 1e-15));
        assert!(encode(&enc, &Mat::zeros(1, 2)).is_err());
    }

    #[test]
    fn linear_encoder_copies_inputs() {
        let q = 2;
        let w = Mat::identity(2 * q, 2 * q);
        let enc = AmortizedEncoder::from_layers(vec![(w, Mat::zeros(1, 2 * q))]).unwrap();
        let y = Mat::from_row_slice(2, 4, &[1.0, 2.0, 3.0, 4.0, -1.0, 0.5, 0.0, 7.0]);
        let (m, _) = encode(&enc, &y).unwrap();
        assert_eq!(m, y.columns(0, q).into_owned());
    }

    #[test]
    fn encoder_gradients_pass_finite_differences() {
        let mut rng = SeededRng::new(31);
        let enc = AmortizedEncoder::new(3, &[4], 2, &mut rng).unwrap();
        let y = rng.normal_matrix(5, 3);
        let mut p = ParameterVector::new();
        for (k, (w, b)) in enc.layers.iter().enumerate() {
            p.push(&format!("w{k}"), w, Transform::Identity).unwrap();
            p.push(&format!("b{k}"), &(b.map(|_| rng.normal() * 0.3)), Transform::Identity).unwrap();
        }
        let objective = |t: &Tape, b: &crate::optim::BoundParams| {
            let layers = vec![(b.get("w0"), b.get("b0")), (b.get("w1"), b.get("b1"))];
            let yv = t.constant(y.clone());
            let (m, s) = t.encode(yv, &layers, 2);
            let target = t.constant(Mat::from_fn(5, 2, |i, j| (i + 2 * j) as f64 * 0.1));
            let r = t.sub(m, target);
            Ok(t.add(t.sum(t.mul(r, r)), t.kl_latent(m, s)))
        };
        let (_, g) = gradient(&p, objective).unwrap();
        let report = check_gradient(
            &p,
            &g,
            |q| {
                let tape = Tape::new();
                let b = q.bind(&tape);
                let v = objective(&tape, &b)?;
                Ok(tape.scalar(v))
            },
            FD_STEP,
            FD_TOLERANCE,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
        let (mm, ss) = encode(&enc, &y).unwrap();
        assert!(ss.iter().all(|v| *v > 0.0));
        assert_eq!(mm.shape(), (5, 2));
    }
}
