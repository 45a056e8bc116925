//! Regression-only sparse GP with known inputs: the model with the latent
//! positions fixed and the classification path removed.

use super::elbo::whitened_projection;
use crate::error::{LdgdError, Result};
use crate::kernels::ArdKernel;
use crate::likelihoods::GaussianNoise;
use crate::numerics::cholesky_with_jitter;
use crate::optim::{adam_step, gradient, AdamState, BoundParams, Mat, ParameterVector, Tape, Transform, Var};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq)]
pub struct SparseRegressionFit {
    pub kernel: ArdKernel,
    pub noise: GaussianNoise,
    /// Final ELBO.
    pub elbo: f64,
    /// Exact log marginal likelihood at the fitted kernel and noise.
    pub exact_log_marginal: f64,
    pub trace: Vec<f64>,
}

fn objective(tape: &Tape, p: &BoundParams, z: &Mat, x: &Mat, y: &Mat) -> Result<Var> {
    let (var, alpha) = (p.get("variance"), p.get("alpha"));
    let a = whitened_projection(tape, tape.constant(z.clone()), tape.constant(x.clone()), var, alpha)?;
    let ell = tape.ell_gaussian_whitened(a, var, p.get("mean"), p.get("chol"), y, p.get("noise"));
    Ok(tape.sub(ell, tape.kl_whitened(p.get("mean"), p.get("chol"))))
}

/// Maximizes the uncollapsed sparse-GP ELBO over kernel, noise and the
/// whitened `q(u)` by Adam, holding the inducing inputs at `z`.
pub fn fit_sparse_regression(x: &Mat, y: &Mat, z: &Mat, iters: usize, lr: f64) -> Result<SparseRegressionFit> {
    if x.nrows() != y.nrows() || x.ncols() != z.ncols() || x.nrows() == 0 || z.nrows() == 0 {
        return Err(LdgdError::InvalidArgument("inconsistent regression shapes".into()));
    }
    let (m, q, d) = (z.nrows(), x.ncols(), y.ncols());
    let mut params = ParameterVector::new();
    params.push("variance", &Mat::from_element(1, 1, 1.0), Transform::Log)?;
    params.push("alpha", &Mat::from_element(1, q, 1.0), Transform::Log)?;
    params.push("noise", &Mat::from_row_slice(1, d, &GaussianNoise::from_data(y).variances), Transform::Log)?;
    params.push("mean", &Mat::zeros(m, d), Transform::Identity)?;
    params.push_storage("chol", &Mat::zeros(d * m, m), Transform::LowerLogDiag)?;

    let mut adam = AdamState::new(params.flat().len(), lr);
    let mut trace = Vec::with_capacity(iters);
    for _ in 0..iters {
        let (value, grad) = gradient(&params, |tape, p| Ok(tape.scale(objective(tape, p, z, x, y)?, -1.0)))?;
        trace.push(-value);
        adam_step(&mut adam, &mut params, &grad)?;
    }
    let tape = Tape::new();
    let bound = params.bind_with(&tape, |_| false);
    let elbo = tape.scalar(objective(&tape, &bound, z, x, y)?);
    let kernel = ArdKernel::new(
        params.constrained("variance")[(0, 0)],
        params.constrained("alpha").iter().copied().collect(),
    )?;
    let noise = GaussianNoise::new(params.constrained("noise").iter().copied().collect())?;
    let exact = exact_log_marginal(&kernel, &noise.variances, x, y)?;
    Ok(SparseRegressionFit {
        kernel,
        noise,
        elbo,
        exact_log_marginal: exact,
        trace,
    })
}

/// `Σ_c log N(y_c | 0, K_XX + σ_c² I)`.
pub fn exact_log_marginal(kernel: &ArdKernel, noise: &[f64], x: &Mat, y: &Mat) -> Result<f64> {
    if noise.len() != y.ncols() || x.nrows() != y.nrows() {
        return Err(LdgdError::InvalidArgument("inconsistent regression shapes".into()));
    }
    let n = x.nrows();
    let kxx = kernel.gram_sym(x)?;
    let mut total = 0.0;
    for (c, s2) in noise.iter().enumerate() {
        let mut k = kxx.clone();
        for i in 0..n {
            k[(i, i)] += s2;
        }
        let f = cholesky_with_jitter(&k, 0.0)?;
        let yc = y.column(c).into_owned();
        let alpha = f.solve_lower(&Mat::from_column_slice(n, 1, yc.as_slice()));
        total += -0.5 * (alpha.norm_squared() + f.log_det() + n as f64 * LN_2PI);
    }
    Ok(total)
}
