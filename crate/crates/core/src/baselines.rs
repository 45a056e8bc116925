//! Probabilistic PCA by eigendecomposition of the sample covariance.

use nalgebra::SymmetricEigen;

use crate::error::{LdgdError, Result};
use crate::optim::Mat;

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const MIN_NOISE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct PpcaModel {
    /// D×Q loadings, columns by decreasing norm.
    pub w: Mat,
    pub noise_var: f64,
    pub mean: Vec<f64>,
}

/// Maximum-likelihood PPCA with `q` components.
///
/// Loadings are `U_Q (Λ_Q - σ² I)^{1/2}` with `σ²` the mean of the discarded
/// eigenvalues. The largest-magnitude entry of each column is made positive.
pub fn fit_ppca(y: &Mat, q: usize) -> Result<PpcaModel> {
    let (n, d) = y.shape();
    if q == 0 || q >= d || n <= q {
        return Err(LdgdError::InvalidArgument(format!(
            "ppca needs 0 < Q < D and N > Q (N={n}, D={d}, Q={q})"
        )));
    }
    let mean: Vec<f64> = y.column_iter().map(|c| c.sum() / n as f64).collect();
    let centered = centered(y, &mean);
    let cov = centered.tr_mul(&centered) / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let lambda: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let scale = lambda[0].abs().max(f64::MIN_POSITIVE);
    let positive = lambda.iter().filter(|l| **l > 1e-12 * scale).count();
    if positive < q {
        return Err(LdgdError::Numerical(format!(
            "covariance has {positive} positive eigenvalues, {q} components requested"
        )));
    }
    let discarded = &lambda[q..];
    let noise_var =
        (discarded.iter().map(|l| l.max(0.0)).sum::<f64>() / discarded.len() as f64).max(MIN_NOISE);
    let mut w = Mat::zeros(d, q);
    for (k, &i) in order.iter().take(q).enumerate() {
        let amp = (lambda[k] - noise_var).max(0.0).sqrt();
        let mut col = eig.eigenvectors.column(i).into_owned();
        let pivot = col.iter().copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        if pivot < 0.0 {
            col = -col;
        }
        w.set_column(k, &(col * amp));
    }
    Ok(PpcaModel { w, noise_var, mean })
}

fn centered(y: &Mat, mean: &[f64]) -> Mat {
    let mut c = y.clone();
    for (j, mut col) in c.column_iter_mut().enumerate() {
        col.add_scalar_mut(-mean[j]);
    }
    c
}

/// Posterior means `(WᵀW + σ²I)⁻¹ Wᵀ (y - mean)`, one row per input row.
pub fn ppca_project(model: &PpcaModel, y: &Mat) -> Result<Mat> {
    if y.ncols() != model.mean.len() {
        return Err(LdgdError::InvalidArgument(format!(
            "model has {} features, data has {}",
            model.mean.len(),
            y.ncols()
        )));
    }
    let q = model.w.ncols();
    let m = model.w.tr_mul(&model.w) + Mat::identity(q, q) * model.noise_var;
    let chol = m
        .cholesky()
        .ok_or_else(|| LdgdError::Numerical("PPCA posterior precision is singular".into()))?;
    let rhs = model.w.tr_mul(&centered(y, &model.mean).transpose());
    Ok(chol.solve(&rhs).transpose())
}

/// `Σ_i log N(y_i | mean, WWᵀ + σ²I)` over rows.
pub fn ppca_log_likelihood(y: &Mat, w: &Mat, noise_var: f64, mean: &[f64]) -> Result<f64> {
    let d = w.nrows();
    let c = w * w.transpose() + Mat::identity(d, d) * noise_var;
    gaussian_rows_log_density(&centered(y, mean), &c)
}

/// Dual form: `Σ_d log N(y_{:,d} | 0, XXᵀ + σ²I)` over the columns of `y`,
/// with latent positions `x` (N×Q) in place of the loadings.
pub fn dual_ppca_log_likelihood(y: &Mat, x: &Mat, noise_var: f64) -> Result<f64> {
    let n = x.nrows();
    let k = x * x.transpose() + Mat::identity(n, n) * noise_var;
    let chol = k
        .cholesky()
        .ok_or_else(|| LdgdError::Numerical("dual covariance is singular".into()))?;
    let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let mut total = 0.0;
    for col in y.column_iter() {
        let v = col.into_owned();
        let quad = v.dot(&chol.solve(&v));
        total += -0.5 * (n as f64 * LN_2PI + log_det + quad);
    }
    Ok(total)
}

fn gaussian_rows_log_density(centered: &Mat, cov: &Mat) -> Result<f64> {
    let d = cov.nrows();
    let chol = cov
        .clone()
        .cholesky()
        .ok_or_else(|| LdgdError::Numerical("covariance is singular".into()))?;
    let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let solved = chol.solve(&centered.transpose());
    let quad = centered.transpose().component_mul(&solved).sum();
    Ok(-0.5 * (centered.nrows() as f64 * (d as f64 * LN_2PI + log_det) + quad))
}

impl PpcaModel {
    pub fn log_likelihood(&self, y: &Mat) -> Result<f64> {
        ppca_log_likelihood(y, &self.w, self.noise_var, &self.mean)
    }

    /// Reconstruction `W x + mean` for latent rows `x`.
    pub fn reconstruct(&self, x: &Mat) -> Mat {
        let mut out = x * self.w.transpose();
        for (j, mut col) in out.column_iter_mut().enumerate() {
            col.add_scalar_mut(self.mean[j]);
        }
        out
    }
}
