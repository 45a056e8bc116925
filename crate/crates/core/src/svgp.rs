//! One sparse variational GP path in whitened form.
//!
//! With `K_MM = L Lᵀ`, each output column `c` carries `q(u_c) = N(L m̂_c,
//! L Ŵ_c Ŵ_cᵀ Lᵀ)`. Writing `Â = L⁻¹ K_MB`, the predictive at a batch is
//! `μ_f = Âᵀ m̂_c` and `Σ_f = K_BB + Âᵀ (Ŵ_c Ŵ_cᵀ - I) Â`, and the KL to the
//! prior `N(0, K_MM)` reduces to `½(‖m̂‖² + ‖Ŵ‖_F² - M - 2 Σ log Ŵ_ii)`.


use crate::error::{LdgdError, Result};
use crate::kernels::ArdKernel;
use crate::numerics::{cholesky_with_jitter, CholeskyFactor};
use crate::optim::tape::lower_exp_diag;
use crate::optim::{Mat, Tape, Var};

/// Constant diagonal jitter added to `K_MM` before factorization.
pub const INDUCING_JITTER: f64 = 1e-6;
/// Floor applied to predictive variances.
pub const VARIANCE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct InducingSet {
    pub z: Mat,
}

impl InducingSet {
    pub fn new(z: Mat) -> Result<Self> {
        if z.nrows() == 0 || z.iter().any(|v| !v.is_finite()) {
            return Err(LdgdError::InvalidArgument(
                "inducing inputs must be finite with at least one row".into(),
            ));
        }
        Ok(InducingSet { z })
    }

    pub fn len(&self) -> usize {
        self.z.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.z.nrows() == 0
    }
}

/// Whitened variational parameters of one output column.
#[derive(Debug, Clone, PartialEq)]
pub struct WhitenedColumnPosterior {
    pub mean: Vec<f64>,
    /// Lower-triangular with positive diagonal.
    pub chol: Mat,
}

impl WhitenedColumnPosterior {
    /// `m̂ = 0, Ŵ = I`: the posterior equals the prior.
    pub fn prior(m: usize) -> Self {
        WhitenedColumnPosterior {
            mean: vec![0.0; m],
            chol: Mat::identity(m, m),
        }
    }

    pub fn new(mean: Vec<f64>, chol: Mat) -> Result<Self> {
        let m = mean.len();
        if chol.shape() != (m, m) {
            return Err(LdgdError::InvalidArgument("posterior shape mismatch".into()));
        }
        for i in 0..m {
            if !(chol[(i, i)] > 0.0) {
                return Err(LdgdError::InvalidArgument(
                    "whitened factor needs a positive diagonal".into(),
                ));
            }
            for j in (i + 1)..m {
                if chol[(i, j)] != 0.0 {
                    return Err(LdgdError::InvalidArgument(
                        "whitened factor must be lower-triangular".into(),
                    ));
                }
            }
        }
        Ok(WhitenedColumnPosterior { mean, chol })
    }

    pub fn kl(&self) -> f64 {
        let m = self.mean.len() as f64;
        let mean_sq: f64 = self.mean.iter().map(|v| v * v).sum();
        let log_diag: f64 = self.chol.diagonal().iter().map(|d| d.ln()).sum();
        0.5 * (mean_sq + self.chol.norm_squared() - m - 2.0 * log_diag)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveGaussian {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub covariance: Option<Mat>,
}

/// Stacks column posteriors into the `(M×C, (C·M)×M)` layout the path uses.
pub fn stack_columns(columns: &[WhitenedColumnPosterior]) -> (Mat, Mat) {
    let c = columns.len();
    let m = columns.first().map(|p| p.mean.len()).unwrap_or(0);
    let mut means = Mat::zeros(m, c);
    let mut chols = Mat::zeros(c * m, m);
    for (k, p) in columns.iter().enumerate() {
        for i in 0..m {
            means[(i, k)] = p.mean[i];
        }
        chols.view_mut((k * m, 0), (m, m)).copy_from(&p.chol);
    }
    (means, chols)
}

/// Inverse of [`stack_columns`].
pub fn unstack_columns(means: &Mat, chols: &Mat) -> Vec<WhitenedColumnPosterior> {
    let m = means.nrows();
    (0..means.ncols())
        .map(|k| WhitenedColumnPosterior {
            mean: means.column(k).iter().copied().collect(),
            chol: chols.view((k * m, 0), (m, m)).into_owned(),
        })
        .collect()
}

/// Factor of `K_MM + jitter·I`.
pub fn inducing_factor(kernel: &ArdKernel, z: &InducingSet) -> Result<CholeskyFactor> {
    let mut kmm = kernel.gram_sym(&z.z)?;
    for i in 0..kmm.nrows() {
        kmm[(i, i)] += INDUCING_JITTER;
    }
    cholesky_with_jitter(&kmm, 0.0)
}

/// Predictive means (B×C) and raw variances (B×C, before the floor) from
/// `Â` (M×B), the prior variance `kdiag`, means `m̂` (M×C) and stacked
/// factors `Ŵ` ((C·M)×M).
pub(crate) fn predictive_moments(a: &Mat, kdiag: f64, means: &Mat, chols: &Mat) -> (Mat, Mat) {
    let m = a.nrows();
    let b = a.ncols();
    let c = means.ncols();
    let mu = a.tr_mul(means);
    let a_sq: Vec<f64> = a.column_iter().map(|col| col.norm_squared()).collect();
    let mut var = Mat::zeros(b, c);
    for k in 0..c {
        let w = chols.view((k * m, 0), (m, m));
        let bk = w.tr_mul(a);
        for j in 0..b {
            var[(j, k)] = kdiag - a_sq[j] + bk.column(j).norm_squared();
        }
    }
    (mu, var)
}

/// Predictive distribution of one column at the rows of `x`.
pub fn predictive(
    column: &WhitenedColumnPosterior,
    z: &InducingSet,
    kernel: &ArdKernel,
    x: &Mat,
    full_covariance: bool,
) -> Result<PredictiveGaussian> {
    if column.mean.len() != z.len() {
        return Err(LdgdError::InvalidArgument(format!(
            "posterior has {} inducing values, inducing set has {}",
            column.mean.len(),
            z.len()
        )));
    }
    let factor = inducing_factor(kernel, z)?;
    let kmb = kernel.gram(&z.z, x)?;
    let a = factor.solve_lower(&kmb);
    let means = Mat::from_column_slice(column.mean.len(), 1, &column.mean);
    let (mu, var) = predictive_moments(&a, kernel.variance, &means, &column.chol);
    let covariance = if full_covariance {
        let s = &column.chol * column.chol.transpose() - Mat::identity(z.len(), z.len());
        let mut cov = kernel.gram_sym(x)? + a.transpose() * s * &a;
        let sym = (&cov + cov.transpose()) * 0.5;
        cov = sym;
        Some(cov)
    } else {
        None
    };
    Ok(PredictiveGaussian {
        mean: mu.iter().copied().collect(),
        variance: var.iter().map(|v| v.max(VARIANCE_FLOOR)).collect(),
        covariance,
    })
}

/// Sum over columns of `KL(q(u_c) ‖ p(u_c))` in whitened form.
pub fn kl_inducing(columns: &[WhitenedColumnPosterior]) -> f64 {
    columns.iter().map(WhitenedColumnPosterior::kl).sum()
}

/// One GP path: shared kernel and inducing inputs, one whitened posterior per
/// output column.
#[derive(Debug, Clone, PartialEq)]
pub struct SvgpPath {
    pub kernel: ArdKernel,
    pub inducing: InducingSet,
    pub columns: Vec<WhitenedColumnPosterior>,
}

impl SvgpPath {
    /// Path whose column posteriors all equal the prior.
    pub fn at_prior(kernel: ArdKernel, inducing: InducingSet, n_columns: usize) -> Self {
        let m = inducing.len();
        SvgpPath {
            kernel,
            inducing,
            columns: vec![WhitenedColumnPosterior::prior(m); n_columns],
        }
    }

    /// Predictive means and variances (both B×C) at the rows of `x`.
    pub fn predict_diag(&self, x: &Mat) -> Result<(Mat, Mat)> {
        let factor = inducing_factor(&self.kernel, &self.inducing)?;
        let kmb = self.kernel.gram(&self.inducing.z, x)?;
        let a = factor.solve_lower(&kmb);
        let (means, chols) = stack_columns(&self.columns);
        let (mu, var) = predictive_moments(&a, self.kernel.variance, &means, &chols);
        Ok((mu, var.map(|v| v.max(VARIANCE_FLOOR))))
    }

    pub fn predict_column(&self, column: usize, x: &Mat, full: bool) -> Result<PredictiveGaussian> {
        predictive(&self.columns[column], &self.inducing, &self.kernel, x, full)
    }

    pub fn kl(&self) -> f64 {
        kl_inducing(&self.columns)
    }
}

impl Tape {
    /// Whitened predictive moments. Inputs: `Â` (M×B), kernel variance (1×1),
    /// means `m̂` (M×C) and stacked lower factors `Ŵ` ((C·M)×M). Output is
    /// B×2C: predictive means in the first C columns, floored variances in
    /// the last C.
    pub fn whitened_predictive(&self, a: Var, kvar: Var, means: Var, chols: Var) -> Var {
        let va = self.value(a);
        let vm = self.value(means);
        let vw = self.value(chols);
        let (mu, raw) = predictive_moments(&va, self.scalar(kvar), &vm, &vw);
        let (b, c) = mu.shape();
        let mut out = Mat::zeros(b, 2 * c);
        out.columns_mut(0, c).copy_from(&mu);
        out.columns_mut(c, c).copy_from(&raw.map(|v| v.max(VARIANCE_FLOOR)));
        self.push(out, &[a, kvar, means, chols], move |g, need| {
            let m = va.nrows();
            let g_mu = g.columns(0, c).into_owned();
            let mut g_var = g.columns(c, c).into_owned();
            for (gv, r) in g_var.iter_mut().zip(raw.iter()) {
                if *r < VARIANCE_FLOOR {
                    *gv = 0.0;
                }
            }
            let mut ga = need[0].then(|| {
                let mut ga = &*vm * g_mu.transpose();
                let tot = g_var.column_sum();
                for j in 0..b {
                    let mut col = ga.column_mut(j);
                    col.axpy(-2.0 * tot[j], &va.column(j), 1.0);
                }
                ga
            });
            let mut gw = need[3].then(|| Mat::zeros(c * m, m));
            for k in 0..c {
                let w = vw.view((k * m, 0), (m, m));
                let mut bk = w.tr_mul(&*va); // M×B
                for j in 0..b {
                    bk.column_mut(j).scale_mut(g_var[(j, k)]);
                }
                // bk now holds B_k diag(g_k)
                if let Some(ga) = ga.as_mut() {
                    ga.gemm(2.0, &w, &bk, 1.0);
                }
                if let Some(gw) = gw.as_mut() {
                    let mut block = gw.view_mut((k * m, 0), (m, m));
                    // 2 Â diag(g) B_kᵀ = 2 Â (B_k diag(g))ᵀ
                    block.gemm(2.0, &*va, &bk.transpose(), 0.0);
                }
            }
            let gk = need[1].then(|| Mat::from_element(1, 1, g_var.sum()));
            let gm = need[2].then(|| &*va * &g_mu);
            vec![ga, gk, gm, gw]
        })
    }

    /// Whitened inducing KL summed over columns: `means` (M×C) and stacked
    /// lower factors `chols` ((C·M)×M) with positive diagonals.
    pub fn kl_whitened(&self, means: Var, chols: Var) -> Var {
        let vm = self.value(means);
        let vw = self.value(chols);
        let m = vw.ncols();
        let c = vm.ncols();
        let mut log_diag = 0.0;
        for i in 0..vw.nrows() {
            log_diag += vw[(i, i % m)].ln();
        }
        let value =
            0.5 * (vm.norm_squared() + vw.norm_squared() - (m * c) as f64 - 2.0 * log_diag);
        self.push(Mat::from_element(1, 1, value), &[means, chols], move |g, need| {
            let s = g[(0, 0)];
            let gm = need[0].then(|| &*vm * s);
            let gw = need[1].then(|| {
                let mut d = &*vw * s;
                for i in 0..vw.nrows() {
                    d[(i, i % m)] -= s / vw[(i, i % m)];
                }
                d
            });
            vec![gm, gw]
        })
    }
}

/// Builds `(m̂, Ŵ)` stacks from unconstrained storage, for checkpoint round trips.
pub fn chols_from_storage(raw: &Mat) -> Mat {
    lower_exp_diag(raw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::SeededRng;

    fn random_posterior(rng: &mut SeededRng, m: usize) -> WhitenedColumnPosterior {
        let mean: Vec<f64> = (0..m).map(|_| rng.normal()).collect();
        let mut chol = Mat::zeros(m, m);
        for i in 0..m {
            for j in 0..i {
                chol[(i, j)] = 0.3 * rng.normal();
            }
            chol[(i, i)] = (0.3 * rng.normal()).exp();
        }
        WhitenedColumnPosterior::new(mean, chol).unwrap()
    }

    #[test]
    fn prior_posterior_recovers_prior_predictive() {
        let mut rng = SeededRng::new(1);
        let kernel = ArdKernel::new(1.7, vec![0.8, 1.3]).unwrap();
        let z = InducingSet::new(rng.normal_matrix(4, 2)).unwrap();
        let x = rng.normal_matrix(5, 2);
        let p = predictive(&WhitenedColumnPosterior::prior(4), &z, &kernel, &x, true).unwrap();
        assert!(p.mean.iter().all(|m| m.abs() < 1e-15));
        let kbb = kernel.gram_sym(&x).unwrap();
        assert!((p.covariance.unwrap() - &kbb).amax() < 1e-12);
        for v in &p.variance {
            assert!((v - 1.7).abs() < 1e-12);
        }
    }

    #[test]
    fn single_inducing_point_mean() {
        let kernel = ArdKernel::new(2.5, vec![1.0]).unwrap();
        let x = Mat::from_element(1, 1, 0.4);
        let z = InducingSet::new(x.clone()).unwrap();
        let c = 1.3;
        let post = WhitenedColumnPosterior::new(vec![c], Mat::identity(1, 1)).unwrap();
        let p = predictive(&post, &z, &kernel, &x, false).unwrap();
        // Â = k(x,x) / √(k(x,x) + jitter)
        let want = c * 2.5 / (2.5 + INDUCING_JITTER).sqrt();
        assert!((p.mean[0] - want).abs() < 1e-12);
        assert!((p.mean[0] - c * 2.5f64.sqrt()).abs() < 1e-6);
    }

    #[test]
    fn kl_values() {
        assert_eq!(kl_inducing(&[WhitenedColumnPosterior::prior(3)]), 0.0);
        let p = WhitenedColumnPosterior::new(vec![1.0], Mat::identity(1, 1)).unwrap();
        assert!((kl_inducing(&[p]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn posterior_validation() {
        assert!(WhitenedColumnPosterior::new(vec![0.0; 2], Mat::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0])).is_err());
        assert!(WhitenedColumnPosterior::new(vec![0.0; 2], Mat::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, 1.0])).is_err());
    }

    #[test]
    fn stacking_round_trips() {
        let mut rng = SeededRng::new(4);
        let cols: Vec<_> = (0..3).map(|_| random_posterior(&mut rng, 4)).collect();
        let (m, w) = stack_columns(&cols);
        assert_eq!(unstack_columns(&m, &w), cols);
    }

    #[test]
    fn path_diag_matches_column_predictive() {
        let mut rng = SeededRng::new(9);
        let kernel = ArdKernel::new(0.9, vec![0.5, 2.0]).unwrap();
        let z = InducingSet::new(rng.normal_matrix(3, 2)).unwrap();
        let cols: Vec<_> = (0..2).map(|_| random_posterior(&mut rng, 3)).collect();
        let path = SvgpPath {
            kernel,
            inducing: z,
            columns: cols,
        };
        let x = rng.normal_matrix(6, 2);
        let (mu, var) = path.predict_diag(&x).unwrap();
        for c in 0..2 {
            let p = path.predict_column(c, &x, true).unwrap();
            let cov = p.covariance.unwrap();
            for j in 0..6 {
                assert!((mu[(j, c)] - p.mean[j]).abs() < 1e-12);
                assert!((var[(j, c)] - p.variance[j]).abs() < 1e-12);
                assert!((cov[(j, j)] - p.variance[j]).abs() < 1e-10);
            }
            assert!((&cov - cov.transpose()).amax() < 1e-10);
        }
    }

    /// `K_MM + jitter·I` and its factor computed with nalgebra's own Cholesky.
    fn jittered(kernel: &ArdKernel, z: &Mat) -> (Mat, Mat) {
        let mut k = kernel.gram_sym(z).unwrap();
        for i in 0..k.nrows() {
            k[(i, i)] += INDUCING_JITTER;
        }
        let l = k.clone().cholesky().unwrap().l();
        (k, l)
    }

    /// `KL(N(m, S) ‖ N(0, K))` from the general closed form.
    fn gaussian_kl(m: &Mat, s: &Mat, k: &Mat) -> f64 {
        let kinv = k.clone().try_inverse().unwrap();
        let n = k.nrows() as f64;
        let logdet = |a: &Mat| a.clone().cholesky().unwrap().l().diagonal().map(f64::ln).sum() * 2.0;
        0.5 * ((&kinv * s).trace() + (m.transpose() * &kinv * m)[(0, 0)] - n + logdet(k) - logdet(s))
    }

    #[test]
    fn whitened_kl_matches_general_gaussian_kl() {
        let mut rng = SeededRng::new(23);
        let kernel = ArdKernel::new(1.3, vec![0.7, 1.9]).unwrap();
        for m in [1, 3, 6] {
            let z = rng.normal_matrix(m, 2);
            let (k, l) = jittered(&kernel, &z);
            let post = random_posterior(&mut rng, m);
            let mhat = Mat::from_column_slice(m, 1, &post.mean);
            let mean = &l * &mhat;
            let cov = &l * &post.chol * post.chol.transpose() * l.transpose();
            let want = gaussian_kl(&mean, &cov, &k);
            assert!((post.kl() - want).abs() < 1e-8 * want.max(1.0), "{} vs {want}", post.kl());
        }
        // diagonal latent posteriors against a unit prior
        let mu = rng.normal_matrix(1, 3);
        let sd = rng.normal_matrix(1, 3).map(|v| (0.4 * v).exp());
        let want = gaussian_kl(
            &mu.transpose(),
            &Mat::from_diagonal(&sd.map(|v| v * v).transpose().column(0).into_owned()),
            &Mat::identity(3, 3),
        );
        assert!((crate::latent::kl_latent(&mu, &sd) - want).abs() < 1e-8);
    }

    #[test]
    fn whitened_predictive_matches_unwhitened_form() {
        let mut rng = SeededRng::new(24);
        let kernel = ArdKernel::new(0.8, vec![1.4, 0.6, 2.0]).unwrap();
        let m = 5;
        let z = rng.normal_matrix(m, 3);
        let x = rng.normal_matrix(7, 3);
        let post = random_posterior(&mut rng, m);
        let (k, l) = jittered(&kernel, &z);
        let mean = &l * Mat::from_column_slice(m, 1, &post.mean);
        let s = &l * &post.chol * post.chol.transpose() * l.transpose();
        let kinv = k.clone().try_inverse().unwrap();
        let kxz = kernel.gram(&x, &z).unwrap();
        let proj = &kxz * &kinv;
        let mu = &proj * &mean;
        let cov = kernel.gram_sym(&x).unwrap() + &proj * (&s - &k) * proj.transpose();
        let p = predictive(&post, &InducingSet::new(z).unwrap(), &kernel, &x, true).unwrap();
        let pc = p.covariance.unwrap();
        for i in 0..7 {
            assert!((p.mean[i] - mu[(i, 0)]).abs() < 1e-8);
            assert!((p.variance[i] - cov[(i, i)]).abs() < 1e-8);
            for j in 0..7 {
                assert!((pc[(i, j)] - cov[(i, j)]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn full_inducing_set_recovers_exact_gp() {
        let mut rng = SeededRng::new(25);
        let kernel = ArdKernel::new(1.1, vec![0.9]).unwrap();
        let (n, noise) = (12, 0.05);
        let x = rng.normal_matrix(n, 1);
        let y = x.map(|v| v.sin()) + rng.normal_matrix(n, 1) * 0.2;
        let xs = rng.normal_matrix(5, 1);
        // exact posterior
        let kxx = kernel.gram_sym(&x).unwrap();
        let ky = (&kxx + Mat::identity(n, n) * noise).try_inverse().unwrap();
        let ksx = kernel.gram(&xs, &x).unwrap();
        let mu = &ksx * &ky * &y;
        let cov = kernel.gram_sym(&xs).unwrap() - &ksx * &ky * ksx.transpose();
        // optimal whitened q(u) at Z = X: Ŝ = (I + LᵀL/σ²)⁻¹, m̂ = Ŝ Lᵀ y / σ²
        let (_, l) = jittered(&kernel, &x);
        let shat = (Mat::identity(n, n) + l.transpose() * &l / noise).try_inverse().unwrap();
        let mhat = &shat * l.transpose() * &y / noise;
        let shat = (&shat + shat.transpose()) * 0.5;
        let what = shat.cholesky().unwrap().l();
        let post = WhitenedColumnPosterior::new(mhat.iter().copied().collect(), what).unwrap();
        let p = predictive(&post, &InducingSet::new(x).unwrap(), &kernel, &xs, false).unwrap();
        for i in 0..5 {
            assert!((p.mean[i] - mu[(i, 0)]).abs() < 1e-6, "{} vs {}", p.mean[i], mu[(i, 0)]);
            assert!((p.variance[i] - cov[(i, i)]).abs() < 1e-6);
        }
    }

    #[test]
    fn tape_op_gradients() {
        use crate::optim::testing::fd_inputs;
        let mut rng = SeededRng::new(26);
        let (m, b, c) = (3, 4, 2);
        let a0 = rng.normal_matrix(m, 2);
        let b0 = rng.normal_matrix(b, 2);
        let hyper = [Mat::from_element(1, 1, 0.2), Mat::from_row_slice(1, 2, &[-0.3, 0.4])];
        let weights = rng.normal_matrix(m, b);
        fd_inputs(
            |t, v| {
                let k = t.ard_gram(v[0], v[1], t.exp(v[2]), t.exp(v[3]));
                t.sum(t.mul(k, t.constant(weights.clone())))
            },
            &[a0.clone(), b0, hyper[0].clone(), hyper[1].clone()],
            1e-6,
        );
        let sym_w = rng.normal_matrix(m, m);
        fd_inputs(
            |t, v| {
                let k = t.ard_gram(v[0], v[0], t.exp(v[1]), t.exp(v[2]));
                t.sum(t.mul(k, t.constant(sym_w.clone())))
            },
            &[a0, hyper[0].clone(), hyper[1].clone()],
            1e-6,
        );
        let out_w = rng.normal_matrix(b, 2 * c);
        fd_inputs(
            |t, v| {
                let p = t.whitened_predictive(v[0], t.exp(v[1]), v[2], t.lower_exp_diag(v[3]));
                t.sum(t.mul(p, t.constant(out_w.clone())))
            },
            &[
                rng.normal_matrix(m, b) * 0.3,
                Mat::from_element(1, 1, 0.5),
                rng.normal_matrix(m, c),
                rng.normal_matrix(c * m, m) * 0.3,
            ],
            1e-6,
        );
        fd_inputs(
            |t, v| t.kl_whitened(v[0], t.lower_exp_diag(v[1])),
            &[rng.normal_matrix(m, c), rng.normal_matrix(c * m, m) * 0.3],
            1e-6,
        );
    }
}
