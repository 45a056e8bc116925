//! Expected log-likelihoods under a Gaussian predictive `N(μ_f, Σ_f)`.

use serde::{Deserialize, Serialize};

use crate::error::{LdgdError, Result};
use crate::numerics::{log_normal_cdf, log_normal_cdf_grad, normal_cdf, QuadratureRule, SQRT_PI};
use crate::optim::{Mat, Tape, Var};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Per-dimension Gaussian noise variances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianNoise {
    pub variances: Vec<f64>,
}

impl GaussianNoise {
    pub fn new(variances: Vec<f64>) -> Result<Self> {
        if variances.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(LdgdError::InvalidArgument(
                "noise variances must be positive".into(),
            ));
        }
        Ok(GaussianNoise { variances })
    }

    /// `0.1 · var(column)` for each column of `y`, floored at a tenth of
    /// the average column variance (and at 1e-6) so constant columns do not
    /// start with a vanishing noise.
    pub fn from_data(y: &Mat) -> Self {
        let n = y.nrows().max(1) as f64;
        let raw: Vec<f64> = y
            .column_iter()
            .map(|c| {
                let mean = c.sum() / n;
                c.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
            })
            .collect();
        let floor = (0.1 * raw.iter().sum::<f64>() / raw.len().max(1) as f64).max(1e-6);
        let variances = raw.iter().map(|v| (0.1 * v).max(floor)).collect();
        GaussianNoise { variances }
    }
}

/// `E_{f~N(μ,Σ)}[log N(y | f, σ²)]`.
pub fn ell_regression(y: f64, mean: f64, var: f64, noise_var: f64) -> f64 {
    let r = y - mean;
    -0.5 * (LN_2PI + noise_var.ln() + (r * r + var) / noise_var)
}

/// Gauss-Hermite estimate of `E_{f~N(μ,Σ)}[log Φ((2y-1) f)]` for `y ∈ {0,1}`.
pub fn ell_classification(y: f64, mean: f64, var: f64, rule: &QuadratureRule) -> f64 {
    let sign = 2.0 * y - 1.0;
    let scale = (2.0 * var.max(0.0)).sqrt();
    rule.integrate(|z| log_normal_cdf(sign * (z * scale + mean))) / SQRT_PI
}

/// `∫ Φ(f) N(f | μ, Σ) df = Φ(μ / √(1 + Σ))`.
pub fn class_probability(mean: f64, var: f64) -> f64 {
    normal_cdf(mean / (1.0 + var.max(0.0)).sqrt())
}

impl Tape {
    /// Gaussian expected log-likelihood summed over all entries. `y`, `mean`
    /// and `var` are B×D; `noise` is 1×D.
    pub fn ell_gaussian(&self, y: &Mat, mean: Var, var: Var, noise: Var) -> Var {
        let vm = self.value(mean);
        let vv = self.value(var);
        let vn = self.value(noise);
        let (b, d) = vm.shape();
        let mut total = 0.0;
        let mut resid = Mat::zeros(b, d);
        for j in 0..d {
            let s2 = vn[(0, j)];
            for i in 0..b {
                let r = y[(i, j)] - vm[(i, j)];
                resid[(i, j)] = r;
                total += ell_regression(y[(i, j)], vm[(i, j)], vv[(i, j)], s2);
            }
        }
        self.push(Mat::from_element(1, 1, total), &[mean, var, noise], move |g, need| {
            let s = g[(0, 0)];
            let gm = need[0].then(|| {
                let mut out = resid.clone();
                for j in 0..d {
                    out.column_mut(j).scale_mut(s / vn[(0, j)]);
                }
                out
            });
            let gv = need[1].then(|| {
                Mat::from_fn(b, d, |_, j| -0.5 * s / vn[(0, j)])
            });
            let gn = need[2].then(|| {
                Mat::from_fn(1, d, |_, j| {
                    let s2 = vn[(0, j)];
                    let mut acc = 0.0;
                    for i in 0..b {
                        let r = resid[(i, j)];
                        acc += -0.5 / s2 + 0.5 * (r * r + vv[(i, j)]) / (s2 * s2);
                    }
                    s * acc
                })
            });
            vec![gm, gv, gn]
        })
    }

    /// Probit expected log-likelihood summed over all entries. `y` holds 0/1
    /// targets (B×K); `mean`, `var` are B×K.
    pub fn ell_probit(&self, y: &Mat, mean: Var, var: Var, rule: &QuadratureRule) -> Var {
        let vm = self.value(mean);
        let vv = self.value(var);
        let (b, k) = vm.shape();
        let mut total = 0.0;
        let mut dmean = Mat::zeros(b, k);
        let mut dvar = Mat::zeros(b, k);
        for j in 0..k {
            for i in 0..b {
                let sign = 2.0 * y[(i, j)] - 1.0;
                let v = vv[(i, j)].max(0.0);
                let scale = (2.0 * v).sqrt();
                let mu = vm[(i, j)];
                let val = rule.integrate(|z| log_normal_cdf(sign * (z * scale + mu)));
                let dm = rule.integrate(|z| sign * log_normal_cdf_grad(sign * (z * scale + mu)));
                let ds =
                    rule.integrate(|z| sign * z * log_normal_cdf_grad(sign * (z * scale + mu)));
                total += val / SQRT_PI;
                dmean[(i, j)] = dm / SQRT_PI;
                // d scale / d var = 1 / scale; handles Σ → 0 through the limit
                dvar[(i, j)] = if scale > 0.0 {
                    ds / SQRT_PI / scale
                } else {
                    0.0
                };
            }
        }
        self.push(Mat::from_element(1, 1, total), &[mean, var], move |g, need| {
            let s = g[(0, 0)];
            vec![
                need[0].then(|| &dmean * s),
                need[1].then(|| &dvar * s),
            ]
        })
    }
}

impl Tape {
    /// Gaussian expected log-likelihood summed over a batch, computed straight
    /// from whitened path quantities: `Â` (M×B), kernel variance (1×1),
    /// means `m̂` (M×D), stacked factors `Ŵ` ((D·M)×M), targets `y` (B×D) and
    /// noise variances (1×D).
    ///
    /// Per column only `Σ_j Σ_f[j]` enters, and it equals
    /// `B σ_f² - ‖Â‖_F² + tr(Ŵᵀ (ÂÂᵀ) Ŵ)`, so no per-point variances are formed.
    pub fn ell_gaussian_whitened(
        &self,
        a: Var,
        kvar: Var,
        means: Var,
        chols: Var,
        y: &Mat,
        noise: Var,
    ) -> Var {
        let va = self.value(a);
        let vm = self.value(means);
        let vw = self.value(chols);
        let vn = self.value(noise);
        let kv = self.scalar(kvar);
        let (m, b) = va.shape();
        let d = vm.ncols();
        let mu = va.tr_mul(&vm);
        let resid = y - &mu;
        // with fewer rows than inducing points the per-point form is cheaper
        let direct = b < m;
        let c = if direct { Mat::zeros(0, 0) } else { &*va * va.transpose() };
        let a_sq = va.norm_squared();
        let mut r_sum = vec![0.0; d];
        let mut v_sum = vec![0.0; d];
        let mut total = 0.0;
        for k in 0..d {
            let w = vw.view((k * m, 0), (m, m));
            let quad = if direct {
                (w.transpose() * &*va).norm_squared()
            } else {
                w.component_mul(&(&c * w)).sum()
            };
            v_sum[k] = b as f64 * kv - a_sq + quad;
            r_sum[k] = resid.column(k).norm_squared();
            let s2 = vn[(0, k)];
            total += -0.5 * (b as f64 * (LN_2PI + s2.ln()) + (r_sum[k] + v_sum[k]) / s2);
        }
        self.push(
            Mat::from_element(1, 1, total),
            &[a, kvar, means, chols, noise],
            move |g, need| {
                let s = g[(0, 0)];
                let h: Vec<f64> = (0..d).map(|k| -0.5 * s / vn[(0, k)]).collect();
                // adjoint of the predictive means
                let mut gmu = resid.clone();
                for k in 0..d {
                    gmu.column_mut(k).scale_mut(s / vn[(0, k)]);
                }
                let h_sum: f64 = h.iter().sum();
                let mut ga = need[0].then(|| {
                    let mut ga = &*vm * gmu.transpose();
                    ga -= &*va * (2.0 * h_sum);
                    if !direct {
                        let mut p = Mat::zeros(m, m);
                        for k in 0..d {
                            let w = vw.view((k * m, 0), (m, m));
                            p.gemm(h[k], &w, &w.transpose(), 1.0);
                        }
                        ga.gemm(2.0, &p, &*va, 1.0);
                    }
                    ga
                });
                let mut gw = need[3].then(|| Mat::zeros(d * m, m));
                if direct && (ga.is_some() || gw.is_some()) {
                    for k in 0..d {
                        let w = vw.view((k * m, 0), (m, m)).clone_owned();
                        let bk = w.transpose() * &*va;
                        if let Some(ga) = ga.as_mut() {
                            ga.gemm(2.0 * h[k], &w, &bk, 1.0);
                        }
                        if let Some(gw) = gw.as_mut() {
                            gw.view_mut((k * m, 0), (m, m)).gemm(2.0 * h[k], &*va, &bk.transpose(), 0.0);
                        }
                    }
                } else if let Some(gw) = gw.as_mut() {
                    for k in 0..d {
                        let w = vw.view((k * m, 0), (m, m));
                        gw.view_mut((k * m, 0), (m, m)).gemm(2.0 * h[k], &c, &w, 0.0);
                    }
                }
                let gk = need[1].then(|| Mat::from_element(1, 1, b as f64 * h_sum));
                let gm = need[2].then(|| &*va * &gmu);
                let gn = need[4].then(|| {
                    Mat::from_fn(1, d, |_, k| {
                        let s2 = vn[(0, k)];
                        s * (-0.5 * b as f64 / s2 + 0.5 * (r_sum[k] + v_sum[k]) / (s2 * s2))
                    })
                });
                vec![ga, gk, gm, gw, gn]
            },
        )
    }
}
