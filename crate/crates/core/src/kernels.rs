//! ARD squared-exponential kernel
//! `k(x, x') = σ_f² exp(-½ Σ_q α_q (x_q - x'_q)²)`.

use serde::{Deserialize, Serialize};

use crate::error::{LdgdError, Result};
use crate::optim::{Mat, Tape, Var};

/// Default ratio for [`ArdKernel::relevance`].
pub const DEFAULT_RELEVANCE_RATIO: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArdKernel {
    pub variance: f64,
    pub inv_lengthscales: Vec<f64>,
}

/// Dimensions kept by the relevance rule, strongest first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArdReport {
    pub selected: Vec<usize>,
    /// `(dimension, α)` for every dimension, sorted by α descending.
    pub ranked: Vec<(usize, f64)>,
}

impl ArdKernel {
    pub fn new(variance: f64, inv_lengthscales: Vec<f64>) -> Result<Self> {
        if !(variance > 0.0) || inv_lengthscales.iter().any(|a| !(*a > 0.0)) {
            return Err(LdgdError::InvalidArgument(
                "kernel variance and inverse length-scales must be positive".into(),
            ));
        }
        Ok(ArdKernel {
            variance,
            inv_lengthscales,
        })
    }

    pub fn dim(&self) -> usize {
        self.inv_lengthscales.len()
    }

    fn check_cols(&self, m: &Mat) -> Result<()> {
        if m.ncols() != self.dim() {
            return Err(LdgdError::InvalidArgument(format!(
                "kernel has {} dimensions, input has {} columns",
                self.dim(),
                m.ncols()
            )));
        }
        Ok(())
    }

    /// Cross-covariance `K(a, b)`.
    pub fn gram(&self, a: &Mat, b: &Mat) -> Result<Mat> {
        self.check_cols(a)?;
        self.check_cols(b)?;
        Ok(ard_gram_value(a, b, self.variance, &self.inv_lengthscales, false))
    }

    /// `K(a, a)`, exactly symmetric with diagonal `σ_f²`.
    pub fn gram_sym(&self, a: &Mat) -> Result<Mat> {
        self.check_cols(a)?;
        Ok(ard_gram_value(a, a, self.variance, &self.inv_lengthscales, true))
    }

    /// Dimensions with `α_q ≥ ratio · max α`, sorted by α descending.
    pub fn relevance(&self, threshold_ratio: f64) -> ArdReport {
        let mut ranked: Vec<(usize, f64)> =
            self.inv_lengthscales.iter().copied().enumerate().collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let max = ranked.first().map(|r| r.1).unwrap_or(0.0);
        let selected = ranked
            .iter()
            .filter(|(_, a)| *a >= threshold_ratio * max)
            .map(|(q, _)| *q)
            .collect();
        ArdReport { selected, ranked }
    }
}

/// Relevance report for `kernel` (see [`ArdKernel::relevance`]).
pub fn ard_report(kernel: &ArdKernel, threshold_ratio: f64) -> Result<ArdReport> {
    if !(threshold_ratio > 0.0 && threshold_ratio <= 1.0) {
        return Err(LdgdError::InvalidArgument(format!(
            "threshold ratio must lie in (0, 1], got {threshold_ratio}"
        )));
    }
    Ok(kernel.relevance(threshold_ratio))
}

/// Scaled squared distances via `‖u‖² + ‖v‖² - 2u·v`, clamped at zero.
fn scaled_sq_dist(a: &Mat, b: &Mat, alpha: &[f64], same: bool) -> Mat {
    let q = alpha.len();
    let sqrt_a: Vec<f64> = alpha.iter().map(|x| x.sqrt()).collect();
    let mut sa = a.clone();
    let mut sb = b.clone();
    for j in 0..q {
        sa.column_mut(j).scale_mut(sqrt_a[j]);
        sb.column_mut(j).scale_mut(sqrt_a[j]);
    }
    let na: Vec<f64> = sa.row_iter().map(|r| r.norm_squared()).collect();
    let nb: Vec<f64> = sb.row_iter().map(|r| r.norm_squared()).collect();
    let mut d = sa * sb.transpose();
    for i in 0..d.nrows() {
        for j in 0..d.ncols() {
            d[(i, j)] = (na[i] + nb[j] - 2.0 * d[(i, j)]).max(0.0);
        }
    }
    if same {
        for i in 0..d.nrows() {
            d[(i, i)] = 0.0;
            for j in 0..i {
                let s = 0.5 * (d[(i, j)] + d[(j, i)]);
                d[(i, j)] = s;
                d[(j, i)] = s;
            }
        }
    }
    d
}

pub(crate) fn ard_gram_value(a: &Mat, b: &Mat, variance: f64, alpha: &[f64], same: bool) -> Mat {
    scaled_sq_dist(a, b, alpha, same).map(|d| variance * (-0.5 * d).exp())
}

impl Tape {
    /// ARD Gram matrix between the rows of `a` (P×Q) and `b` (R×Q), with
    /// kernel variance `variance` (1×1) and inverse length-scales `alpha` (1×Q).
    /// Pass the same node as `a` and `b` for a symmetric Gram matrix.
    pub fn ard_gram(&self, a: Var, b: Var, variance: Var, alpha: Var) -> Var {
        let same = a == b;
        let (va, vb) = (self.value(a), self.value(b));
        let var = self.scalar(variance);
        let al: Vec<f64> = self.value(alpha).iter().copied().collect();
        let k = ard_gram_value(&va, &vb, var, &al, same);
        let kc = k.clone();
        self.push(k, &[a, b, variance, alpha], move |g, need| {
            let h = g.component_mul(&kc);
            let rs = h.column_sum(); // P×1
            let cs = h.row_sum(); // 1×R
            let hb = &h * &*vb; // P×Q
            let hta = h.tr_mul(&va); // R×Q
            let q = al.len();
            let ga = need[0].then(|| {
                let mut ga = Mat::zeros(va.nrows(), q);
                for i in 0..va.nrows() {
                    for j in 0..q {
                        ga[(i, j)] = -al[j] * (rs[i] * va[(i, j)] - hb[(i, j)]);
                    }
                }
                ga
            });
            let gb = need[1].then(|| {
                let mut gb = Mat::zeros(vb.nrows(), q);
                for i in 0..vb.nrows() {
                    for j in 0..q {
                        gb[(i, j)] = al[j] * (hta[(i, j)] - cs[i] * vb[(i, j)]);
                    }
                }
                gb
            });
            let gv = need[2].then(|| Mat::from_element(1, 1, h.sum() / var));
            let galpha = need[3].then(|| {
                let mut out = Mat::zeros(1, q);
                for j in 0..q {
                    let mut s = 0.0;
                    for i in 0..va.nrows() {
                        s += va[(i, j)] * va[(i, j)] * rs[i];
                    }
                    for i in 0..vb.nrows() {
                        s += vb[(i, j)] * vb[(i, j)] * cs[i];
                    }
                    let mut cross = 0.0;
                    for i in 0..va.nrows() {
                        cross += va[(i, j)] * hb[(i, j)];
                    }
                    out[(0, j)] = -0.5 * (s - 2.0 * cross);
                }
                out
            });
            vec![ga, gb, gv, galpha]
        })
    }
}
