//! Reverse-mode differentiation over whole matrices.
//!
//! Every node holds a dense `f64` matrix. Operations record their inputs and
//! a closure that maps the output adjoint to input adjoints; the closure is
//! only asked for the inputs that actually need a gradient. Scalars are 1×1
//! matrices. Domain operations (kernel Gram matrices, predictive moments,
//! expected log-likelihoods, KL terms) are added as `impl Tape` blocks next to
//! their plain-value counterparts in the other modules.

use std::cell::RefCell;
use std::rc::Rc;

use nalgebra::DMatrix;

use crate::error::Result;
use crate::numerics::{
    cholesky_with_jitter, solve_lower_triangular, solve_upper_from_lower_transpose,
};

pub type Mat = DMatrix<f64>;

type BackwardFn = Box<dyn Fn(&Mat, &[bool]) -> Vec<Option<Mat>>>;

struct Node {
    value: Rc<Mat>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Adjoints of every node reachable from the differentiated root.
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Adjoint of `v`, or zeros shaped like it when `v` did not influence the root.
    pub fn wrt_or_zeros(&self, v: Var, rows: usize, cols: usize) -> Mat {
        self.wrt(v).cloned().unwrap_or_else(|| Mat::zeros(rows, cols))
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn leaf(&self, value: Mat, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            backward: None,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&self, value: Mat) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Mat) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar_constant(&self, value: f64) -> Var {
        self.constant(Mat::from_element(1, 1, value))
    }

    pub fn value(&self, v: Var) -> Rc<Mat> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value[(0, 0)]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let nodes = self.nodes.borrow();
        let m = &nodes[v.0].value;
        (m.nrows(), m.ncols())
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Records an operation. `backward(adjoint, needs)` returns one entry per
    /// parent; entries for parents with `needs[i] == false` may be `None`.
    pub(crate) fn push(
        &self,
        value: Mat,
        parents: &[Var],
        backward: impl Fn(&Mat, &[bool]) -> Vec<Option<Mat>> + 'static,
    ) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|p| nodes[p.0].requires_grad);
        nodes.push(Node {
            value: Rc::new(value),
            parents: parents.iter().map(|p| p.0).collect(),
            backward: if requires_grad {
                Some(Box::new(backward))
            } else {
                None
            },
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    /// Adjoints of the 1×1 node `root` with respect to every recorded node.
    pub fn backward(&self, root: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[root.0].value.shape(),
            (1, 1),
            "backward needs a scalar root"
        );
        let mut grads: Vec<Option<Mat>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Mat::from_element(1, 1, 1.0));
        for i in (0..=root.0).rev() {
            let node = &nodes[i];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(adjoint) = grads[i].take() else {
                continue;
            };
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| nodes[p].requires_grad)
                .collect();
            let parent_grads = backward(&adjoint, &needs);
            grads[i] = Some(adjoint);
            for ((&p, g), need) in node.parents.iter().zip(parent_grads).zip(needs) {
                let (Some(g), true) = (g, need) else {
                    continue;
                };
                match &mut grads[p] {
                    Some(acc) => *acc += g,
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Gradients { grads }
    }

    // ----- elementary operations -----

    pub fn add(&self, a: Var, b: Var) -> Var {
        let value = &*self.value(a) + &*self.value(b);
        self.push(value, &[a, b], |g, _| vec![Some(g.clone()), Some(g.clone())])
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let value = &*self.value(a) - &*self.value(b);
        self.push(value, &[a, b], |g, _| vec![Some(g.clone()), Some(-g)])
    }

    /// Elementwise product.
    pub fn mul(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let value = va.component_mul(&vb);
        self.push(value, &[a, b], move |g, need| {
            vec![
                need[0].then(|| g.component_mul(&vb)),
                need[1].then(|| g.component_mul(&va)),
            ]
        })
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        let value = &*self.value(a) * c;
        self.push(value, &[a], move |g, _| vec![Some(g * c)])
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let value = &*va * &*vb;
        self.push(value, &[a, b], move |g, need| {
            vec![
                need[0].then(|| g * vb.transpose()),
                need[1].then(|| va.tr_mul(g)),
            ]
        })
    }

    pub fn transpose(&self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(value, &[a], |g, _| vec![Some(g.transpose())])
    }

    pub fn exp(&self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        let out = value.clone();
        self.push(value, &[a], move |g, _| vec![Some(g.component_mul(&out))])
    }

    pub fn ln(&self, a: Var) -> Var {
        let va = self.value(a);
        let value = va.map(f64::ln);
        self.push(value, &[a], move |g, _| vec![Some(g.component_div(&va))])
    }

    pub fn softplus(&self, a: Var) -> Var {
        let va = self.value(a);
        let value = va.map(softplus);
        self.push(value, &[a], move |g, _| {
            vec![Some(g.zip_map(&va, |gi, x| gi * sigmoid(x)))]
        })
    }

    pub fn tanh(&self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        let out = value.clone();
        self.push(value, &[a], move |g, _| {
            vec![Some(g.zip_map(&out, |gi, t| gi * (1.0 - t * t)))]
        })
    }

    /// Sum of all entries as a 1×1 node.
    pub fn sum(&self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let value = Mat::from_element(1, 1, self.value(a).sum());
        self.push(value, &[a], move |g, _| {
            vec![Some(Mat::from_element(r, c, g[(0, 0)]))]
        })
    }

    /// `a + 1·row`, broadcasting a 1×m row over every row of `a`.
    pub fn add_row(&self, a: Var, row: Var) -> Var {
        let va = self.value(a);
        let vr = self.value(row);
        assert_eq!(vr.nrows(), 1);
        assert_eq!(vr.ncols(), va.ncols());
        let mut value = (*va).clone();
        for mut r in value.row_iter_mut() {
            r += &*vr;
        }
        self.push(value, &[a, row], |g, need| {
            vec![
                need[0].then(|| g.clone()),
                need[1].then(|| Mat::from_iterator(1, g.ncols(), g.row_sum().iter().copied())),
            ]
        })
    }

    /// Rows of `a` picked by `idx` (repeats allowed).
    pub fn gather_rows(&self, a: Var, idx: &[usize]) -> Var {
        let va = self.value(a);
        let (rows, cols) = va.shape();
        let mut value = Mat::zeros(idx.len(), cols);
        for (k, &i) in idx.iter().enumerate() {
            value.set_row(k, &va.row(i));
        }
        let idx = idx.to_vec();
        self.push(value, &[a], move |g, _| {
            let mut out = Mat::zeros(rows, cols);
            for (k, &i) in idx.iter().enumerate() {
                let mut r = out.row_mut(i);
                r += g.row(k);
            }
            vec![Some(out)]
        })
    }

    pub fn slice_cols(&self, a: Var, start: usize, len: usize) -> Var {
        let va = self.value(a);
        let (rows, cols) = va.shape();
        let value = va.columns(start, len).into_owned();
        self.push(value, &[a], move |g, _| {
            let mut out = Mat::zeros(rows, cols);
            out.columns_mut(start, len).copy_from(g);
            vec![Some(out)]
        })
    }

    /// Stacked square blocks `(C·M)×M` mapped to lower-triangular blocks with
    /// an exponentiated diagonal; entries above the diagonal are ignored.
    pub fn lower_exp_diag(&self, raw: Var) -> Var {
        let value = lower_exp_diag(&self.value(raw));
        let out = value.clone();
        self.push(value, &[raw], move |g, _| {
            let m = out.ncols();
            let mut d = g.clone();
            let n = out.nrows();
            for j in 0..m {
                let dc = &mut d.as_mut_slice()[j * n..(j + 1) * n];
                let oc = &out.as_slice()[j * n..(j + 1) * n];
                for (dd, oo) in dc.chunks_mut(m).zip(oc.chunks(m)) {
                    dd[..j].fill(0.0);
                    dd[j] *= oo[j];
                }
            }
            vec![Some(d)]
        })
    }
}

impl Tape {
    /// Lower Cholesky factor of a symmetric matrix node, with the jitter ladder
    /// of [`cholesky_with_jitter`]. The jitter is treated as a constant.
    pub fn cholesky(&self, k: Var, base_jitter: f64) -> Result<Var> {
        let factor = cholesky_with_jitter(&self.value(k), base_jitter)?;
        let l = factor.lower;
        let out = l.clone();
        Ok(self.push(l, &[k], move |g, _| vec![Some(cholesky_adjoint(&out, g))]))
    }

    /// `L⁻¹ B` for lower-triangular `L`.
    pub fn solve_lower(&self, l: Var, b: Var) -> Var {
        let vl = self.value(l);
        let value = solve_lower_triangular(&vl, &self.value(b));
        let x = value.clone();
        self.push(value, &[l, b], move |g, need| {
            let gb = solve_upper_from_lower_transpose(&vl, g);
            let gl = need[0].then(|| {
                let mut gl = -(&gb * x.transpose());
                for i in 0..gl.nrows() {
                    for j in (i + 1)..gl.ncols() {
                        gl[(i, j)] = 0.0;
                    }
                }
                gl
            });
            vec![gl, Some(gb)]
        })
    }

    /// `log det(L Lᵀ) = 2 Σ log Lᵢᵢ` as a 1×1 node.
    pub fn chol_log_det(&self, l: Var) -> Var {
        let vl = self.value(l);
        let value = 2.0 * vl.diagonal().iter().map(|d| d.ln()).sum::<f64>();
        self.push(Mat::from_element(1, 1, value), &[l], move |g, _| {
            let n = vl.nrows();
            let mut d = Mat::zeros(n, n);
            for i in 0..n {
                d[(i, i)] = 2.0 * g[(0, 0)] / vl[(i, i)];
            }
            vec![Some(d)]
        })
    }
}

/// Adjoint of `K` given the adjoint of its lower Cholesky factor:
/// `Kbar = sym(L⁻ᵀ Φ(Lᵀ Lbar) L⁻¹)` with `Φ` taking the lower triangle and
/// halving the diagonal.
pub fn cholesky_adjoint(l: &Mat, lbar: &Mat) -> Mat {
    let n = l.nrows();
    let mut p = l.tr_mul(lbar);
    for i in 0..n {
        for j in (i + 1)..n {
            p[(i, j)] = 0.0;
        }
        p[(i, i)] *= 0.5;
    }
    // L⁻ᵀ P L⁻¹ = L⁻ᵀ (L⁻ᵀ Pᵀ)ᵀ
    let a = solve_upper_from_lower_transpose(l, &p.transpose());
    let s = solve_upper_from_lower_transpose(l, &a.transpose());
    (&s + s.transpose()) * 0.5
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for positive `y`.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn lower_exp_diag(raw: &Mat) -> Mat {
    let m = raw.ncols();
    let mut out = raw.clone();
    let n = out.nrows();
    for j in 0..m {
        for blk in out.as_mut_slice()[j * n..(j + 1) * n].chunks_mut(m) {
            blk[..j].fill(0.0);
            blk[j] = blk[j].exp();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_check(f: impl Fn(&Tape, Var) -> Var, x0: Mat) {
        let tape = Tape::new();
        let x = tape.param(x0.clone());
        let y = f(&tape, x);
        let g = tape.backward(y).wrt(x).unwrap().clone();
        let h = 1e-6;
        for i in 0..x0.len() {
            let mut xp = x0.clone();
            xp[i] += h;
            let mut xm = x0.clone();
            xm[i] -= h;
            let t = Tape::new();
            let vp = {
                let v = t.param(xp);
                t.scalar(f(&t, v))
            };
            let vm = {
                let v = t.param(xm);
                t.scalar(f(&t, v))
            };
            let fd = (vp - vm) / (2.0 * h);
            assert!(
                (fd - g[i]).abs() <= 1e-6 * (1.0 + fd.abs()),
                "entry {i}: fd {fd} vs {}",
                g[i]
            );
        }
    }

    #[test]
    fn quadratic_gradient() {
        let tape = Tape::new();
        let x = tape.param(Mat::from_row_slice(1, 2, &[1.0, 2.0]));
        let sq = tape.mul(x, x);
        let y = tape.sum(sq);
        assert_eq!(tape.scalar(y), 5.0);
        let g = tape.backward(y);
        assert_eq!(g.wrt(x).unwrap().as_slice(), &[2.0, 4.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let tape = Tape::new();
        let c = tape.constant(Mat::from_element(2, 2, 3.0));
        let x = tape.param(Mat::from_element(2, 2, 1.0));
        let y = tape.sum(tape.mul(c, x));
        let g = tape.backward(y);
        assert!(g.wrt(c).is_none());
        assert_eq!(g.wrt(x).unwrap(), &Mat::from_element(2, 2, 3.0));
    }

    #[test]
    fn composite_ops_match_differences() {
        let x0 = Mat::from_row_slice(3, 2, &[0.3, -1.2, 0.7, 2.0, -0.4, 0.1]);
        fd_check(
            |t, x| {
                let w = t.constant(Mat::from_row_slice(2, 3, &[1.0, -2.0, 0.5, 0.3, 0.2, -1.0]));
                let h = t.tanh(t.matmul(x, w));
                let row = t.gather_rows(h, &[0, 2, 2, 1]);
                let s = t.softplus(t.slice_cols(row, 1, 2));
                let e = t.exp(t.scale(t.transpose(s), 0.5));
                let r = t.add_row(x, t.constant(Mat::from_row_slice(1, 2, &[2.0, 3.0])));
                let l = t.ln(t.mul(r, r));
                t.add(t.sum(e), t.sum(l))
            },
            x0,
        );
    }

    #[test]
    fn cholesky_and_solve_gradients() {
        let x0 = Mat::from_row_slice(3, 3, &[1.0, 0.2, -0.3, 0.5, 1.5, 0.1, -0.2, 0.4, 0.9]);
        fd_check(
            |t, x| {
                // K = X Xᵀ + I is SPD for any X
                let k = t.add(t.matmul(x, t.transpose(x)), t.constant(Mat::identity(3, 3)));
                let l = t.cholesky(k, 0.0).unwrap();
                let b = t.constant(Mat::from_row_slice(3, 2, &[1.0, 2.0, -1.0, 0.5, 0.3, 0.7]));
                let a = t.solve_lower(l, b);
                let ld = t.chol_log_det(l);
                t.add(t.sum(t.mul(a, a)), ld)
            },
            x0,
        );
    }

    #[test]
    fn lower_exp_diag_gradient() {
        let x0 = Mat::from_row_slice(4, 2, &[0.1, 9.0, 0.5, -0.3, 0.2, 7.0, -1.0, 0.4]);
        fd_check(
            |t, x| {
                let l = t.lower_exp_diag(x);
                let w = t.constant(Mat::from_row_slice(4, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]));
                t.sum(t.mul(t.mul(l, l), w))
            },
            x0,
        );
    }
}
