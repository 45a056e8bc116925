//! Gradients, the Adam optimizer and a finite-difference checker.

mod params;
pub mod tape;

use serde::{Deserialize, Serialize};

pub use params::{Block, BoundParams, ParameterVector, Transform};
pub use tape::{Gradients, Mat, Tape, Var};

use crate::error::{LdgdError, Result};

/// Value and gradient (with respect to unconstrained storage, in flat
/// layout order) of a scalar objective built on a tape.
pub fn gradient<F>(params: &ParameterVector, objective: F) -> Result<(f64, Vec<f64>)>
where
    F: FnOnce(&Tape, &BoundParams) -> Result<Var>,
{
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let root = objective(&tape, &bound)?;
    let value = tape.scalar(root);
    if !value.is_finite() {
        return Err(LdgdError::Numerical(format!(
            "objective evaluated to {value}"
        )));
    }
    let grads = tape.backward(root);
    let flat = params.flatten_grads(&bound, &grads);
    if let Some(i) = flat.iter().position(|g| !g.is_finite()) {
        return Err(LdgdError::NonFiniteParameter {
            block: params.block_of(i).unwrap_or("?").to_string(),
        });
    }
    Ok((value, flat))
}

/// Adam moments and hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(len: usize, lr: f64) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One bias-corrected Adam step minimizing the objective whose gradient
    /// is `grad`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        let bc = self.advance(params.len(), grad)?;
        self.update(0, params, grad, bc);
        Ok(())
    }

    fn advance(&mut self, len: usize, grad: &[f64]) -> Result<(f64, f64)> {
        if len != self.m.len() || grad.len() != self.m.len() {
            return Err(LdgdError::InvalidArgument(format!(
                "adam state has length {}, params {}, grad {}",
                self.m.len(),
                len,
                grad.len()
            )));
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(LdgdError::Numerical(format!(
                "non-finite gradient entry {i}"
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        Ok((1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t)))
    }

    fn update(&mut self, offset: usize, params: &mut [f64], grad: &[f64], (bc1, bc2): (f64, f64)) {
        let n = params.len();
        let (m, v) = (&mut self.m[offset..offset + n], &mut self.v[offset..offset + n]);
        for (((p, &g), m), v) in params.iter_mut().zip(&grad[offset..offset + n]).zip(m).zip(v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= self.lr * (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
        }
    }
}

/// Applies one Adam step to a parameter vector.
pub fn adam_step(state: &mut AdamState, params: &mut ParameterVector, grad: &[f64]) -> Result<()> {
    let bc = state.advance(params.len(), grad)?;
    let mut offset = 0;
    for values in params.values_mut() {
        state.update(offset, values, grad, bc);
        offset += values.len();
    }
    Ok(())
}

/// Worst-case disagreement between analytic and central-difference
/// gradients for one parameter block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockCheck {
    pub block: String,
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
    pub checked: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub blocks: Vec<BlockCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.blocks.iter().all(|b| b.max_rel_error < self.tolerance)
    }

    pub fn failing_blocks(&self) -> Vec<&str> {
        self.blocks
            .iter()
            .filter(|b| b.max_rel_error >= self.tolerance)
            .map(|b| b.block.as_str())
            .collect()
    }
}

/// Finite-difference step on unconstrained coordinates.
pub const FD_STEP: f64 = 1e-5;
/// Relative error bound for the gradient contract.
pub const FD_TOLERANCE: f64 = 1e-4;
/// Entries whose analytic and numeric gradients are both below this are skipped.
pub const FD_FLOOR: f64 = 1e-6;

/// Compares `analytic` against central differences of `value` at `params`.
///
/// An entry is compared when either gradient exceeds [`FD_FLOOR`] in
/// magnitude; its error is `|a - n| / max(|a|, |n|)`.
pub fn check_gradient<F>(
    params: &ParameterVector,
    analytic: &[f64],
    mut value: F,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParameterVector) -> Result<f64>,
{
    let mut probe = params.clone();
    let base = params.flat();
    let mut blocks = Vec::new();
    for (name, range) in params.layout() {
        let mut check = BlockCheck {
            block: name.clone(),
            max_rel_error: 0.0,
            worst_index: None,
            checked: 0,
        };
        let transform = params.block(&name).map(|b| (b.transform, b.cols));
        for i in range.clone() {
            // strict upper triangle of a LowerLogDiag block is inert storage
            if let Some((Transform::LowerLogDiag, m)) = transform {
                let local = i - range.start;
                if local % m > (local / m) % m {
                    continue;
                }
            }
            let mut x = base.clone();
            x[i] = base[i] + step;
            probe.set_flat(&x)?;
            let up = value(&probe)?;
            x[i] = base[i] - step;
            probe.set_flat(&x)?;
            let down = value(&probe)?;
            if !up.is_finite() || !down.is_finite() {
                return Err(LdgdError::NonFiniteParameter { block: name });
            }
            let numeric = (up - down) / (2.0 * step);
            let a = analytic[i];
            let scale = a.abs().max(numeric.abs());
            if scale <= FD_FLOOR {
                continue;
            }
            check.checked += 1;
            let err = (a - numeric).abs() / scale;
            if err > check.max_rel_error {
                check.max_rel_error = err;
                check.worst_index = Some(i - range.start);
            }
        }
        blocks.push(check);
    }
    Ok(GradCheckReport { blocks, tolerance })
}
