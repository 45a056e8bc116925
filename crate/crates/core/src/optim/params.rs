use serde::{Deserialize, Serialize};

use super::tape::{lower_exp_diag, softplus, softplus_inv, Mat, Tape, Var};
use crate::error::{LdgdError, Result};

/// Map from unconstrained storage to the value the model sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    Identity,
    /// value = exp(storage)
    Log,
    /// value = softplus(storage)
    Softplus,
    /// Stacked square blocks; lower triangle kept, diagonal = exp(storage),
    /// strict upper triangle ignored (held at zero).
    LowerLogDiag,
}

/// One named parameter block, stored column-major in unconstrained coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub transform: Transform,
    pub values: Vec<f64>,
}

impl Block {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn storage(&self) -> Mat {
        Mat::from_column_slice(self.rows, self.cols, &self.values)
    }

    pub fn constrained(&self) -> Mat {
        let s = self.storage();
        match self.transform {
            Transform::Identity => s,
            Transform::Log => s.map(f64::exp),
            Transform::Softplus => s.map(softplus),
            Transform::LowerLogDiag => lower_exp_diag(&s),
        }
    }
}


/// Ordered collection of named parameter blocks; the flat view concatenates
/// the blocks in insertion order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParameterVector {
    blocks: Vec<Block>,
}

/// Tape nodes for a [`ParameterVector`]: one trainable leaf per block holding
/// the storage, plus the transformed (constrained) view.
pub struct BoundParams {
    names: Vec<String>,
    pub leaves: Vec<Var>,
    pub values: Vec<Var>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Var {
        self.try_get(name)
            .unwrap_or_else(|| panic!("no parameter block named `{name}`"))
    }

    pub fn try_get(&self, name: &str) -> Option<Var> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.values[i])
    }
}

impl ParameterVector {
    pub fn new() -> Self {
        ParameterVector::default()
    }

    /// Adds a block from its unconstrained storage.
    pub fn push_storage(&mut self, name: &str, storage: &Mat, transform: Transform) -> Result<()> {
        if self.blocks.iter().any(|b| b.name == name) {
            return Err(LdgdError::InvalidArgument(format!(
                "duplicate parameter block `{name}`"
            )));
        }
        if transform == Transform::LowerLogDiag
            && (storage.ncols() == 0 || storage.nrows() % storage.ncols() != 0)
        {
            return Err(LdgdError::InvalidArgument(format!(
                "block `{name}` must stack square matrices"
            )));
        }
        let mut storage = storage.clone();
        if transform == Transform::LowerLogDiag {
            let m = storage.ncols();
            for i in 0..storage.nrows() {
                for j in (i % m + 1)..m {
                    storage[(i, j)] = 0.0;
                }
            }
        }
        let values = storage.as_slice().to_vec();
        self.blocks.push(Block {
            name: name.to_string(),
            rows: storage.nrows(),
            cols: storage.ncols(),
            transform,
            values,
        });
        Ok(())
    }

    /// Adds a block from its constrained value.
    pub fn push(&mut self, name: &str, value: &Mat, transform: Transform) -> Result<()> {
        let storage = match transform {
            Transform::Identity => value.clone(),
            Transform::Log => {
                if value.iter().any(|v| !(*v > 0.0)) {
                    return Err(LdgdError::InvalidArgument(format!(
                        "block `{name}` needs positive values"
                    )));
                }
                value.map(f64::ln)
            }
            Transform::Softplus => {
                if value.iter().any(|v| !(*v > 0.0)) {
                    return Err(LdgdError::InvalidArgument(format!(
                        "block `{name}` needs positive values"
                    )));
                }
                value.map(softplus_inv)
            }
            Transform::LowerLogDiag => {
                let m = value.ncols();
                let mut s = value.clone();
                for i in 0..value.nrows() {
                    let d = value[(i, i % m)];
                    if !(d > 0.0) {
                        return Err(LdgdError::InvalidArgument(format!(
                            "block `{name}` needs a positive diagonal"
                        )));
                    }
                    s[(i, i % m)] = d.ln();
                }
                s
            }
        };
        self.push_storage(name, &storage, transform)
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn len(&self) -> usize {
        self.blocks.iter().map(Block::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn block(&self, name: &str) -> Option<&Block> {
        self.blocks.iter().find(|b| b.name == name)
    }

    fn block_mut(&mut self, name: &str) -> Option<&mut Block> {
        self.blocks.iter_mut().find(|b| b.name == name)
    }

    pub fn constrained(&self, name: &str) -> Mat {
        self.block(name)
            .unwrap_or_else(|| panic!("no parameter block named `{name}`"))
            .constrained()
    }

    pub fn storage(&self, name: &str) -> Mat {
        self.block(name)
            .unwrap_or_else(|| panic!("no parameter block named `{name}`"))
            .storage()
    }

    /// Overwrites a block's storage; shape must match.
    pub fn set_storage(&mut self, name: &str, storage: &Mat) -> Result<()> {
        let b = self
            .block_mut(name)
            .ok_or_else(|| LdgdError::InvalidArgument(format!("no block `{name}`")))?;
        if (b.rows, b.cols) != storage.shape() {
            return Err(LdgdError::InvalidArgument(format!(
                "shape mismatch for block `{name}`"
            )));
        }
        b.values = storage.as_slice().to_vec();
        Ok(())
    }

    /// Block name and offset range in the flat view.
    pub fn layout(&self) -> Vec<(String, std::ops::Range<usize>)> {
        let mut start = 0;
        self.blocks
            .iter()
            .map(|b| {
                let r = start..start + b.len();
                start = r.end;
                (b.name.clone(), r)
            })
            .collect()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.blocks
            .iter()
            .flat_map(|b| b.values.iter().copied())
            .collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.len() {
            return Err(LdgdError::InvalidArgument(format!(
                "flat vector has length {}, expected {}",
                flat.len(),
                self.len()
            )));
        }
        let mut start = 0;
        for b in &mut self.blocks {
            let n = b.len();
            b.values.copy_from_slice(&flat[start..start + n]);
            start += n;
        }
        Ok(())
    }

    /// Mutable storage of every block, in flat layout order.
    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.blocks.iter_mut().map(|b| b.values.as_mut_slice())
    }

    /// Name of the block owning flat index `i`.
    pub fn block_of(&self, i: usize) -> Option<&str> {
        let mut start = 0;
        for b in &self.blocks {
            if i < start + b.len() {
                return Some(&b.name);
            }
            start += b.len();
        }
        None
    }

    /// Registers every block on the tape as a trainable leaf.
    pub fn bind(&self, tape: &Tape) -> BoundParams {
        self.bind_with(tape, |_| true)
    }

    /// Like [`bind`](Self::bind), but blocks for which `trainable` returns
    /// false become constants.
    pub fn bind_with(&self, tape: &Tape, trainable: impl Fn(&str) -> bool) -> BoundParams {
        let mut names = Vec::with_capacity(self.blocks.len());
        let mut leaves = Vec::with_capacity(self.blocks.len());
        let mut values = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let storage = b.storage();
            let leaf = if trainable(&b.name) {
                tape.param(storage)
            } else {
                tape.constant(storage)
            };
            let value = match b.transform {
                Transform::Identity => leaf,
                Transform::Log => tape.exp(leaf),
                Transform::Softplus => tape.softplus(leaf),
                Transform::LowerLogDiag => tape.lower_exp_diag(leaf),
            };
            names.push(b.name.clone());
            leaves.push(leaf);
            values.push(value);
        }
        BoundParams {
            names,
            leaves,
            values,
        }
    }

    /// Collects the leaf adjoints back into the flat layout.
    pub fn flatten_grads(&self, bound: &BoundParams, grads: &super::tape::Gradients) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        for (b, &leaf) in self.blocks.iter().zip(&bound.leaves) {
            match grads.wrt(leaf) {
                Some(g) => out.extend_from_slice(g.as_slice()),
                None => out.extend(std::iter::repeat_n(0.0, b.len())),
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transforms_round_trip_and_stay_positive() {
        let mut p = ParameterVector::new();
        let pos = Mat::from_row_slice(1, 3, &[0.5, 2.0, 1e-3]);
        p.push("a", &pos, Transform::Log).unwrap();
        p.push("b", &pos, Transform::Softplus).unwrap();
        let w = Mat::from_row_slice(2, 2, &[1.5, 0.0, -0.3, 0.2]);
        p.push("w", &w, Transform::LowerLogDiag).unwrap();
        assert!((p.constrained("a") - &pos).amax() < 1e-12);
        assert!((p.constrained("b") - &pos).amax() < 1e-12);
        assert!((p.constrained("w") - &w).amax() < 1e-12);
        assert_eq!(p.len(), 10);
        let mut flat = p.flat();
        for v in flat.iter_mut() {
            *v = -50.0;
        }
        p.set_flat(&flat).unwrap();
        assert!(p.constrained("a").iter().all(|v| *v > 0.0));
        assert!(p.constrained("b").iter().all(|v| *v > 0.0));
    }

    #[test]
    fn names_must_be_unique() {
        let mut p = ParameterVector::new();
        p.push("x", &Mat::zeros(1, 1), Transform::Identity).unwrap();
        assert!(p.push("x", &Mat::zeros(1, 1), Transform::Identity).is_err());
    }

    #[test]
    fn layout_covers_flat_vector() {
        let mut p = ParameterVector::new();
        p.push("x", &Mat::zeros(2, 3), Transform::Identity).unwrap();
        p.push("y", &Mat::zeros(1, 4), Transform::Identity).unwrap();
        let layout = p.layout();
        assert_eq!(layout[0].1, 0..6);
        assert_eq!(layout[1].1, 6..10);
        assert_eq!(p.block_of(7), Some("y"));
    }
}
