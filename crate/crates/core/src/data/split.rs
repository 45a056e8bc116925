use crate::error::{LdgdError, Result};
use crate::numerics::SeededRng;

/// Train/test row indices, each sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

fn by_class(labels: &[usize]) -> Vec<Vec<usize>> {
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut groups = vec![Vec::new(); k];
    for (i, &l) in labels.iter().enumerate() {
        groups[l].push(i);
    }
    groups
}

/// Stratified split: each class contributes `round(n_c · test_fraction)`
/// rows to the test set.
pub fn split(labels: &[usize], test_fraction: f64, seed: u64) -> Result<Split> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(LdgdError::InvalidArgument(format!(
            "test fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    let mut rng = SeededRng::new(seed).substream("split");
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for mut group in by_class(labels) {
        rng.shuffle(&mut group);
        let n_test = (group.len() as f64 * test_fraction).round() as usize;
        test.extend_from_slice(&group[..n_test]);
        train.extend_from_slice(&group[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok(Split { train, test })
}

/// Stratified k-fold partition; fold `f` is the test set of the `f`-th split.
pub fn kfold(labels: &[usize], k: usize, seed: u64) -> Result<Vec<Split>> {
    if k < 2 {
        return Err(LdgdError::InvalidArgument(format!("k must be at least 2, got {k}")));
    }
    let groups = by_class(labels);
    if let Some((c, g)) = groups.iter().enumerate().find(|(_, g)| !g.is_empty() && g.len() < k) {
        return Err(LdgdError::InvalidArgument(format!(
            "class {c} has {} members, fewer than {k} folds",
            g.len()
        )));
    }
    let mut rng = SeededRng::new(seed).substream("kfold");
    let mut folds = vec![Vec::new(); k];
    let mut next = 0;
    for mut group in groups {
        rng.shuffle(&mut group);
        for i in group {
            folds[next % k].push(i);
            next += 1;
        }
    }
    Ok((0..k)
        .map(|f| {
            let mut test = folds[f].clone();
            test.sort_unstable();
            let mut train: Vec<usize> = folds
                .iter()
                .enumerate()
                .filter(|(g, _)| *g != f)
                .flat_map(|(_, v)| v.iter().copied())
                .collect();
            train.sort_unstable();
            Split { train, test }
        })
        .collect())
}
