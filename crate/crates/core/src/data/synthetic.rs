use std::f64::consts::PI;

use super::Dataset;
use crate::error::{LdgdError, Result};
use crate::numerics::SeededRng;
use crate::optim::Mat;

/// Translation applied to the reflected second arc.
pub const MOON_SHIFT: (f64, f64) = (1.0, 0.5);
/// Default isotropic noise standard deviation.
pub const MOON_NOISE: f64 = 0.1;

/// Two interleaving unit half-circles, `n/2` points each, `t` evenly spaced
/// on `[0, π]`. Class 0 lies on `(cos t, sin t)`; class 1 on the arc
/// reflected about the horizontal axis and moved by [`MOON_SHIFT`].
pub fn make_moons(n: usize, noise_std: f64, rng: &mut SeededRng) -> Result<(Mat, Vec<usize>)> {
    if n == 0 || n % 2 != 0 {
        return Err(LdgdError::InvalidArgument(format!(
            "moons need a positive even sample count, got {n}"
        )));
    }
    let half = n / 2;
    let angle = |i: usize| {
        if half == 1 {
            0.0
        } else {
            PI * i as f64 / (half - 1) as f64
        }
    };
    let mut x = Mat::zeros(n, 2);
    let mut labels = vec![0; n];
    for i in 0..half {
        let t = angle(i);
        x[(i, 0)] = t.cos();
        x[(i, 1)] = t.sin();
        x[(half + i, 0)] = MOON_SHIFT.0 - t.cos();
        x[(half + i, 1)] = MOON_SHIFT.1 - t.sin();
        labels[half + i] = 1;
    }
    if noise_std > 0.0 {
        for i in 0..n {
            for j in 0..2 {
                x[(i, j)] += noise_std * rng.normal();
            }
        }
    }
    Ok((x, labels))
}

/// `base · Wᵀ` with `W` a seeded standard-normal `target_dim × base_dim` matrix.
pub fn expand_linear(base: &Mat, target_dim: usize, rng: &mut SeededRng) -> Result<Mat> {
    if target_dim < base.ncols() {
        return Err(LdgdError::InvalidArgument(format!(
            "target dimension {target_dim} below input dimension {}",
            base.ncols()
        )));
    }
    let w = rng.normal_matrix(target_dim, base.ncols());
    Ok(base * w.transpose())
}

/// Appends as many unit-variance white-noise columns as `base` has.
pub fn expand_noise_channels(base: &Mat, rng: &mut SeededRng) -> Mat {
    let (n, d) = base.shape();
    let noise = rng.normal_matrix(n, d);
    let mut out = Mat::zeros(n, 2 * d);
    out.columns_mut(0, d).copy_from(base);
    out.columns_mut(d, d).copy_from(&noise);
    out
}

/// Moons lifted to `base_dim` dimensions, then doubled with noise channels
/// (`base_dim` 5, 10, 20 give 10, 20, 40 features).
pub fn synthetic_moons(n: usize, base_dim: usize, noise_std: f64, seed: u64) -> Result<Dataset> {
    let root = SeededRng::new(seed);
    let (moons, labels) = make_moons(n, noise_std, &mut root.substream("moons"))?;
    let lifted = expand_linear(&moons, base_dim, &mut root.substream("expand"))?;
    let yr = expand_noise_channels(&lifted, &mut root.substream("noise"));
    let names = (0..yr.ncols()).map(|j| format!("x{j}")).collect();
    Dataset::from_labels(yr, &labels, vec!["0".into(), "1".into()], names)
}
