//! Datasets, loaders, generators, splits and classification metrics.

mod io;
mod metrics;
mod split;
mod synthetic;

use std::path::Path;

use crate::error::{LdgdError, Result};
use crate::optim::Mat;

pub use io::{load_csv, load_idx_images, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC};
pub use metrics::{metrics, MetricsReport};
pub use split::{kfold, split, Split};
pub use synthetic::{
    expand_linear, expand_noise_channels, make_moons, synthetic_moons, MOON_NOISE, MOON_SHIFT,
};

/// Continuous features `Yʳ` (N×D) with one-hot labels `Yᶜ` (N×K).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub yr: Mat,
    pub yc: Mat,
    pub label_names: Vec<String>,
    pub feature_names: Vec<String>,
}

impl Dataset {
    /// Builds a dataset from features and integer labels in `0..label_names.len()`.
    pub fn from_labels(
        yr: Mat,
        labels: &[usize],
        label_names: Vec<String>,
        feature_names: Vec<String>,
    ) -> Result<Self> {
        if labels.len() != yr.nrows() {
            return Err(LdgdError::InvalidArgument(format!(
                "{} feature rows but {} labels",
                yr.nrows(),
                labels.len()
            )));
        }
        if feature_names.len() != yr.ncols() {
            return Err(LdgdError::InvalidArgument(
                "feature name count does not match columns".into(),
            ));
        }
        if yr.iter().any(|v| !v.is_finite()) {
            return Err(LdgdError::InvalidArgument("features must be finite".into()));
        }
        let yc = one_hot(labels, label_names.len())?;
        Ok(Dataset {
            yr,
            yc,
            label_names,
            feature_names,
        })
    }

    pub fn len(&self) -> usize {
        self.yr.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.yr.nrows() == 0
    }

    pub fn n_features(&self) -> usize {
        self.yr.ncols()
    }

    pub fn n_classes(&self) -> usize {
        self.yc.ncols()
    }

    pub fn labels(&self) -> Vec<usize> {
        argmax_rows(&self.yc)
    }

    /// Rows `idx` in the given order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let pick = |m: &Mat| Mat::from_fn(idx.len(), m.ncols(), |i, j| m[(idx[i], j)]);
        Dataset {
            yr: pick(&self.yr),
            yc: pick(&self.yc),
            label_names: self.label_names.clone(),
            feature_names: self.feature_names.clone(),
        }
    }

    /// Same rows with features replaced.
    pub fn with_features(&self, yr: Mat) -> Dataset {
        Dataset {
            yr,
            ..self.clone()
        }
    }

    /// Writes features and a trailing `label` column (class names) as CSV.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| LdgdError::io(path, e))?;
        self.write_csv_to(std::io::BufWriter::new(file)).map_err(|e| match e {
            LdgdError::Csv(c) => csv_to_io(c, path),
            other => other,
        })
    }

    /// Same layout as [`write_csv`](Self::write_csv), to any writer.
    pub fn write_csv_to<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = self.feature_names.clone();
        header.push("label".to_string());
        w.write_record(&header)?;
        let labels = self.labels();
        for i in 0..self.len() {
            let mut row: Vec<String> = self.yr.row(i).iter().map(|v| format!("{v:?}")).collect();
            row.push(self.label_names[labels[i]].clone());
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| LdgdError::Csv(e.into()))?;
        Ok(())
    }
}

fn csv_to_io(e: csv::Error, path: &Path) -> LdgdError {
    match e.into_kind() {
        csv::ErrorKind::Io(source) => LdgdError::io(path, source),
        other => LdgdError::InvalidArgument(format!("{other:?}")),
    }
}

/// One-hot matrix with `k` columns.
pub fn one_hot(labels: &[usize], k: usize) -> Result<Mat> {
    let mut m = Mat::zeros(labels.len(), k);
    for (i, &l) in labels.iter().enumerate() {
        if l >= k {
            return Err(LdgdError::InvalidArgument(format!(
                "label {l} out of range for {k} classes"
            )));
        }
        m[(i, l)] = 1.0;
    }
    Ok(m)
}

/// Row-wise argmax; the lowest index wins ties.
pub fn argmax_rows(m: &Mat) -> Vec<usize> {
    m.row_iter()
        .map(|r| {
            let mut best = 0;
            for j in 1..r.len() {
                if r[j] > r[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Feature preprocessing fitted on training rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scaling {
    /// Subtract the mean and divide by the standard deviation.
    #[default]
    Standardize,
    /// Subtract the mean only.
    Center,
    /// Leave features untouched.
    None,
}

/// Per-feature z-scoring fitted on one matrix and applied to others.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Column means and population standard deviations; constant columns get
    /// a unit scale.
    pub fn fit(y: &Mat) -> Self {
        let n = y.nrows().max(1) as f64;
        let mean: Vec<f64> = y.column_iter().map(|c| c.sum() / n).collect();
        let std = y
            .column_iter()
            .zip(&mean)
            .map(|(c, m)| {
                let v = c.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
                if v > 0.0 {
                    v.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Standardizer { mean, std }
    }

    pub fn fit_with(y: &Mat, scaling: Scaling) -> Self {
        let mut s = Standardizer::fit(y);
        match scaling {
            Scaling::Standardize => {}
            Scaling::Center => s.std.fill(1.0),
            Scaling::None => {
                s.mean.fill(0.0);
                s.std.fill(1.0);
            }
        }
        s
    }

    pub fn transform(&self, y: &Mat) -> Mat {
        Mat::from_fn(y.nrows(), y.ncols(), |i, j| (y[(i, j)] - self.mean[j]) / self.std[j])
    }

    pub fn inverse(&self, z: &Mat) -> Mat {
        Mat::from_fn(z.nrows(), z.ncols(), |i, j| z[(i, j)] * self.std[j] + self.mean[j])
    }
}
