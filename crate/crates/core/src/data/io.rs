use std::fs::File;
use std::io::Read;
use std::path::Path;

use super::Dataset;
use crate::error::{LdgdError, Result};
use crate::optim::Mat;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            LdgdError::MissingFile(path.to_path_buf())
        } else {
            LdgdError::io(path, e)
        }
    })
}

/// Reads a headed CSV; `label_column` is factorized into one-hot labels and
/// every other column must be numeric.
///
/// Lines starting with `#` are skipped.
/// Label names are ordered numerically when they all parse as numbers and
/// lexicographically otherwise. Row numbers in errors count data rows from 1.
pub fn load_csv(path: &Path, label_column: &str) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(open(path)?);
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let label_idx = headers
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| LdgdError::UnknownColumn(label_column.to_string()))?;
    let feature_names: Vec<String> = headers
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != label_idx)
        .map(|(_, h)| h.clone())
        .collect();
    let d = feature_names.len();

    let mut values = Vec::new();
    let mut raw_labels = Vec::new();
    let mut missing = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        let row = r + 1;
        if record.iter().any(str::is_empty) || record.len() < headers.len() {
            missing.push(row);
            continue;
        }
        for (j, cell) in record.iter().enumerate() {
            if j == label_idx {
                continue;
            }
            let v: f64 = cell.parse().map_err(|_| LdgdError::BadCell {
                row,
                column: headers[j].clone(),
                value: cell.to_string(),
            })?;
            if !v.is_finite() {
                return Err(LdgdError::BadCell {
                    row,
                    column: headers[j].clone(),
                    value: cell.to_string(),
                });
            }
            values.push(v);
        }
        raw_labels.push(record[label_idx].to_string());
    }
    if !missing.is_empty() {
        return Err(LdgdError::MissingValues { rows: missing });
    }

    let mut names: Vec<String> = raw_labels.clone();
    names.sort();
    names.dedup();
    if names.iter().all(|n| n.parse::<f64>().is_ok()) {
        names.sort_by(|a, b| {
            a.parse::<f64>()
                .unwrap()
                .total_cmp(&b.parse::<f64>().unwrap())
        });
    }
    let labels: Vec<usize> = raw_labels
        .iter()
        .map(|l| names.iter().position(|n| n == l).unwrap())
        .collect();
    let yr = Mat::from_row_slice(labels.len(), d, &values);
    Dataset::from_labels(yr, &labels, names, feature_names)
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    open(path)?
        .read_to_end(&mut buf)
        .map_err(|e| LdgdError::io(path, e))?;
    Ok(buf)
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(LdgdError::Truncated {
            expected: at + 4,
            found: bytes.len(),
        })
}

/// Loads IDX image/label files, keeping the first `max_per_digit`
/// occurrences of each digit in `keep_digits` (all digits and no cap when
/// `None`). Pixels are scaled to `[0, 1]`; classes are the kept digits in
/// ascending order.
pub fn load_idx_images(
    images: &Path,
    labels: &Path,
    keep_digits: Option<&[u8]>,
    max_per_digit: Option<usize>,
) -> Result<Dataset> {
    let label_bytes = read_all(labels)?;
    let magic = be_u32(&label_bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(LdgdError::BadMagic {
            found: magic,
            expected: IDX_LABELS_MAGIC,
        });
    }
    let n_labels = be_u32(&label_bytes, 4)? as usize;
    if label_bytes.len() < 8 + n_labels {
        return Err(LdgdError::Truncated {
            expected: 8 + n_labels,
            found: label_bytes.len(),
        });
    }
    let digits = &label_bytes[8..8 + n_labels];

    let mut file = open(images)?;
    let mut header = [0u8; 16];
    let got = read_up_to(&mut file, &mut header).map_err(|e| LdgdError::io(images, e))?;
    if got < 4 {
        return Err(LdgdError::Truncated {
            expected: 16,
            found: got,
        });
    }
    let magic = be_u32(&header, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(LdgdError::BadMagic {
            found: magic,
            expected: IDX_IMAGES_MAGIC,
        });
    }
    if got < 16 {
        return Err(LdgdError::Truncated {
            expected: 16,
            found: got,
        });
    }
    let n_images = be_u32(&header, 4)? as usize;
    let rows = be_u32(&header, 8)? as usize;
    let cols = be_u32(&header, 12)? as usize;
    if n_images != n_labels {
        return Err(LdgdError::CountMismatch {
            images: n_images,
            labels: n_labels,
        });
    }
    let pixels = rows * cols;
    let mut payload = Vec::new();
    file.read_to_end(&mut payload)
        .map_err(|e| LdgdError::io(images, e))?;
    if payload.len() < n_images * pixels {
        return Err(LdgdError::Truncated {
            expected: 16 + n_images * pixels,
            found: 16 + payload.len(),
        });
    }

    let mut kept_digits: Vec<u8> = match keep_digits {
        Some(k) => k.to_vec(),
        None => (0..=9).collect(),
    };
    kept_digits.sort_unstable();
    kept_digits.dedup();
    let cap = max_per_digit.unwrap_or(usize::MAX);
    let mut counts = vec![0usize; kept_digits.len()];
    let mut chosen = Vec::new();
    let mut classes = Vec::new();
    for (i, d) in digits.iter().enumerate() {
        if let Some(c) = kept_digits.iter().position(|k| k == d) {
            if counts[c] < cap {
                counts[c] += 1;
                chosen.push(i);
                classes.push(c);
            }
        }
    }
    let mut yr = Mat::zeros(chosen.len(), pixels);
    for (r, &i) in chosen.iter().enumerate() {
        let img = &payload[i * pixels..(i + 1) * pixels];
        for (j, &p) in img.iter().enumerate() {
            yr[(r, j)] = p as f64 / 255.0;
        }
    }
    let names = kept_digits.iter().map(|d| d.to_string()).collect();
    let features = (0..pixels).map(|j| format!("px{j}")).collect();
    Dataset::from_labels(yr, &classes, names, features)
}

fn read_up_to(file: &mut File, buf: &mut [u8]) -> std::io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match file.read(&mut buf[filled..])? {
            0 => break,
            n => filled += n,
        }
    }
    Ok(filled)
}
