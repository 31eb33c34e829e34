//! Labeled datasets: synthetic Gaussian benchmarks, CSV I/O and class-disjoint splits.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numgrad::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Matrix,
    /// Dense class ids in `0..num_classes`.
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(samples: Matrix, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != samples.rows() {
            return Err(Error::dims("Dataset::new", samples.shape(), (labels.len(), 1)));
        }
        let num_classes = labels.iter().max().map_or(0, |&m| m + 1);
        let present: BTreeSet<usize> = labels.iter().copied().collect();
        if present.len() != num_classes {
            return Err(Error::input(format!(
                "labels are not dense: {} distinct ids but max id {}",
                present.len(),
                num_classes.saturating_sub(1)
            )));
        }
        Ok(Self {
            samples,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.samples.cols()
    }

    /// Rows whose class is in `classes`, keeping their global labels.
    pub fn subset(&self, classes: &BTreeSet<usize>) -> Subset {
        let indices: Vec<usize> = (0..self.len())
            .filter(|&i| classes.contains(&self.labels[i]))
            .collect();
        Subset {
            samples: self.samples.select_rows(&indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            sample_ids: indices,
        }
    }
}

/// A selection of dataset rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Subset {
    pub samples: Matrix,
    pub labels: Vec<usize>,
    /// Row index in the parent dataset.
    pub sample_ids: Vec<usize>,
}

/// Isotropic Gaussian blobs around centers drawn uniformly from `[0, center_scale)^dim`.
pub fn synth_gaussian_dataset(
    num_classes: usize,
    per_class: usize,
    input_dim: usize,
    center_scale: f64,
    noise_sigma: f64,
    seed: u64,
) -> Result<Dataset> {
    if num_classes == 0 || per_class == 0 || input_dim == 0 {
        return Err(Error::input("class count, samples per class and dimension must be positive"));
    }
    if !(noise_sigma >= 0.0) || !(center_scale >= 0.0) {
        return Err(Error::input("noise sigma and center scale must be >= 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| (0..input_dim).map(|_| rng.gen::<f64>() * center_scale).collect())
        .collect();
    let mut data = Vec::with_capacity(num_classes * per_class * input_dim);
    let mut labels = Vec::with_capacity(num_classes * per_class);
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..per_class {
            for &m in center {
                let eps: f64 = rng.sample(StandardNormal);
                data.push(m + noise_sigma * eps);
            }
            labels.push(c);
        }
    }
    Dataset::new(Matrix::from_vec(labels.len(), input_dim, data)?, labels)
}

/// Centers used by [`synth_gaussian_dataset`] for a given seed.
pub fn synth_centers(num_classes: usize, input_dim: usize, center_scale: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..num_classes)
        .map(|_| (0..input_dim).map(|_| rng.gen::<f64>() * center_scale).collect())
        .collect()
}

/// Class-disjoint partition of the label set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ZeroShotSplit {
    pub train_classes: BTreeSet<usize>,
    pub test_classes: BTreeSet<usize>,
}

/// Shuffles class ids with `seed` and gives the first `⌈C · train_fraction⌉` to training.
pub fn split_zero_shot(dataset: &Dataset, train_fraction: f64, seed: u64) -> Result<ZeroShotSplit> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::input(format!(
            "train fraction must be in (0, 1), got {train_fraction}"
        )));
    }
    let c = dataset.num_classes;
    if c < 2 {
        return Err(Error::input(format!("zero-shot split needs >= 2 classes, got {c}")));
    }
    let n_train = (c as f64 * train_fraction).ceil() as usize;
    if n_train >= c {
        return Err(Error::input(format!(
            "train fraction {train_fraction} leaves no test classes out of {c}"
        )));
    }
    let mut classes: Vec<usize> = (0..c).collect();
    classes.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let split = ZeroShotSplit {
        train_classes: classes[..n_train].iter().copied().collect(),
        test_classes: classes[n_train..].iter().copied().collect(),
    };
    assert!(split.train_classes.is_disjoint(&split.test_classes));
    Ok(split)
}

/// Writes `label,f_0,…,f_{d−1}` CSV with shortest round-trip float formatting.
pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    std::fs::write(path, dataset_to_csv(dataset)).map_err(|e| Error::io(path, e))
}

pub fn dataset_to_csv(dataset: &Dataset) -> String {
    let d = dataset.input_dim();
    let mut out = String::from("label");
    for k in 0..d {
        write!(out, ",f_{k}").expect("string write");
    }
    out.push('\n');
    for (row, label) in dataset.samples.row_iter().zip(&dataset.labels) {
        write!(out, "{label}").expect("string write");
        for v in row {
            write!(out, ",{v:?}").expect("string write");
        }
        out.push('\n');
    }
    out
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset_csv(&text)
}

pub fn parse_dataset_csv(text: &str) -> Result<Dataset> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let Some((h, header)) = lines.next() else {
        return Err(Error::Parse {
            line: 1,
            msg: "no header".into(),
        });
    };
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    let dim = cols.len() - 1;
    let header_ok = cols[0] == "label"
        && cols[1..]
            .iter()
            .enumerate()
            .all(|(k, c)| *c == format!("f_{k}"));
    if !header_ok || dim == 0 {
        return Err(Error::Parse {
            line: h + 1,
            msg: format!("unknown header {header:?}, expected label,f_0,…"),
        });
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (i, line) in lines {
        let line_no = i + 1;
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != dim + 1 {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected {} columns, found {}", dim + 1, fields.len()),
            });
        }
        let label: usize = fields[0].parse().map_err(|_| Error::Parse {
            line: line_no,
            msg: format!("bad label {:?}", fields[0]),
        })?;
        labels.push(label);
        for f in &fields[1..] {
            let v: f64 = f.parse().map_err(|_| Error::Parse {
                line: line_no,
                msg: format!("bad value {f:?}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("non-finite value {f:?}"),
                });
            }
            data.push(v);
        }
    }
    if labels.is_empty() {
        return Err(Error::Parse {
            line: h + 1,
            msg: "no samples".into(),
        });
    }
    let samples = Matrix::from_vec(labels.len(), dim, data)?;
    Dataset::new(samples, labels).map_err(|e| Error::Parse {
        line: h + 1,
        msg: e.to_string(),
    })
}
