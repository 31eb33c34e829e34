//! Triplet and N-pair losses over plain Euclidean distances.

use serde::{Deserialize, Serialize};

use crate::embedding::euclidean;
use crate::error::{Error, Result};
use crate::numgrad::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Triplet,
    Npair,
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "triplet" => Ok(LossKind::Triplet),
            "npair" | "n-pair" => Ok(LossKind::Npair),
            other => Err(Error::Config(format!("unknown loss kind {other:?}"))),
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossKind::Triplet => "triplet",
            LossKind::Npair => "npair",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Flavor {
    Original,
    Synthetic,
}

/// One anchor with its positive and one or more negatives, as row indices
/// into an embedding matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tuple {
    pub anchor: usize,
    pub positive: usize,
    pub negatives: Vec<usize>,
}

/// Tuples over the rows of one embedding matrix.
///
/// For N-pair batches the tuples of one group are the N anchors, and each
/// anchor's negatives are the other anchors' positives.
#[derive(Debug, Clone, PartialEq)]
pub struct TupleBatch {
    pub kind: LossKind,
    pub flavor: Flavor,
    pub tuples: Vec<Tuple>,
    /// Label of every row of the referenced matrix.
    pub labels: Vec<usize>,
}

impl TupleBatch {
    /// Checks indices against a matrix of `rows` rows and label constraints.
    pub fn validate(&self, rows: usize) -> Result<()> {
        if self.labels.len() != rows {
            return Err(Error::input(format!(
                "tuple batch labels {} rows but embeddings have {rows}",
                self.labels.len()
            )));
        }
        for (t, tuple) in self.tuples.iter().enumerate() {
            let all = [tuple.anchor, tuple.positive]
                .into_iter()
                .chain(tuple.negatives.iter().copied());
            for idx in all {
                if idx >= rows {
                    return Err(Error::input(format!(
                        "tuple {t} references row {idx} of {rows}"
                    )));
                }
            }
            if tuple.negatives.is_empty() {
                return Err(Error::input(format!("tuple {t} has no negatives")));
            }
            if self.kind == LossKind::Triplet && tuple.negatives.len() != 1 {
                return Err(Error::input(format!("triplet {t} must have one negative")));
            }
            let la = self.labels[tuple.anchor];
            if self.labels[tuple.positive] != la {
                return Err(Error::input(format!("tuple {t}: positive label differs from anchor")));
            }
            if tuple.negatives.iter().any(|&n| self.labels[n] == la) {
                return Err(Error::input(format!("tuple {t}: negative shares anchor label")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub margin: f64,
    pub npair_n: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            margin: 1.0,
            npair_n: 4,
        }
    }
}

/// `[d_pos − d_neg + m]₊` and its derivatives w.r.t. `d_pos` and `d_neg`.
pub fn triplet_loss(d_pos: f64, d_neg: f64, margin: f64) -> (f64, f64, f64) {
    let v = d_pos - d_neg + margin;
    if v > 0.0 {
        (v, 1.0, -1.0)
    } else {
        (0.0, 0.0, 0.0)
    }
}

/// `log(1 + Σ_j exp(d_pos − d_neg[j]))` for one anchor, with gradients.
fn npair_term(d_pos: f64, d_neg: &[f64]) -> (f64, f64, Vec<f64>) {
    // log-sum-exp over {0} ∪ {d_pos − d_neg[j]}
    let max = d_neg
        .iter()
        .map(|&dn| d_pos - dn)
        .fold(0.0f64, f64::max);
    let base = (-max).exp();
    let exps: Vec<f64> = d_neg.iter().map(|&dn| (d_pos - dn - max).exp()).collect();
    let total = base + exps.iter().sum::<f64>();
    let loss = max + total.ln();
    let grad_neg: Vec<f64> = exps.iter().map(|e| -e / total).collect();
    let grad_pos = -grad_neg.iter().sum::<f64>();
    (loss, grad_pos, grad_neg)
}

/// N-pair loss `(1/N) Σ_i log(1 + Σ_{j≠i} exp(d_pos[i] − d_neg[i][j]))`.
///
/// `d_neg` is `N × (N−1)`. Returns the loss and its gradients w.r.t. both inputs.
pub fn npair_loss(d_pos: &[f64], d_neg: &Matrix) -> Result<(f64, Vec<f64>, Matrix)> {
    let n = d_pos.len();
    if n < 2 {
        return Err(Error::input(format!("n-pair loss needs N >= 2, got {n}")));
    }
    if d_neg.shape() != (n, n - 1) {
        return Err(Error::dims("npair_loss", (n, n - 1), d_neg.shape()));
    }
    let inv = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut grad_pos = vec![0.0; n];
    let mut grad_neg = Matrix::zeros(n, n - 1);
    for i in 0..n {
        let (l, gp, gn) = npair_term(d_pos[i], d_neg.row(i));
        loss += l;
        grad_pos[i] = gp * inv;
        for (o, g) in grad_neg.row_mut(i).iter_mut().zip(gn) {
            *o = g * inv;
        }
    }
    Ok((loss * inv, grad_pos, grad_neg))
}

/// Accumulates `coef · ∂d(a,b)/∂(a,b)` into `grad`. Coincident points contribute nothing.
fn add_distance_grad(grad: &mut Matrix, points: &Matrix, a: usize, b: usize, d: f64, coef: f64) {
    if coef == 0.0 || d == 0.0 || a == b {
        return;
    }
    let s = coef / d;
    for k in 0..points.cols() {
        let diff = s * (points[(a, k)] - points[(b, k)]);
        grad[(a, k)] += diff;
        grad[(b, k)] -= diff;
    }
}

/// Mean tuple loss over the batch and its gradient w.r.t. every embedding row.
pub fn batch_metric_loss(
    embeddings: &Matrix,
    tuples: &TupleBatch,
    config: &LossConfig,
) -> Result<(f64, Matrix)> {
    tuples.validate(embeddings.rows())?;
    let mut grad = Matrix::zeros(embeddings.rows(), embeddings.cols());
    if tuples.tuples.is_empty() {
        return Ok((0.0, grad));
    }
    let inv = 1.0 / tuples.tuples.len() as f64;
    let mut total = 0.0;
    for t in &tuples.tuples {
        let d_pos = euclidean(embeddings.row(t.anchor), embeddings.row(t.positive));
        let d_negs: Vec<f64> = t
            .negatives
            .iter()
            .map(|&n| euclidean(embeddings.row(t.anchor), embeddings.row(n)))
            .collect();
        let (loss, g_pos, g_negs) = match tuples.kind {
            LossKind::Triplet => {
                let (l, gp, gn) = triplet_loss(d_pos, d_negs[0], config.margin);
                (l, gp, vec![gn])
            }
            LossKind::Npair => npair_term(d_pos, &d_negs),
        };
        total += loss;
        add_distance_grad(&mut grad, embeddings, t.anchor, t.positive, d_pos, g_pos * inv);
        for ((&n, &dn), &gn) in t.negatives.iter().zip(&d_negs).zip(&g_negs) {
            add_distance_grad(&mut grad, embeddings, t.anchor, n, dn, gn * inv);
        }
    }
    Ok((total * inv, grad))
}
