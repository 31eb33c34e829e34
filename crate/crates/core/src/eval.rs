//! Zero-shot evaluation: k-means clustering quality (NMI, pairwise F1) and
//! Recall@K retrieval over Euclidean nearest neighbours.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::embedding::{euclidean, pairwise_distances};
use crate::error::{Error, Result};
use crate::numgrad::Matrix;

pub const KMEANS_MAX_ITERS: usize = 300;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub nmi: f64,
    pub f1: f64,
    /// Keyed by K, ascending.
    pub recall: BTreeMap<usize, f64>,
    pub num_test_points: usize,
    pub num_test_classes: usize,
    pub kmeans_seed: u64,
}

impl EvalReport {
    /// `{ "nmi": …, "f1": …, "recall": {"1": …, …} }` plus bookkeeping fields.
    pub fn to_json(&self) -> serde_json::Value {
        let recall: serde_json::Map<String, serde_json::Value> = self
            .recall
            .iter()
            .map(|(k, v)| (k.to_string(), serde_json::json!(v)))
            .collect();
        serde_json::json!({
            "nmi": self.nmi,
            "f1": self.f1,
            "recall": recall,
            "num_test_points": self.num_test_points,
            "num_test_classes": self.num_test_classes,
            "kmeans_seed": self.kmeans_seed,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub assignment: Vec<usize>,
    pub centroids: Matrix,
    pub inertia: f64,
    pub iterations: usize,
}

/// Lloyd's algorithm from k-means++ seeding, until the assignment stops
/// changing or [`KMEANS_MAX_ITERS`] is reached.
pub fn kmeans(points: &Matrix, k: usize, seed: u64) -> Result<KMeansResult> {
    let n = points.rows();
    if k == 0 {
        return Err(Error::input("k-means needs k >= 1"));
    }
    if k > n {
        return Err(Error::input(format!("k = {k} exceeds {n} points")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = vec![rng.gen_range(0..n)];
    let mut nearest: Vec<f64> = (0..n)
        .map(|i| sq_dist(points.row(i), points.row(centers[0])))
        .collect();
    while centers.len() < k {
        let total: f64 = nearest.iter().sum();
        let next = if total > 0.0 {
            let target = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let last_positive = nearest.iter().rposition(|&d| d > 0.0).expect("total > 0");
            nearest
                .iter()
                .position(|&d| {
                    acc += d;
                    d > 0.0 && acc > target
                })
                .unwrap_or(last_positive)
        } else {
            // all remaining points coincide with a center
            (0..n).find(|i| !centers.contains(i)).expect("k <= n")
        };
        centers.push(next);
        for (i, d) in nearest.iter_mut().enumerate() {
            *d = d.min(sq_dist(points.row(i), points.row(next)));
        }
    }
    let mut centroids = points.select_rows(&centers);
    let mut assignment = vec![usize::MAX; n];
    let mut iterations = 0;
    while iterations < KMEANS_MAX_ITERS {
        iterations += 1;
        let mut changed = false;
        for i in 0..n {
            let c = closest(points.row(i), &centroids);
            if assignment[i] != c {
                assignment[i] = c;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = Matrix::zeros(k, points.cols());
        let mut counts = vec![0usize; k];
        for (i, &c) in assignment.iter().enumerate() {
            counts[c] += 1;
            for (s, &v) in sums.row_mut(c).iter_mut().zip(points.row(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                for (dst, &s) in centroids.row_mut(c).iter_mut().zip(sums.row(c)) {
                    *dst = s * inv;
                }
            } else {
                // re-seed an empty cluster at the point farthest from its centroid
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = sq_dist(points.row(a), centroids.row(assignment[a]));
                        let db = sq_dist(points.row(b), centroids.row(assignment[b]));
                        da.total_cmp(&db).then(b.cmp(&a))
                    })
                    .expect("n > 0");
                centroids.row_mut(c).copy_from_slice(points.row(far));
            }
        }
    }
    let inertia = (0..n)
        .map(|i| sq_dist(points.row(i), centroids.row(assignment[i])))
        .sum();
    Ok(KMeansResult {
        assignment,
        centroids,
        inertia,
        iterations,
    })
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid, lowest index on ties.
fn closest(p: &[f64], centroids: &Matrix) -> usize {
    let mut best = (0, f64::INFINITY);
    for (c, row) in centroids.row_iter().enumerate() {
        let d = sq_dist(p, row);
        if d < best.1 {
            best = (c, d);
        }
    }
    best.0
}

fn check_lengths(a: &[usize], b: &[usize]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::input(format!(
            "assignment has {} entries but labels have {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

fn entropy(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Mutual information over the arithmetic mean of the two entropies.
pub fn nmi(assignment: &[usize], labels: &[usize]) -> Result<f64> {
    check_lengths(assignment, labels)?;
    let n = assignment.len() as f64;
    if assignment.is_empty() {
        return Ok(1.0);
    }
    let mut joint: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut by_cluster: BTreeMap<usize, usize> = BTreeMap::new();
    let mut by_label: BTreeMap<usize, usize> = BTreeMap::new();
    for (&c, &l) in assignment.iter().zip(labels) {
        *joint.entry((c, l)).or_default() += 1;
        *by_cluster.entry(c).or_default() += 1;
        *by_label.entry(l).or_default() += 1;
    }
    let h_c = entropy(by_cluster.values().copied(), n);
    let h_l = entropy(by_label.values().copied(), n);
    if h_c == 0.0 && h_l == 0.0 {
        return Ok(1.0);
    }
    // clusters and labels in one-to-one correspondence
    if joint.len() == by_cluster.len() && joint.len() == by_label.len() {
        return Ok(1.0);
    }
    let mi: f64 = joint
        .iter()
        .map(|(&(c, l), &nij)| {
            let pij = nij as f64 / n;
            let pc = by_cluster[&c] as f64 / n;
            let pl = by_label[&l] as f64 / n;
            pij * (pij / (pc * pl)).ln()
        })
        .sum();
    if mi <= 0.0 {
        return Ok(0.0);
    }
    Ok((mi / ((h_c + h_l) / 2.0)).clamp(0.0, 1.0))
}

/// Pair-counting F1 over all unordered pairs of points.
pub fn pairwise_f1(assignment: &[usize], labels: &[usize]) -> Result<f64> {
    check_lengths(assignment, labels)?;
    if assignment.len() < 2 {
        return Err(Error::input("pairwise F1 needs at least 2 points"));
    }
    let mut joint: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut by_cluster: BTreeMap<usize, usize> = BTreeMap::new();
    let mut by_label: BTreeMap<usize, usize> = BTreeMap::new();
    for (&c, &l) in assignment.iter().zip(labels) {
        *joint.entry((c, l)).or_default() += 1;
        *by_cluster.entry(c).or_default() += 1;
        *by_label.entry(l).or_default() += 1;
    }
    let tp = pairs(joint.values());
    let same_cluster = pairs(by_cluster.values());
    let same_label = pairs(by_label.values());
    if same_cluster == 0 || same_label == 0 || tp == 0 {
        return Ok(0.0);
    }
    let precision = tp as f64 / same_cluster as f64;
    let recall = tp as f64 / same_label as f64;
    Ok(2.0 * precision * recall / (precision + recall))
}

fn pairs<'a>(counts: impl Iterator<Item = &'a usize>) -> u64 {
    counts.map(|&c| (c as u64) * (c as u64).saturating_sub(1) / 2).sum()
}

/// Fraction of queries with a same-label point among their K nearest
/// neighbours (self excluded). Distance ties go to the lower index.
pub fn recall_at_k(embeddings: &Matrix, labels: &[usize], ks: &[usize]) -> Result<BTreeMap<usize, f64>> {
    let n = embeddings.rows();
    if labels.len() != n {
        return Err(Error::input(format!("{} labels for {n} points", labels.len())));
    }
    if let Some(&bad) = ks.iter().find(|&&k| k == 0 || k >= n) {
        return Err(Error::input(format!("K = {bad} must be in 1..{n}")));
    }
    let max_k = ks.iter().copied().max().unwrap_or(0);
    let dists = pairwise_distances(embeddings);
    // first rank at which a same-label neighbour appears, per query
    let first_hit: Vec<Option<usize>> = (0..n)
        .map(|q| {
            let mut order: Vec<usize> = (0..n).filter(|&j| j != q).collect();
            order.sort_by(|&a, &b| dists[(q, a)].total_cmp(&dists[(q, b)]).then(a.cmp(&b)));
            order
                .iter()
                .take(max_k)
                .position(|&j| labels[j] == labels[q])
        })
        .collect();
    Ok(ks
        .iter()
        .map(|&k| {
            let hits = first_hit.iter().filter(|h| matches!(h, Some(r) if *r < k)).count();
            (k, hits as f64 / n as f64)
        })
        .collect())
}

/// Runs every metric on a frozen embedding snapshot, clustering with k = #classes.
pub fn evaluate(embeddings: &Matrix, labels: &[usize], ks: &[usize], kmeans_seed: u64) -> Result<EvalReport> {
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let clusters = kmeans(embeddings, classes.len(), kmeans_seed)?;
    Ok(EvalReport {
        nmi: nmi(&clusters.assignment, labels)?,
        f1: pairwise_f1(&clusters.assignment, labels)?,
        recall: recall_at_k(embeddings, labels, ks)?,
        num_test_points: labels.len(),
        num_test_classes: classes.len(),
        kmeans_seed,
    })
}

/// Nearest-neighbour ranking used by [`recall_at_k`], exposed for audits.
pub fn neighbours(embeddings: &Matrix, query: usize) -> Vec<usize> {
    let q = embeddings.row(query);
    let mut order: Vec<(usize, f64)> = (0..embeddings.rows())
        .filter(|&j| j != query)
        .map(|j| (j, euclidean(q, embeddings.row(j))))
        .collect();
    order.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    order.into_iter().map(|(j, _)| j).collect()
}
