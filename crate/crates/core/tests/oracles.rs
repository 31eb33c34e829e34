//! Library results against independent brute-force computations.

use std::collections::HashMap;

use hdml::data::{synth_centers, synth_gaussian_dataset};
use hdml::embedding::{distance, pairwise_distances, EmbedderParams};
use hdml::eval::{kmeans, nmi, pairwise_f1, recall_at_k};
use hdml::numgrad::{Activation, DenseLayer, Matrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

fn nmi_oracle(assignment: &[usize], labels: &[usize]) -> f64 {
    let n = labels.len() as f64;
    let mut counts: HashMap<(usize, usize), usize> = HashMap::new();
    let mut nc: HashMap<usize, usize> = HashMap::new();
    let mut nl: HashMap<usize, usize> = HashMap::new();
    for (&c, &l) in assignment.iter().zip(labels) {
        *counts.entry((c, l)).or_default() += 1;
        *nc.entry(c).or_default() += 1;
        *nl.entry(l).or_default() += 1;
    }
    let prob = |m: HashMap<usize, usize>| -> HashMap<usize, f64> { m.into_iter().map(|(k, v)| (k, v as f64 / n)).collect() };
    let joint: HashMap<(usize, usize), f64> = counts.into_iter().map(|(k, v)| (k, v as f64 / n)).collect();
    let (pc, pl) = (prob(nc), prob(nl));
    let entropy = |p: &HashMap<usize, f64>| -p.values().map(|v| v * v.ln()).sum::<f64>();
    let mi: f64 = joint.iter().map(|(&(c, l), &p)| p * (p / (pc[&c] * pl[&l])).ln()).sum();
    let (hc, hl) = (entropy(&pc), entropy(&pl));
    if hc + hl == 0.0 {
        return 1.0;
    }
    (mi / ((hc + hl) / 2.0)).max(0.0)
}

fn f1_oracle(assignment: &[usize], labels: &[usize]) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    for i in 0..labels.len() {
        for j in i + 1..labels.len() {
            match (assignment[i] == assignment[j], labels[i] == labels[j]) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                _ => {}
            }
        }
    }
    let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

fn recall_oracle(points: &[Vec<f64>], labels: &[usize], k: usize) -> f64 {
    let mut hits = 0;
    for q in 0..points.len() {
        let mut others: Vec<(f64, usize)> = (0..points.len())
            .filter(|&j| j != q)
            .map(|j| {
                let d2: f64 = points[q].iter().zip(&points[j]).map(|(a, b)| (a - b) * (a - b)).sum();
                (d2, j)
            })
            .collect();
        others.sort_by(|a, b| a.partial_cmp(b).unwrap());
        if others[..k].iter().any(|&(_, j)| labels[j] == labels[q]) {
            hits += 1;
        }
    }
    hits as f64 / points.len() as f64
}

#[test]
fn nmi_contingency_table_example() {
    // labels A A B B, clusters 1 1 1 2
    let (ln2, ln3) = (2f64.ln(), 3f64.ln());
    let mi = 1.5 * ln2 - 0.75 * ln3;
    let h_clusters = -(0.75 * 0.75f64.ln() + 0.25 * 0.25f64.ln());
    let expected = mi / ((h_clusters + ln2) / 2.0);
    assert!((expected - 0.343712).abs() < 1e-6);
    let got = nmi(&[1, 1, 1, 2], &[0, 0, 1, 1]).unwrap();
    assert!((got - expected).abs() < 1e-10);
    assert!((nmi_oracle(&[1, 1, 1, 2], &[0, 0, 1, 1]) - expected).abs() < 1e-12);
}

#[test]
fn f1_single_cluster_example_by_pair_enumeration() {
    let assignment = [0, 0, 0, 0];
    let labels = [0, 0, 1, 1];
    let oracle = f1_oracle(&assignment, &labels);
    assert!((oracle - 0.5).abs() < 1e-15);
    assert_eq!(pairwise_f1(&assignment, &labels).unwrap(), oracle);
    assert_eq!(pairwise_f1(&[0, 1, 2, 3], &labels).unwrap(), 0.0);
}

#[test]
fn clustering_metrics_match_oracles_on_random_assignments() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for _ in 0..200 {
        let n = rng.gen_range(2..40);
        let k = rng.gen_range(1..6);
        let c = rng.gen_range(1..6);
        let assignment: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
        let got = nmi(&assignment, &labels).unwrap();
        let want = nmi_oracle(&assignment, &labels);
        assert!((got - want).abs() < 1e-10, "{assignment:?} {labels:?}: {got} vs {want}");
        let got = pairwise_f1(&assignment, &labels).unwrap();
        assert!((got - f1_oracle(&assignment, &labels)).abs() < 1e-10);
    }
}

#[test]
fn recall_hand_audits() {
    let line = |xs: &[f64]| Matrix::from_vec(xs.len(), 1, xs.to_vec()).unwrap();
    let r = recall_at_k(&line(&[0.0, 0.1, 5.0, 5.1]), &[0, 0, 1, 1], &[1]).unwrap();
    assert_eq!(r[&1], 1.0);
    let r = recall_at_k(&line(&[0.0, 1.0, 2.0]), &[0, 1, 0], &[1]).unwrap();
    assert_eq!(r[&1], 0.0);
}

#[test]
fn recall_matches_sorted_neighbour_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..50 {
        let n = rng.gen_range(3..30);
        let d = rng.gen_range(1..5);
        let points: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..4)).collect();
        let ks: Vec<usize> = (1..n).collect();
        let got = recall_at_k(&Matrix::from_rows(&points).unwrap(), &labels, &ks).unwrap();
        for &k in &ks {
            assert_eq!(got[&k], recall_oracle(&points, &labels, k), "n {n} k {k}");
        }
    }
}

#[test]
fn recall_at_n_minus_one_is_one_when_every_class_has_a_pair() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let z = random_matrix(&mut rng, 8, 3, 1.0);
    let labels = [0, 1, 2, 3, 0, 1, 2, 3];
    assert_eq!(recall_at_k(&z, &labels, &[7]).unwrap()[&7], 1.0);
}

#[test]
fn distances_match_sum_of_squares_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..10 {
        let a: Vec<f64> = (0..6).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let b: Vec<f64> = (0..6).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let mut ss = 0.0;
        for i in 0..6 {
            ss += (a[i] - b[i]) * (a[i] - b[i]);
        }
        assert!((distance(&a, &b).unwrap() - ss.sqrt()).abs() < 1e-12);
    }
    let m = random_matrix(&mut rng, 9, 4, 2.0);
    let d = pairwise_distances(&m);
    for i in 0..9 {
        for j in 0..9 {
            let mut ss = 0.0;
            for k in 0..4 {
                ss += (m[(i, k)] - m[(j, k)]).powi(2);
            }
            assert!((d[(i, j)] - ss.sqrt()).abs() < 1e-10);
        }
    }
    assert_eq!(pairwise_distances(&Matrix::zeros(1, 3)), Matrix::zeros(1, 1));
}

fn affine(w: &Matrix, b: &[f64], x: &[f64], relu: bool) -> Vec<f64> {
    (0..w.rows())
        .map(|o| {
            let mut acc = b[o];
            for i in 0..w.cols() {
                acc += w[(o, i)] * x[i];
            }
            if relu {
                acc.max(0.0)
            } else {
                acc
            }
        })
        .collect()
}

#[test]
fn embedder_matches_hand_rolled_composition() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut emb = EmbedderParams::init(5, &[7, 4], 3, &mut rng);
    for layer in emb.extractor.layers.iter_mut().chain(std::iter::once(&mut emb.projector)) {
        layer.bias = (0..layer.out_dim()).map(|_| rng.gen_range(-0.5..0.5)).collect();
    }
    let x = random_matrix(&mut rng, 4, 5, 1.0);
    let z = emb.embed(&x).unwrap();
    let (l0, l1, p) = (&emb.extractor.layers[0], &emb.extractor.layers[1], &emb.projector);
    for r in 0..4 {
        let h = affine(&l0.weight, &l0.bias, x.row(r), true);
        let y = affine(&l1.weight, &l1.bias, &h, true);
        let want = affine(&p.weight, &p.bias, &y, false);
        for (a, b) in z.row(r).iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn dense_layer_matches_matmul_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let w = random_matrix(&mut rng, 4, 3, 1.0);
    let b: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let layer = DenseLayer::new(w.clone(), b.clone(), Activation::Identity).unwrap();
    let x = random_matrix(&mut rng, 2, 3, 1.0);
    let out = layer.infer(&x).unwrap();
    for r in 0..2 {
        for (a, e) in out.row(r).iter().zip(affine(&w, &b, x.row(r), false)) {
            assert!((a - e).abs() < 1e-12);
        }
    }
}

#[test]
fn class_means_lie_within_the_standard_error_bound() {
    let (per_class, sigma) = (100, 1.0);
    let bound = 4.0 * sigma / (per_class as f64).sqrt();
    let (mut inside, mut total) = (0usize, 0usize);
    for seed in 0..5 {
        let ds = synth_gaussian_dataset(20, per_class, 64, 10.0, sigma, seed).unwrap();
        let centers = synth_centers(20, 64, 10.0, seed);
        for (c, center) in centers.iter().enumerate() {
            let rows: Vec<&[f64]> = ds.samples.row_iter().zip(&ds.labels).filter(|(_, &l)| l == c).map(|(r, _)| r).collect();
            for (k, &m) in center.iter().enumerate() {
                let mean = rows.iter().map(|r| r[k]).sum::<f64>() / rows.len() as f64;
                inside += usize::from((mean - m).abs() <= bound);
                total += 1;
            }
        }
    }
    // a 4-sigma band holds with probability 0.99994 per coordinate
    assert!(inside as f64 / total as f64 >= 0.99, "{inside}/{total}");
}

#[test]
fn kmeans_recovers_two_separated_blobs_up_to_relabelling() {
    let pts = Matrix::from_rows(&[
        [0.0, 0.0],
        [0.1, 0.2],
        [0.2, -0.1],
        [-0.1, 0.1],
        [0.05, 0.05],
        [9.0, 9.0],
        [9.1, 8.9],
        [8.9, 9.2],
        [9.2, 9.1],
        [9.0, 8.8],
    ])
    .unwrap();
    let truth = [0, 0, 0, 0, 0, 1, 1, 1, 1, 1];
    for seed in 0..10 {
        let km = kmeans(&pts, 2, seed).unwrap();
        let flip = km.assignment[0];
        for (a, t) in km.assignment.iter().zip(truth) {
            assert_eq!(*a == flip, t == 0);
        }
    }
}
