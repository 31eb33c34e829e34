use std::collections::BTreeSet;

use hdml::augment::{augment_negative, pulling_lambda, AugmentorState, ReferenceDistance, LAMBDA_FLOOR};
use hdml::config::{config_to_string, parse_config};
use hdml::data::{dataset_to_csv, parse_dataset_csv, split_zero_shot, Dataset};
use hdml::embedding::distance;
use hdml::eval::{kmeans, nmi, pairwise_f1, recall_at_k};
use hdml::metric::{batch_metric_loss, Flavor, LossConfig, LossKind, Tuple, TupleBatch};
use hdml::numgrad::Matrix;
use hdml::train::{metric_weight, TrainConfig};
use proptest::prelude::*;

fn vec_of(dim: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0..10.0f64, dim)
}

fn points(n: usize, dim: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(vec_of(dim), n)
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

fn norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Orthonormal basis from Gram-Schmidt on the given rows.
fn orthonormal(rows: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for r in rows {
        let mut v = r.clone();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v = v.iter().zip(b).map(|(x, y)| x - dot * y).collect();
        }
        let n = norm(&v);
        if n < 1e-3 {
            return None;
        }
        basis.push(v.iter().map(|x| x / n).collect());
    }
    Some(basis)
}

fn npair_batch(n: usize) -> TupleBatch {
    let tuples = (0..n)
        .map(|i| Tuple {
            anchor: 2 * i,
            positive: 2 * i + 1,
            negatives: (0..n).filter(|&j| j != i).map(|j| 2 * j + 1).collect(),
        })
        .collect();
    TupleBatch {
        kind: LossKind::Npair,
        flavor: Flavor::Original,
        tuples,
        labels: (0..2 * n).map(|r| r / 2).collect(),
    }
}

fn triplet_batch(rows: usize) -> TupleBatch {
    let tuples = (0..rows)
        .map(|a| Tuple {
            anchor: a,
            positive: a ^ 1,
            negatives: vec![(a + 2) % rows],
        })
        .collect();
    TupleBatch {
        kind: LossKind::Triplet,
        flavor: Flavor::Original,
        tuples,
        labels: (0..rows).map(|r| r / 2).collect(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn distance_is_a_metric(a in vec_of(5), b in vec_of(5), c in vec_of(5)) {
        let (ab, ba) = (distance(&a, &b).unwrap(), distance(&b, &a).unwrap());
        prop_assert_eq!(ab, ba);
        prop_assert!(ab >= 0.0);
        prop_assert_eq!(distance(&a, &a).unwrap(), 0.0);
        let (ac, cb) = (distance(&a, &c).unwrap(), distance(&c, &b).unwrap());
        prop_assert!(ab <= ac + cb + 1e-12);
    }

    #[test]
    fn hardened_negative_geometry(
        z in vec_of(4),
        zn in vec_of(4),
        frac in 0.01..0.99f64,
        lambda in 0.001..1.0f64,
    ) {
        let d = norm(&sub(&zn, &z));
        prop_assume!(d > 1e-3);
        let d_plus = frac * d;
        let h = augment_negative(&z, &zn, d_plus, lambda).unwrap();
        let dh = norm(&sub(&h, &z));
        let target = lambda * d + (1.0 - lambda) * d_plus;
        prop_assert!((dh - target).abs() < 1e-9);
        prop_assert!(d_plus - 1e-9 <= dh && dh <= d + 1e-9);
        // h − z is a nonnegative multiple of zn − z
        let (u, v) = (sub(&h, &z), sub(&zn, &z));
        let s = dh / d;
        let residual = norm(&u.iter().zip(&v).map(|(a, b)| a - s * b).collect::<Vec<_>>());
        prop_assert!(residual < 1e-9);
    }

    #[test]
    fn hardening_is_monotone_in_lambda(z in vec_of(3), zn in vec_of(3), l1 in 0.001..1.0f64, l2 in 0.001..1.0f64) {
        let d = norm(&sub(&zn, &z));
        prop_assume!(d > 1e-3);
        let (lo, hi) = if l1 <= l2 { (l1, l2) } else { (l2, l1) };
        let near = augment_negative(&z, &zn, 0.5 * d, lo).unwrap();
        let far = augment_negative(&z, &zn, 0.5 * d, hi).unwrap();
        prop_assert!(norm(&sub(&near, &z)) <= norm(&sub(&far, &z)) + 1e-12);
    }

    #[test]
    fn close_negatives_pass_through(z in vec_of(3), zn in vec_of(3), extra in 0.0..5.0f64, lambda in 0.001..1.0f64) {
        let d = norm(&sub(&zn, &z));
        let h = augment_negative(&z, &zn, d + extra + 1e-9, lambda).unwrap();
        prop_assert_eq!(h, zn);
    }

    #[test]
    fn schedule_is_monotone(alpha in 0.0..200.0f64, j1 in 1e-6..1e3f64, j2 in 1e-6..1e3f64, a2 in 0.0..200.0f64) {
        let lam = |alpha: f64, j: f64| pulling_lambda(&AugmentorState { alpha, j_avg: Some(j) });
        let (lo, hi) = if j1 <= j2 { (j1, j2) } else { (j2, j1) };
        prop_assert!(lam(alpha, lo) <= lam(alpha, hi));
        let (alo, ahi) = if alpha <= a2 { (alpha, a2) } else { (a2, alpha) };
        prop_assert!(lam(ahi, j1) <= lam(alo, j1));
        prop_assert!((LAMBDA_FLOOR..=1.0).contains(&lam(alpha, j1)));
    }

    #[test]
    fn metric_weight_is_monotone(beta in 1.0..1e5f64, b2 in 1.0..1e5f64, g1 in 0.0..1e6f64, g2 in 0.0..1e6f64) {
        let (lo, hi) = if g1 <= g2 { (g1, g2) } else { (g2, g1) };
        prop_assert!(metric_weight(lo, beta) <= metric_weight(hi, beta));
        let (blo, bhi) = if beta <= b2 { (beta, b2) } else { (b2, beta) };
        prop_assert!(metric_weight(g1, bhi) <= metric_weight(g1, blo));
        prop_assert!((0.0..=1.0).contains(&metric_weight(g1, beta)));
    }

    #[test]
    fn losses_are_invariant_to_rigid_motions(
        pts in points(6, 3),
        basis in points(3, 3),
        shift in vec_of(3),
        margin in 0.0..5.0f64,
    ) {
        let Some(q) = orthonormal(&basis) else { return Ok(()) };
        let moved: Vec<Vec<f64>> = pts
            .iter()
            .map(|p| (0..3).map(|i| q[i].iter().zip(p).map(|(a, b)| a * b).sum::<f64>() + shift[i]).collect())
            .collect();
        let (a, b) = (Matrix::from_rows(&pts).unwrap(), Matrix::from_rows(&moved).unwrap());
        let cfg = LossConfig { margin, npair_n: 3 };
        for batch in [triplet_batch(6), npair_batch(3)] {
            let (la, _) = batch_metric_loss(&a, &batch, &cfg).unwrap();
            let (lb, _) = batch_metric_loss(&b, &batch, &cfg).unwrap();
            prop_assert!((la - lb).abs() <= 1e-9 * la.abs().max(1.0), "{} vs {}", la, lb);
        }
    }

    #[test]
    fn recall_is_monotone_in_k(pts in points(12, 2), labels in prop::collection::vec(0usize..4, 12)) {
        let ks: Vec<usize> = (1..12).collect();
        let r = recall_at_k(&Matrix::from_rows(&pts).unwrap(), &labels, &ks).unwrap();
        for w in ks.windows(2) {
            prop_assert!(r[&w[0]] <= r[&w[1]]);
        }
        prop_assert!(r.values().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn recall_ignores_point_order(pts in points(10, 2), labels in prop::collection::vec(0usize..3, 10), perm in Just((0..10).collect::<Vec<usize>>()).prop_shuffle()) {
        let permuted: Vec<Vec<f64>> = perm.iter().map(|&i| pts[i].clone()).collect();
        let plabels: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
        let a = recall_at_k(&Matrix::from_rows(&pts).unwrap(), &labels, &[1, 3]).unwrap();
        let b = recall_at_k(&Matrix::from_rows(&permuted).unwrap(), &plabels, &[1, 3]).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn clustering_scores_ignore_cluster_names(
        assignment in prop::collection::vec(0usize..4, 2..30),
        seed_labels in prop::collection::vec(0usize..3, 30),
        rename in Just(vec![7usize, 3, 11, 0]).prop_shuffle(),
    ) {
        let labels = &seed_labels[..assignment.len()];
        let renamed: Vec<usize> = assignment.iter().map(|&c| rename[c]).collect();
        let (n1, n2) = (nmi(&assignment, labels).unwrap(), nmi(&renamed, labels).unwrap());
        prop_assert!((n1 - n2).abs() < 1e-12);
        prop_assert!((n1 - nmi(labels, &assignment).unwrap()).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&n1));
        let (f1, f2) = (pairwise_f1(&assignment, labels).unwrap(), pairwise_f1(&renamed, labels).unwrap());
        prop_assert_eq!(f1, f2);
        prop_assert!((0.0..=1.0).contains(&f1));
    }

    #[test]
    fn kmeans_output_is_a_fixed_point(pts in points(15, 2), k in 1usize..5, seed in any::<u64>()) {
        let m = Matrix::from_rows(&pts).unwrap();
        let km = kmeans(&m, k, seed).unwrap();
        prop_assert_eq!(km.assignment.len(), 15);
        prop_assert!(km.assignment.iter().all(|&a| a < k));
        prop_assert!(km.inertia >= 0.0);
        for (p, &a) in pts.iter().zip(&km.assignment) {
            let own = distance(p, km.centroids.row(a)).unwrap();
            for c in 0..k {
                prop_assert!(own <= distance(p, km.centroids.row(c)).unwrap() + 1e-9);
            }
        }
    }

    #[test]
    fn zero_shot_split_partitions_classes(classes in 2usize..60, fraction in 0.01..0.99f64, seed in any::<u64>()) {
        let labels: Vec<usize> = (0..classes).collect();
        let ds = Dataset::new(Matrix::zeros(classes, 1), labels).unwrap();
        let expected_train = (classes as f64 * fraction).ceil() as usize;
        match split_zero_shot(&ds, fraction, seed) {
            Ok(s) => {
                prop_assert!(s.train_classes.is_disjoint(&s.test_classes));
                let all: BTreeSet<usize> = s.train_classes.union(&s.test_classes).copied().collect();
                prop_assert_eq!(all, (0..classes).collect::<BTreeSet<_>>());
                prop_assert_eq!(s.train_classes.len(), expected_train);
                prop_assert!(!s.test_classes.is_empty());
            }
            Err(_) => prop_assert!(expected_train >= classes),
        }
    }

    #[test]
    fn dataset_csv_round_trip_is_lossless(
        values in prop::collection::vec(prop::num::f64::NORMAL | prop::num::f64::SUBNORMAL | prop::num::f64::ZERO, 12),
        labels in Just(vec![0usize, 1, 2, 0]).prop_shuffle(),
    ) {
        let ds = Dataset::new(Matrix::from_vec(4, 3, values).unwrap(), labels).unwrap();
        let back = parse_dataset_csv(&dataset_to_csv(&ds)).unwrap();
        for (a, b) in back.samples.as_slice().iter().zip(ds.samples.as_slice()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
        prop_assert_eq!(back.labels, ds.labels);
    }

    #[test]
    fn config_text_round_trip(
        alpha in 0.0..1e3f64,
        beta in 1e-3..1e6f64,
        margin in 0.0..10.0f64,
        epochs in 0usize..100,
        hidden in prop::collection::vec(1usize..512, 1..4),
        ks in prop::collection::vec(1usize..32, 1..6),
        fixed in prop::option::of(1e-3..10.0f64),
        npair in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let mut c = TrainConfig::for_loss(if npair { LossKind::Npair } else { LossKind::Triplet });
        c.alpha = alpha;
        c.beta = beta;
        c.margin = margin;
        c.epochs = epochs;
        c.extractor_hidden = hidden;
        c.ks = ks;
        c.seed = seed;
        c.reference_distance = fixed.map_or(ReferenceDistance::Positive, ReferenceDistance::Fixed);
        prop_assert_eq!(parse_config(&config_to_string(&c)).unwrap(), c);
    }
}
