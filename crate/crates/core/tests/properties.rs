mod common;

use ndarray::Array2;
use proptest::prelude::*;

use common::*;
use dsgeo::align::{align_symmetric, kendall_tau, pearson, spearman};
use dsgeo::cde::clip_global_norm;
use dsgeo::data::{
    load_transfer_matrix, symmetrize, upper_triangle, write_transfer_matrix, DistanceKind, DistanceMatrix,
    EmbeddingSet, TransferMatrix,
};
use dsgeo::directed::{dsw, DswConfig};
use dsgeo::distance::{pair_distance, Metric, SwConfig};
use dsgeo::encoder::{dataset_centroid, EncoderSpec};
use dsgeo::protocols::{gap_recovered, select_source};
use dsgeo::robustness::{corrupt_library, CorruptionMode};

fn square(n: usize) -> impl Strategy<Value = Array2<f64>> {
    proptest::collection::vec(0.0f64..1.0, n * n).prop_map(move |v| Array2::from_shape_vec((n, n), v).unwrap())
}

fn transfer(n: usize) -> impl Strategy<Value = TransferMatrix> {
    square(n).prop_map(move |m| TransferMatrix::new(ids(n), m).unwrap())
}

fn labeled_pair() -> impl Strategy<Value = (EmbeddingSet, EmbeddingSet)> {
    (2usize..5, 4usize..30, 4usize..30, any::<u64>()).prop_map(|(d, na, nb, s)| {
        let mut r = rng(s);
        (labeled_set(&mut r, "a", na, d, 2, 0.0), labeled_set(&mut r, "b", nb, d, 2, 1.0))
    })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn symmetrize_is_idempotent(p in (2usize..7).prop_flat_map(transfer)) {
        let once = symmetrize(&p);
        prop_assert_eq!(symmetrize(&once), once);
    }

    #[test]
    fn symmetrized_upper_triangle_is_mean(p in (2usize..7).prop_flat_map(transfer)) {
        let s = upper_triangle(symmetrize(&p).values()).unwrap();
        let a = upper_triangle(p.values()).unwrap();
        let b = upper_triangle(&p.values().t().to_owned()).unwrap();
        for ((s, a), b) in s.iter().zip(&a).zip(&b) {
            prop_assert!((s - 0.5 * (a + b)).abs() <= 1e-15);
        }
    }

    #[test]
    fn transfer_matrix_round_trip(p in (1usize..6).prop_flat_map(transfer)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        write_transfer_matrix(&path, &p).unwrap();
        prop_assert_eq!(load_transfer_matrix(&path, p.ids()).unwrap(), p);
    }

    #[test]
    fn sw_is_symmetric_and_zero_on_self((a, b) in labeled_pair(), seed in any::<u64>(), aware in any::<bool>()) {
        let cfg = SwConfig { seed, label_aware: aware, projections: 16, ..SwConfig::default() };
        let ab = pair_distance(&a, &b, Metric::Sw, &cfg).unwrap();
        let ba = pair_distance(&b, &a, Metric::Sw, &cfg).unwrap();
        prop_assert_eq!(ab.to_bits(), ba.to_bits());
        prop_assert!(ab >= 0.0);
        let twin = a.renamed("twin").unwrap();
        prop_assert_eq!(pair_distance(&a, &twin, Metric::Sw, &cfg).unwrap(), 0.0);
        prop_assert_eq!(pair_distance(&a, &a, Metric::Centroid, &cfg).unwrap(), 0.0);
    }

    #[test]
    fn distances_are_scale_equivariant((a, b) in labeled_pair(), s in 0.1f64..10.0) {
        let cfg = SwConfig { projections: 16, ..SwConfig::default() };
        let scaled = |e: &EmbeddingSet| e.with_embeddings(e.z() * s).unwrap();
        for metric in [Metric::Sw, Metric::Centroid] {
            let base = pair_distance(&a, &b, metric, &cfg).unwrap();
            let after = pair_distance(&scaled(&a), &scaled(&b), metric, &cfg).unwrap();
            prop_assert!((after - s * base).abs() <= 1e-6 * (s * base).max(1e-12));
        }
    }

    #[test]
    fn dsw_nonnegative_and_nondecreasing_in_alpha((a, b) in labeled_pair(), a1 in 0.0f64..3.0, a2 in 0.0f64..3.0) {
        let sw = SwConfig { projections: 16, ..SwConfig::default() };
        let (lo, hi) = if a1 <= a2 { (a1, a2) } else { (a2, a1) };
        let at = |alpha| dsw(&a, &b, &sw, &DswConfig { alpha, ..DswConfig::default() }).unwrap();
        prop_assert!(at(lo) >= 0.0);
        prop_assert!(at(hi) >= at(lo));
        prop_assert_eq!(dsw(&a, &a.renamed("a").unwrap(), &sw, &DswConfig::default()).unwrap(), 0.0);
    }

    #[test]
    fn dsw_ignores_consistent_label_permutation((a, b) in labeled_pair()) {
        let sw = SwConfig { projections: 16, ..SwConfig::default() };
        let swap = |e: &EmbeddingSet| e.with_labels(e.labels().unwrap().iter().map(|&y| 1 - y).collect()).unwrap();
        let base = dsw(&a, &b, &sw, &DswConfig::default()).unwrap();
        let perm = dsw(&swap(&a), &swap(&b), &sw, &DswConfig::default()).unwrap();
        prop_assert!((base - perm).abs() <= 1e-12 * base.max(1.0));
    }

    #[test]
    fn toy_encoder_is_linear(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut r = rng(seed);
        let enc = EncoderSpec::toy_linear(5, 3, seed).unwrap();
        let x = normal_matrix(&mut r, 7, 5, 1.0);
        let y = normal_matrix(&mut r, 7, 5, 1.0);
        let lhs = enc.encode(&(&x * a + &y * b)).unwrap();
        let rhs = enc.encode(&x).unwrap() * a + enc.encode(&y).unwrap() * b;
        let scale = rhs.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        for (l, r) in lhs.iter().zip(&rhs) {
            prop_assert!((l - r).abs() <= 1e-6 * scale);
        }
    }

    #[test]
    fn centroid_has_unit_norm(seed in any::<u64>(), n in 1usize..20, d in 1usize..6) {
        let mut r = rng(seed);
        let z = normal_matrix(&mut r, n, d, 2.0) + 0.5;
        if let Ok(c) = dataset_centroid(&z) {
            prop_assert!((c.dot(&c).sqrt() - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn corruption_leaves_input_untouched(seed in any::<u64>(), level in 0.0f64..0.9) {
        let mut r = rng(seed);
        let lib: Vec<_> = (0..3).map(|i| labeled_set(&mut r, &format!("x{i}"), 20, 3, 3, 0.0)).collect();
        let before = lib.clone();
        for mode in [CorruptionMode::Noise, CorruptionMode::Drop, CorruptionMode::Strip] {
            let a = corrupt_library(&lib, mode, level, seed).unwrap();
            let b = corrupt_library(&lib, mode, level, seed).unwrap();
            prop_assert_eq!(&a, &b);
            for (orig, new) in lib.iter().zip(&a) {
                if mode == CorruptionMode::Noise {
                    prop_assert_eq!(orig.n(), new.n());
                }
            }
        }
        prop_assert_eq!(lib, before);
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 256, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn correlations_negate_under_reflection(x in proptest::collection::vec(-50i32..50, 3..30), shift in -5.0f64..5.0) {
        let x: Vec<f64> = x.into_iter().map(f64::from).collect();
        let y: Vec<f64> = x.iter().enumerate().map(|(i, v)| v * 0.5 + (i % 7) as f64 + shift).collect();
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        if let (Ok(a), Ok(b)) = (pearson(&x, &y), pearson(&neg, &y)) {
            prop_assert!((a + b).abs() <= 1e-12);
        }
        if let (Ok(a), Ok(b)) = (spearman(&x, &y), spearman(&neg, &y)) {
            prop_assert!((a + b).abs() <= 1e-12);
        }
        if let (Ok(a), Ok(b)) = (kendall_tau(&x, &y), kendall_tau(&neg, &y)) {
            prop_assert!((a + b).abs() <= 1e-12);
        }
    }

    #[test]
    fn align_symmetric_ignores_dataset_order(n in 3usize..8, seed in any::<u64>()) {
        let mut r = rng(seed);
        let pts = normal_matrix(&mut r, n, 2, 1.0);
        let d = euclidean_matrix(&pts);
        let p = TransferMatrix::new(ids(n), d.values() * 0.1 + normal_matrix(&mut r, n, n, 0.01).mapv(f64::abs)).unwrap();
        let mut order = ids(n);
        order.reverse();
        order.rotate_left(seed as usize % n);
        let a = align_symmetric(&d, &p).unwrap();
        let b = align_symmetric(&d.permuted(&order).unwrap(), &p.permuted(&order).unwrap()).unwrap();
        prop_assert!((a.pearson - b.pearson).abs() <= 1e-12);
        prop_assert_eq!(a.spearman, b.spearman);
        prop_assert_eq!(a.kendall, b.kendall);
    }

    #[test]
    fn select_source_depends_only_on_order(n in 3usize..9, seed in any::<u64>(), k in 1usize..3) {
        let mut r = rng(seed);
        let d = euclidean_matrix(&normal_matrix(&mut r, n, 3, 1.0));
        let warped = DistanceMatrix::new(ids(n), d.values().mapv(|v| (v * 3.0).exp() - 1.0 + v.powi(3)), DistanceKind::Symmetric, "warped").unwrap();
        let target = format!("s{}", seed as usize % n);
        let a: Vec<String> = select_source(&d, &target, k.min(n - 1)).unwrap().into_iter().map(|x| x.id).collect();
        let b: Vec<String> = select_source(&warped, &target, k.min(n - 1)).unwrap().into_iter().map(|x| x.id).collect();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn gap_recovered_is_affine_invariant(
        random in 0.0f64..1.0, gap in 0.01f64..1.0, frac in -2.0f64..1.0,
        scale in 0.01f64..100.0, offset in -100.0f64..100.0,
    ) {
        let oracle = random + gap;
        let picked = random + frac * gap;
        let base = gap_recovered(picked, random, oracle, true).unwrap();
        let moved = gap_recovered(scale * picked + offset, scale * random + offset, scale * oracle + offset, true).unwrap();
        prop_assert!((base - moved).abs() <= 1e-9);
        prop_assert!(base <= 1.0 + 1e-12);
        let as_error = gap_recovered(1.0 - picked, 1.0 - random, 1.0 - oracle, false).unwrap();
        prop_assert!((base - as_error).abs() <= 1e-9);
    }

    #[test]
    fn clipping_bounds_the_norm(g in proptest::collection::vec(-100.0f64..100.0, 1..50), max in 0.01f64..10.0) {
        let mut g = g;
        let before = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        let reported = clip_global_norm(&mut g, max);
        let after = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!((reported - before).abs() <= 1e-12 * before.max(1.0));
        prop_assert!(after <= max + 1e-9);
        if before <= max {
            prop_assert!((after - before).abs() <= 1e-12);
        }
    }
}
