mod common;

use std::collections::BTreeMap;

use ndarray::Array2;

use common::*;
use dsgeo::align::{align_directed, bootstrap_ci, AlignMode, Statistic};
use dsgeo::data::{symmetrize, DistanceKind, DistanceMatrix, TransferMatrix};
use dsgeo::distance::{distance_matrix, Metric, SwConfig};
use dsgeo::protocols::{
    augmentation_gain, kmedoids_select, random_baseline, rank_auxiliaries, select_source, subset_regret, SubsetScore,
};
use dsgeo::synth::{gen_library, gen_transfer_matrix, SynthSpec};

#[test]
fn three_cluster_subset_matches_exhaustive_search() {
    let pts = Array2::from_shape_vec(
        (7, 2),
        vec![0.0, 0.0, 0.3, 0.1, 10.0, 0.0, 10.2, 0.4, 9.8, -0.2, 0.0, 10.0, 0.5, 10.3],
    )
    .unwrap();
    let d = euclidean_matrix(&pts);
    let res = kmedoids_select(&d, 3, 0).unwrap();
    assert!((res.objective - exhaustive_kmedoids(d.values(), 3)).abs() < 1e-12);
    let mut clusters: Vec<usize> = res.medoids.iter().map(|&m| if m < 2 { 0 } else if m < 5 { 1 } else { 2 }).collect();
    clusters.sort();
    assert_eq!(clusters, vec![0, 1, 2]);
}

#[test]
fn random_baseline_draws_uniformly() {
    let ids = ids(6);
    let trials = 6000;
    let draws = random_baseline(&ids, 2, trials, 17).unwrap();
    assert_eq!(draws, random_baseline(&ids, 2, trials, 17).unwrap());
    let mut freq: BTreeMap<&str, usize> = BTreeMap::new();
    for d in &draws {
        assert_eq!(d.len(), 2);
        assert_ne!(d[0], d[1]);
        for id in d {
            *freq.entry(id.as_str()).or_default() += 1;
        }
    }
    // each id appears with probability 1/3 per trial
    let p: f64 = 1.0 / 3.0;
    let sd = (trials as f64 * p * (1.0 - p)).sqrt();
    for (id, &c) in &freq {
        assert!((c as f64 - trials as f64 * p).abs() < 4.0 * sd, "{id}: {c}");
    }
    assert_eq!(random_baseline(&ids, 6, 1, 0).unwrap()[0].len(), 6);
}

#[test]
fn planted_augmentation_gains_follow_distance() {
    let mut r = rng(5);
    let pts = normal_matrix(&mut r, 6, 2, 1.0);
    let d = euclidean_matrix(&pts);
    let ranked = rank_auxiliaries(&d, "s0", 5).unwrap();
    let dist: Vec<f64> = ranked.iter().map(|x| x.distance).collect();
    let augmented: Vec<f64> = dist.iter().map(|v| 0.9 - 0.1 * v.sqrt()).collect();
    let report = augmentation_gain(&augmented, 0.75, Some(&dist)).unwrap();
    assert_eq!(report.spearman_vs_neg_distance, Some(1.0));
    assert_eq!(
        ranked,
        select_source(&d, "s0", 5).unwrap(),
        "augmentation ranking shares the source-selection formula"
    );
}

#[test]
fn regret_on_planted_universe() {
    let mut r = rng(8);
    let d = euclidean_matrix(&planted_points(&mut r, 6, 2));
    let sel = kmedoids_select(&d, 2, 0).unwrap();
    // score = -objective, so the objective order is the score order
    let universe: Vec<SubsetScore> = (0..6)
        .flat_map(|a| (a + 1..6).map(move |b| (a, b)))
        .map(|(a, b)| SubsetScore {
            ids: vec![format!("s{a}"), format!("s{b}")],
            score: -dsgeo::protocols::kmedoids_objective(d.values(), &[a, b]),
        })
        .collect();
    let report = subset_regret(&d, &universe, &sel.ids, true).unwrap();
    assert_eq!(report.regret, 0.0);
    assert!((report.kendall_tau - 1.0).abs() < 1e-12);
}

#[test]
fn antisymmetric_transfer_hurts_directed_alignment() {
    for seed in 0..5u64 {
        let mut r = rng(seed);
        let d = euclidean_matrix(&normal_matrix(&mut r, 6, 2, 1.0));
        let anti = normal_matrix(&mut r, 6, 6, 0.5);
        let raw = d.values() * 0.1 + (&anti - &anti.t()) + 2.0;
        let p = TransferMatrix::new(ids(6), raw).unwrap();
        let raw_corr = align_directed(&d, &p).unwrap().spearman;
        let sym_corr = align_directed(&d, &symmetrize(&p)).unwrap().spearman;
        assert!(raw_corr <= sym_corr, "seed {seed}: {raw_corr} vs {sym_corr}");
    }
}

#[test]
fn bootstrap_spread_grows_with_transfer_noise() {
    let spec = SynthSpec::default();
    let lib = gen_library(&spec).unwrap();
    let d = distance_matrix(&lib.sets, Metric::Sw, &SwConfig::default()).unwrap();
    let spread = |noise: f64| {
        let p = gen_transfer_matrix(&lib.g, &spec.link, noise, 0).unwrap();
        bootstrap_ci(&d, &p, Statistic::Spearman, AlignMode::Symmetric, 200, 3).unwrap()
    };
    let clean = spread(0.0);
    let noisy = spread(0.5);
    assert!(clean.mean > 0.9, "{clean:?}");
    assert!(clean.std < noisy.std, "{clean:?} vs {noisy:?}");
}

#[test]
fn directed_source_selection_reads_source_rows() {
    let v = Array2::from_shape_vec((3, 3), vec![0.0, 0.9, 0.2, 0.1, 0.0, 0.8, 0.7, 0.3, 0.0]).unwrap();
    let d = DistanceMatrix::new(ids(3), v, DistanceKind::Directed, "dsw").unwrap();
    // candidates for target s0: s1 -> s0 = 0.1, s2 -> s0 = 0.7
    assert_eq!(select_source(&d, "s0", 1).unwrap()[0].id, "s1");
}
