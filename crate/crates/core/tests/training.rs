mod common;

use ndarray::Array2;

use common::*;
use dsgeo::cde::{composite_step, evaluate, train, Ablation, CdeConfig};
use dsgeo::data::EmbeddingSet;
use dsgeo::distance::SwConfig;
use dsgeo::encoder::{apply_head, stochastic_views, Activation, HeadInit, MetricHead, ViewConfig};
use dsgeo::synth::{gen_library, gen_transfer_matrix, Distortion, SynthSpec};

fn batch(seed: u64) -> (Vec<EmbeddingSet>, Array2<f64>) {
    let mut r = rng(seed);
    let sets: Vec<_> = (0..4)
        .map(|i| labeled_set(&mut r, &format!("t{i}"), 24, 4, 2, 0.5 * i as f64))
        .collect();
    let p = Array2::from_shape_fn((4, 4), |(i, j)| 0.05 + 0.03 * (i as f64 - j as f64).abs() + 0.01 * i as f64);
    (sets, p)
}

fn deterministic_cfg() -> CdeConfig {
    CdeConfig {
        view: ViewConfig {
            dropout_p: 0.0,
            noise_sigma: 0.0,
            seed: 0,
        },
        sw: SwConfig {
            projections: 8,
            per_class_cap: 20,
            ..SwConfig::default()
        },
        samples_per_dataset: 24,
        ..CdeConfig::default()
    }
}

#[test]
fn composite_gradient_matches_finite_differences() {
    let (sets, p) = batch(11);
    // Views are seeded per step, so the loss is a deterministic function of
    // the parameters. The distillation teacher is a per-step constant, which a
    // finite difference would perturb, so that term is left out here.
    let mut cfg = CdeConfig {
        view: ViewConfig::default(),
        ..deterministic_cfg()
    };
    cfg.lambdas.distill = 0.0;
    let head = MetricHead::init(&[4, 6, 4], Activation::Tanh, HeadInit::Random, 3).unwrap();
    let (_, grad) = composite_step(&head, &sets, &p, &cfg, 5).unwrap();
    let theta = head.to_flat();
    let loss = |t: &[f64]| {
        let mut h = head.clone();
        h.set_flat(t).unwrap();
        composite_step(&h, &sets, &p, &cfg, 5).unwrap().0.total
    };
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for i in 0..theta.len() {
        let mut up = theta.clone();
        up[i] += h;
        let mut down = theta.clone();
        down[i] -= h;
        let numeric = (loss(&up) - loss(&down)) / (2.0 * h);
        worst = worst.max((grad[i] - numeric).abs() / numeric.abs().max(1.0));
    }
    assert!(worst < 1e-4, "worst relative error {worst}");
}

#[test]
fn disabled_terms_contribute_nothing() {
    let (sets, p) = batch(12);
    let cfg = deterministic_cfg();
    let head = MetricHead::default_for(4, 1).unwrap();
    let off = CdeConfig {
        ablation: Ablation {
            corr: false,
            distill: false,
            ..Ablation::default()
        },
        ..cfg.clone()
    };
    let mut zeroed = cfg.clone();
    zeroed.lambdas.corr = 0.0;
    zeroed.lambdas.distill = 0.0;
    let (b_off, g_off) = composite_step(&head, &sets, &p, &off, 2).unwrap();
    let (b_zero, g_zero) = composite_step(&head, &sets, &p, &zeroed, 2).unwrap();
    assert_eq!(b_off.corr, 0.0);
    assert_eq!(b_off.distill, 0.0);
    assert_eq!(b_off.total, b_zero.total);
    assert_eq!(g_off, g_zero);
    let (b_on, g_on) = composite_step(&head, &sets, &p, &cfg, 2).unwrap();
    assert!(b_on.corr > 0.0 && b_on.distill > 0.0);
    assert_ne!(g_on, g_off);
}

#[test]
fn training_is_bit_reproducible() {
    let (sets, p) = batch(13);
    let cfg = CdeConfig {
        epochs: 3,
        batch_datasets: 3,
        samples_per_dataset: 16,
        ..CdeConfig::default()
    };
    let head = MetricHead::default_for(4, 0).unwrap();
    let p = dsgeo::data::TransferMatrix::new(sets.iter().map(|s| s.id().to_string()).collect(), p).unwrap();
    let (a, log_a) = train(&sets, &p, &head, &cfg).unwrap();
    let (b, log_b) = train(&sets, &p, &head, &cfg).unwrap();
    let bits = |h: &MetricHead| h.to_flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
    assert_eq!(log_a, log_b);
    assert!(log_a.iter().all(|s| s.grad_norm.is_finite()));
}

#[test]
fn loss_falls_over_first_ten_epochs() {
    let mut falling = 0;
    let mut seen = Vec::new();
    for seed in 0..10u64 {
        let spec = SynthSpec {
            seed,
            walk_persistence: 0.5,
            samples_per_dataset: 300,
            distortion: Distortion::Linear {
                scale_min: 0.03,
                scale_max: 1.0 / 0.03,
            },
            ..SynthSpec::default()
        };
        let lib = gen_library(&spec).unwrap();
        let p = gen_transfer_matrix(&lib.g, &spec.link, 0.0, seed).unwrap();
        let cfg = CdeConfig {
            seed,
            epochs: 10,
            lr: 0.01,
            ..CdeConfig::default()
        };
        let head = MetricHead::default_for(spec.dim, seed).unwrap();
        let before = evaluate(&lib.sets, &p, &head, &cfg).unwrap().total;
        let (trained, _) = train(&lib.sets, &p, &head, &cfg).unwrap();
        let after = evaluate(&lib.sets, &p, &trained, &cfg).unwrap().total;
        if after < before {
            falling += 1;
        }
        seen.push((before, after));
    }
    assert!(falling >= 9, "{seen:?}");
}

#[test]
fn inverted_dropout_is_unbiased() {
    let head = MetricHead::init(&[3, 8, 2], Activation::Relu, HeadInit::Random, 9).unwrap();
    let z = Array2::from_shape_vec((1, 3), vec![0.8, -0.4, 1.2]).unwrap();
    let exact = apply_head(&head, &z).unwrap();
    let n = 10_000;
    let mut sum = Array2::<f64>::zeros((1, 2));
    let mut sq = Array2::<f64>::zeros((1, 2));
    for s in 0..n / 2 {
        let cfg = ViewConfig {
            dropout_p: 0.5,
            noise_sigma: 0.0,
            seed: s as u64,
        };
        let (a, b) = stochastic_views(&head, &z, &cfg).unwrap();
        for v in [a, b] {
            sum += &v;
            sq += &v.mapv(|x| x * x);
        }
    }
    let nf = n as f64;
    for k in 0..2 {
        let mean = sum[[0, k]] / nf;
        let var = sq[[0, k]] / nf - mean * mean;
        let se = (var / nf).sqrt();
        assert!((mean - exact[[0, k]]).abs() <= 3.0 * se, "unit {k}: {mean} vs {}", exact[[0, k]]);
    }
}

#[test]
fn forward_pass_matches_hand_computation() {
    let head = MetricHead::init(&[4, 5, 3], Activation::Tanh, HeadInit::Random, 4).unwrap();
    let mut r = rng(4);
    let z = normal_matrix(&mut r, 3, 4, 1.0);
    let out = apply_head(&head, &z).unwrap();
    let [l1, l2] = head.layers() else { panic!("two layers") };
    for i in 0..3 {
        for o in 0..3 {
            let mut acc = l2.b[o];
            for h in 0..5 {
                let mut pre = l1.b[h];
                for c in 0..4 {
                    pre += z[[i, c]] * l1.w[[c, h]];
                }
                acc += pre.tanh() * l2.w[[h, o]];
            }
            assert!((out[[i, o]] - acc).abs() < 1e-12);
        }
    }
}
