//! Label corruption applied to the distance computation only: random label
//! flips, sample drops, and label stripping, plus a sweep harness that
//! rebuilds the distance matrix under each corruption and re-scores it
//! against the clean transfer matrix.

use std::collections::BTreeSet;

use rand::seq::index;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::align::{align_directed, align_symmetric, Alignment};
use crate::data::{EmbeddingSet, TransferMatrix};
use crate::directed::{directed_distance_matrix, DswConfig};
use crate::distance::{distance_matrix, Metric, SwConfig};
use crate::error::{Error, Result};
use crate::seed;

/// With probability `eta` replace each label by a uniform draw from the other
/// classes in `classes`.
pub fn flip_labels_among(set: &EmbeddingSet, eta: f64, classes: &[usize], seed: u64) -> Result<EmbeddingSet> {
    let labels = set.labels().ok_or_else(|| Error::Unlabeled(set.id().into()))?;
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::InvalidConfig(format!("eta {eta} not in [0, 1]")));
    }
    let classes: Vec<usize> = classes.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    if classes.len() < 2 {
        return Err(Error::TooFewClasses {
            needed: 2,
            found: classes.len(),
        });
    }
    let mut rng = seed::rng(seed::derive(seed, &[b"flip", set.id().as_bytes()]));
    let flipped = labels
        .iter()
        .map(|&y| {
            if rng.random::<f64>() >= eta {
                return y;
            }
            let others: Vec<usize> = classes.iter().copied().filter(|&c| c != y).collect();
            others[rng.random_range(0..others.len())]
        })
        .collect();
    set.with_labels(flipped)
}

/// [`flip_labels_among`] over the classes present in `set`.
pub fn flip_labels(set: &EmbeddingSet, eta: f64, seed: u64) -> Result<EmbeddingSet> {
    let classes: Vec<usize> = set.classes().collect();
    flip_labels_among(set, eta, &classes, seed)
}

/// Remove floor(rho * n) samples chosen uniformly; survivors keep their order
/// and values.
pub fn drop_labels(set: &EmbeddingSet, rho: f64, seed: u64) -> Result<EmbeddingSet> {
    if !set.is_labeled() {
        return Err(Error::Unlabeled(set.id().into()));
    }
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::InvalidConfig(format!("rho {rho} not in [0, 1]")));
    }
    let n = set.n();
    let drop = (rho * n as f64).floor() as usize;
    if drop == 0 {
        return Ok(set.clone());
    }
    if drop >= n {
        return Err(Error::TooFew { needed: 1, got: 0 });
    }
    let mut rng = seed::rng(seed::derive(seed, &[b"drop", set.id().as_bytes()]));
    let mut keep = index::sample(&mut rng, n, n - drop).into_vec();
    keep.sort_unstable();
    set.subset(&keep)
}

/// Labels removed; distances then take the label-agnostic path.
pub fn strip_labels(set: &EmbeddingSet) -> EmbeddingSet {
    set.without_labels()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionMode {
    Noise,
    Drop,
    Strip,
}

impl CorruptionMode {
    pub fn name(self) -> &'static str {
        match self {
            CorruptionMode::Noise => "noise",
            CorruptionMode::Drop => "drop",
            CorruptionMode::Strip => "strip",
        }
    }
}

/// Corrupt every dataset of a library. Flips draw from the library-wide class set.
pub fn corrupt_library(library: &[EmbeddingSet], mode: CorruptionMode, level: f64, seed: u64) -> Result<Vec<EmbeddingSet>> {
    match mode {
        CorruptionMode::Noise => {
            let classes: Vec<usize> = library
                .iter()
                .flat_map(|s| s.classes())
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect();
            library.iter().map(|s| flip_labels_among(s, level, &classes, seed)).collect()
        }
        CorruptionMode::Drop => library.iter().map(|s| drop_labels(s, level, seed)).collect(),
        CorruptionMode::Strip => Ok(library.iter().map(strip_labels).collect()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub cells: Vec<(CorruptionMode, f64)>,
    pub trials: usize,
    pub metric: Metric,
    pub sw: SwConfig,
    /// Also score the directed distance (skipped for `strip`).
    pub directed: Option<DswConfig>,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    fn of(v: &[f64]) -> Self {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let std = if v.len() > 1 {
            (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub mode: CorruptionMode,
    pub level: f64,
    pub trials: usize,
    pub pearson: MeanStd,
    pub spearman: MeanStd,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub directed_pearson: Option<MeanStd>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub directed_spearman: Option<MeanStd>,
}

struct Trial {
    sym: Alignment,
    dir: Option<Alignment>,
}

fn run_trial(library: &[EmbeddingSet], p: &TransferMatrix, mode: CorruptionMode, level: f64, cfg: &SweepConfig, trial_seed: u64) -> Result<Trial> {
    let corrupted = corrupt_library(library, mode, level, trial_seed)?;
    let d = distance_matrix(&corrupted, cfg.metric, &cfg.sw)?;
    let sym = align_symmetric(&d, p)?;
    let dir = match (&cfg.directed, mode) {
        (Some(dsw), CorruptionMode::Noise | CorruptionMode::Drop) => {
            let dd = directed_distance_matrix(&corrupted, &cfg.sw, dsw)?;
            Some(align_directed(&dd, p)?)
        }
        _ => None,
    };
    Ok(Trial { sym, dir })
}

/// Alignment under each (mode, level) cell, mean and std over trials. The
/// transfer matrix is always the clean one.
pub fn corruption_sweep(library: &[EmbeddingSet], p: &TransferMatrix, cfg: &SweepConfig) -> Result<Vec<SweepRow>> {
    if cfg.trials == 0 {
        return Err(Error::InvalidConfig("trials must be >= 1".into()));
    }
    cfg.cells
        .par_iter()
        .map(|&(mode, level)| {
            let trials: Vec<Trial> = (0..cfg.trials)
                .into_par_iter()
                .map(|t| {
                    let s = seed::derive(cfg.seed, &[b"trial", &(t as u64).to_le_bytes()]);
                    run_trial(library, p, mode, level, cfg, s)
                })
                .collect::<Result<_>>()?;
            let pick = |f: &dyn Fn(&Alignment) -> f64, dir: bool| -> Option<MeanStd> {
                let v: Vec<f64> = trials
                    .iter()
                    .filter_map(|t| if dir { t.dir.as_ref() } else { Some(&t.sym) })
                    .map(f)
                    .collect();
                (!v.is_empty()).then(|| MeanStd::of(&v))
            };
            Ok(SweepRow {
                mode,
                level,
                trials: cfg.trials,
                pearson: pick(&|a| a.pearson, false).expect("trials >= 1"),
                spearman: pick(&|a| a.spearman, false).expect("trials >= 1"),
                directed_pearson: pick(&|a| a.pearson, true),
                directed_spearman: pick(&|a| a.spearman, true),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn set(n: usize, classes: usize) -> EmbeddingSet {
        let z = Array2::from_shape_fn((n, 2), |(i, j)| (i * 2 + j) as f64);
        EmbeddingSet::labeled("a", z, (0..n).map(|i| i % classes).collect()).unwrap()
    }

    #[test]
    fn flip_examples() {
        let s = set(100, 2);
        assert_eq!(flip_labels(&s, 0.0, 1).unwrap(), s);
        let all = flip_labels(&s, 1.0, 1).unwrap();
        for (a, b) in s.labels().unwrap().iter().zip(all.labels().unwrap()) {
            assert_ne!(a, b);
        }
        let s3 = set(300, 3);
        let f = flip_labels(&s3, 1.0, 2).unwrap();
        assert!(f.labels().unwrap().iter().zip(s3.labels().unwrap()).all(|(a, b)| a != b));
        assert_eq!(f.z(), s3.z());
        let one = EmbeddingSet::labeled("o", Array2::zeros((3, 1)), vec![0, 0, 0]).unwrap();
        assert!(matches!(flip_labels(&one, 0.5, 0), Err(Error::TooFewClasses { .. })));
        assert!(flip_labels(&s.without_labels(), 0.5, 0).is_err());
    }

    #[test]
    fn drop_examples() {
        let s = set(100, 2);
        assert_eq!(drop_labels(&s, 0.0, 1).unwrap(), s);
        let d = drop_labels(&s, 0.5, 1).unwrap();
        assert_eq!(d.n(), 50);
        // survivors are bit-identical rows of the original
        for row in d.z().rows() {
            assert!(s.z().rows().into_iter().any(|r| r == row));
        }
        assert_eq!(drop_labels(&s, 0.5, 1).unwrap(), d);
    }

    #[test]
    fn strip_examples() {
        let s = set(10, 2);
        let t = strip_labels(&s);
        assert!(!t.is_labeled());
        assert_eq!(t.z(), s.z());
        assert_eq!(strip_labels(&t), t);
    }
}
