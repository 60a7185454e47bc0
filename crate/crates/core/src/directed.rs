//! Directed source -> target distance: per-class sliced W2 weighted by the
//! source's class priors, plus a one-sided log spread-ratio penalty that fires
//! when a target class is broader than the source's.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{mean_row, DistanceMatrix, EmbeddingSet};
use crate::distance::{build_directed, metric_tag, per_class_sw, Metric, SwConfig};
use crate::error::{Error, Result};

/// Floor applied to spreads inside the log ratio.
pub const SPREAD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct ClassStats {
    /// Class -> fraction of samples.
    pub priors: BTreeMap<usize, f64>,
    /// Class -> root mean squared distance to the class centroid.
    pub spreads: BTreeMap<usize, f64>,
}

pub fn class_stats(set: &EmbeddingSet) -> Result<ClassStats> {
    if !set.is_labeled() {
        return Err(Error::Unlabeled(set.id().into()));
    }
    let n = set.n() as f64;
    let mut priors = BTreeMap::new();
    let mut spreads = BTreeMap::new();
    for (&c, rows) in set.class_index() {
        let z = set.rows(rows);
        let centroid = mean_row(&z);
        let msd = z
            .rows()
            .into_iter()
            .map(|r| {
                let d = &r - &centroid;
                d.dot(&d)
            })
            .sum::<f64>()
            / rows.len() as f64;
        priors.insert(c, rows.len() as f64 / n);
        spreads.insert(c, msd.sqrt());
    }
    Ok(ClassStats { priors, spreads })
}

/// max(0, log(sigma_tgt / sigma_src)), with both spreads floored at
/// [`SPREAD_FLOOR`]; zero when both are zero.
pub fn spread_penalty(sigma_src: f64, sigma_tgt: f64) -> f64 {
    if sigma_src <= 0.0 && sigma_tgt <= 0.0 {
        return 0.0;
    }
    let ratio = sigma_tgt.max(SPREAD_FLOOR) / sigma_src.max(SPREAD_FLOOR);
    ratio.ln().max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DswConfig {
    pub alpha: f64,
    /// Rescale source priors to sum to one over the shared classes.
    pub renormalize_priors: bool,
}

impl Default for DswConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            renormalize_priors: false,
        }
    }
}

/// DSW(source -> target) = sum over shared classes c of
/// prior_src(c) * [ sw_c(source, target) + alpha * penalty(spread_src(c), spread_tgt(c)) ].
pub fn dsw(source: &EmbeddingSet, target: &EmbeddingSet, sw: &SwConfig, cfg: &DswConfig) -> Result<f64> {
    sw.validate()?;
    if !(cfg.alpha >= 0.0 && cfg.alpha.is_finite()) {
        return Err(Error::InvalidConfig(format!("alpha must be >= 0, got {}", cfg.alpha)));
    }
    let src = class_stats(source)?;
    let tgt = class_stats(target)?;
    let shared = source.shared_classes(target);
    if shared.is_empty() {
        return Err(Error::NoSharedClasses(source.id().into(), target.id().into()));
    }
    let mass: f64 = if cfg.renormalize_priors {
        shared.iter().map(|c| src.priors[c]).sum()
    } else {
        1.0
    };
    let mut total = 0.0;
    for &c in &shared {
        let d = per_class_sw(source, target, c, sw)?;
        let penalty = spread_penalty(src.spreads[&c], tgt.spreads[&c]);
        total += src.priors[&c] / mass * (d + cfg.alpha * penalty);
    }
    Ok(total)
}

pub fn dsw_tag(sw: &SwConfig, cfg: &DswConfig) -> String {
    format!(
        "dsw/a{}/rn{}/{}",
        cfg.alpha,
        cfg.renormalize_priors as u8,
        metric_tag(Metric::Sw, sw)
    )
}

/// Directed matrix with `values[i][j] = dsw(library[i] -> library[j])`.
pub fn directed_distance_matrix(library: &[EmbeddingSet], sw: &SwConfig, cfg: &DswConfig) -> Result<DistanceMatrix> {
    if library.len() < 2 {
        return Err(Error::TooFew {
            needed: 2,
            got: library.len(),
        });
    }
    let ids = library.iter().map(|s| s.id().to_string()).collect();
    build_directed(ids, dsw_tag(sw, cfg), |i, j| dsw(&library[i], &library[j], sw, cfg))
}
