//! Dataset-level decision protocols: source selection, auxiliary ranking for
//! augmentation, and budgeted subset selection, with their scoring against
//! measured transfer.

mod kmedoids;

pub use kmedoids::{kmedoids_select, objective as kmedoids_objective, KMedoidsResult};

use std::collections::BTreeSet;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::align::{kendall_tau, spearman};
use crate::data::{DistanceMatrix, TransferMatrix};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    SourceSelection,
    Augmentation,
    SubsetSelection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranked {
    pub id: String,
    pub distance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Payoff {
    pub random_mean: f64,
    pub picked: f64,
    pub oracle: f64,
    pub gap_recovered: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionReport {
    pub protocol: Protocol,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_id: Option<String>,
    /// Ascending by distance (for subset selection: the medoids, by id).
    pub ranked: Vec<Ranked>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oracle_id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub payoff: Option<Payoff>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub objective: Option<f64>,
}

impl DecisionReport {
    /// Plain-text table for terminals.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        if let Some(t) = &self.target_id {
            out.push_str(&format!("target: {t}\n"));
        }
        out.push_str(&format!("{:>4}  {:<24} {:>14}\n", "rank", "id", "distance"));
        for (i, r) in self.ranked.iter().enumerate() {
            out.push_str(&format!("{:>4}  {:<24} {:>14.6}\n", i + 1, r.id, r.distance));
        }
        if let Some(o) = &self.oracle_id {
            out.push_str(&format!("oracle: {o}\n"));
        }
        if let Some(p) = &self.payoff {
            out.push_str(&format!(
                "random {:.4}  picked {:.4}  oracle {:.4}  recovered {:.1}%\n",
                p.random_mean,
                p.picked,
                p.oracle,
                100.0 * p.gap_recovered
            ));
        }
        if let Some(obj) = self.objective {
            out.push_str(&format!("objective: {obj:.6}\n"));
        }
        out
    }
}

/// The k sources closest to `target`, ascending; ties broken by id. For a
/// directed matrix a source s is scored by D[s][target].
pub fn select_source(d: &DistanceMatrix, target: &str, k: usize) -> Result<Vec<Ranked>> {
    let t = d.index_of(target)?;
    let n = d.len();
    if n < 2 {
        return Err(Error::TooFew { needed: 2, got: n });
    }
    if k == 0 || k > n - 1 {
        return Err(Error::KOutOfRange { k, max: n - 1 });
    }
    let mut cands: Vec<Ranked> = (0..n)
        .filter(|&s| s != t)
        .map(|s| Ranked {
            id: d.ids()[s].clone(),
            distance: d.values()[[s, t]],
        })
        .collect();
    cands.sort_by(|a, b| a.distance.total_cmp(&b.distance).then_with(|| a.id.cmp(&b.id)));
    cands.truncate(k);
    Ok(cands)
}

/// Same ranking rule as [`select_source`]; reported under the augmentation protocol.
pub fn rank_auxiliaries(d: &DistanceMatrix, target: &str, k: usize) -> Result<Vec<Ranked>> {
    select_source(d, target, k)
}

/// argmin over s != target of P[s][target]; ties broken by id.
pub fn oracle_source(p: &TransferMatrix, target: &str) -> Result<String> {
    let t = p.index_of(target)?;
    let n = p.len();
    (0..n)
        .filter(|&s| s != t)
        .map(|s| (&p.ids()[s], p.values()[[s, t]]))
        .min_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(b.0)))
        .map(|(id, _)| id.clone())
        .ok_or(Error::TooFew { needed: 2, got: n })
}

/// Fraction of the random -> oracle gap closed by the picked choice:
/// (picked - random) / (oracle - random). The ratio does not depend on the
/// orientation; `higher_is_better` is used to reject an oracle that is worse
/// than random.
pub fn gap_recovered(picked: f64, random: f64, oracle: f64, higher_is_better: bool) -> Result<f64> {
    let gap = oracle - random;
    if gap == 0.0 || !gap.is_finite() {
        return Err(Error::ZeroGap);
    }
    if (gap > 0.0) != higher_is_better {
        return Err(Error::InvalidConfig(format!(
            "oracle {oracle} is worse than random {random} under the declared orientation"
        )));
    }
    Ok((picked - random) / gap)
}

/// Source-selection report for one target, scored against the transfer
/// matrix (errors, lower is better).
pub fn source_selection_report(d: &DistanceMatrix, p: &TransferMatrix, target: &str, k: usize) -> Result<DecisionReport> {
    let ranked = select_source(d, target, k)?;
    let p = p.permuted(d.ids())?;
    let t = p.index_of(target)?;
    let oracle_id = oracle_source(&p, target)?;
    let col = |id: &str| -> Result<f64> { Ok(p.values()[[p.index_of(id)?, t]]) };
    let others: Vec<f64> = (0..p.len()).filter(|&s| s != t).map(|s| p.values()[[s, t]]).collect();
    let random_mean = others.iter().sum::<f64>() / others.len() as f64;
    let picked = col(&ranked[0].id)?;
    let oracle = col(&oracle_id)?;
    let payoff = gap_recovered(picked, random_mean, oracle, false).ok().map(|g| Payoff {
        random_mean,
        picked,
        oracle,
        gap_recovered: g,
    });
    Ok(DecisionReport {
        protocol: Protocol::SourceSelection,
        target_id: Some(target.to_string()),
        ranked,
        oracle_id: Some(oracle_id),
        payoff,
        objective: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationReport {
    pub gains: Vec<f64>,
    /// Spearman correlation between the gains and the negated distances.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spearman_vs_neg_distance: Option<f64>,
}

/// Gain of each augmented candidate over the base performance.
pub fn augmentation_gain(augmented: &[f64], base: f64, distances: Option<&[f64]>) -> Result<AugmentationReport> {
    let gains: Vec<f64> = augmented.iter().map(|a| a - base).collect();
    let spearman_vs_neg_distance = match distances {
        Some(d) => {
            if d.len() != gains.len() {
                return Err(Error::ShapeMismatch(format!(
                    "{} gains but {} distances",
                    gains.len(),
                    d.len()
                )));
            }
            let neg: Vec<f64> = d.iter().map(|v| -v).collect();
            Some(spearman(&gains, &neg)?)
        }
        None => None,
    };
    Ok(AugmentationReport {
        gains,
        spearman_vs_neg_distance,
    })
}

/// One evaluated subset and its measured score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetScore {
    pub ids: Vec<String>,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegretReport {
    pub regret: f64,
    pub kendall_tau: f64,
    pub best_score: f64,
    pub selected_score: f64,
    pub best_ids: Vec<String>,
}

fn as_set(ids: &[String]) -> BTreeSet<&str> {
    ids.iter().map(String::as_str).collect()
}

/// Regret of `selected` against the best subset in `universe`, and Kendall's
/// tau between the ranking the covering objective induces on the universe and
/// the ranking by measured score.
pub fn subset_regret(
    d: &DistanceMatrix,
    universe: &[SubsetScore],
    selected: &[String],
    higher_is_better: bool,
) -> Result<RegretReport> {
    let sel = as_set(selected);
    let selected_entry = universe
        .iter()
        .find(|s| as_set(&s.ids) == sel)
        .ok_or(Error::MissingSubset)?;
    let better = |a: f64, b: f64| if higher_is_better { a > b } else { a < b };
    let best = universe
        .iter()
        .fold(selected_entry, |acc, s| if better(s.score, acc.score) { s } else { acc });
    let regret = (best.score - selected_entry.score).abs();
    let mut goodness_by_objective = Vec::with_capacity(universe.len());
    let mut goodness_by_score = Vec::with_capacity(universe.len());
    for s in universe {
        let pos = s.ids.iter().map(|id| d.index_of(id)).collect::<Result<Vec<_>>>()?;
        goodness_by_objective.push(-kmedoids_objective(d.symmetrized().values(), &pos));
        goodness_by_score.push(if higher_is_better { s.score } else { -s.score });
    }
    let kendall = kendall_tau(&goodness_by_objective, &goodness_by_score)?;
    Ok(RegretReport {
        regret,
        kendall_tau: kendall,
        best_score: best.score,
        selected_score: selected_entry.score,
        best_ids: best.ids.clone(),
    })
}

/// `trials` uniform k-subsets drawn without replacement, each sorted in input order.
pub fn random_baseline(ids: &[String], k: usize, trials: usize, seed: u64) -> Result<Vec<Vec<String>>> {
    if k == 0 || k > ids.len() {
        return Err(Error::KOutOfRange { k, max: ids.len() });
    }
    let mut rng = seed::rng(seed::derive(seed, &[b"random-baseline"]));
    Ok((0..trials)
        .map(|_| {
            let mut pick = index::sample(&mut rng, ids.len(), k).into_vec();
            pick.sort_unstable();
            pick.into_iter().map(|i| ids[i].clone()).collect()
        })
        .collect())
}

/// k-medoids subset-selection report.
pub fn subset_selection_report(d: &DistanceMatrix, k: usize, seed: u64) -> Result<DecisionReport> {
    let r = kmedoids_select(d, k, seed)?;
    let ranked = r
        .ids
        .iter()
        .map(|id| Ranked {
            id: id.clone(),
            distance: 0.0,
        })
        .collect();
    Ok(DecisionReport {
        protocol: Protocol::SubsetSelection,
        target_id: None,
        ranked,
        oracle_id: None,
        payoff: None,
        objective: Some(r.objective),
    })
}
