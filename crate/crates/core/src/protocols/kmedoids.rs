//! Budgeted subset selection: choose k datasets minimizing the sum over all
//! datasets of the distance to the nearest chosen one.
//!
//! Greedy BUILD initialization followed by FasterPAM eager swaps (Schubert &
//! Rousseeuw, 2021): for each non-medoid candidate the best medoid to replace
//! is found in O(n) using per-medoid removal losses, and the first improving
//! swap is applied immediately.

use std::cmp::Ordering;

use ndarray::Array2;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{DistanceKind, DistanceMatrix};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMedoidsResult {
    /// Medoid positions in the matrix, ascending.
    pub medoids: Vec<usize>,
    pub ids: Vec<String>,
    pub objective: f64,
    pub build_objective: f64,
    /// Objective after BUILD and after every accepted swap.
    pub history: Vec<f64>,
    pub swaps: usize,
}

/// Sum over rows of the distance to the closest medoid.
pub fn objective(d: &Array2<f64>, medoids: &[usize]) -> f64 {
    (0..d.nrows())
        .map(|i| medoids.iter().map(|&m| d[[i, m]]).fold(f64::INFINITY, f64::min))
        .sum()
}

/// Nearest and second-nearest medoid slot and distance for every row.
struct Assignment {
    nearest: Vec<usize>,
    dn: Vec<f64>,
    ds: Vec<f64>,
}

fn assign(d: &Array2<f64>, medoids: &[usize]) -> Assignment {
    let n = d.nrows();
    let mut a = Assignment {
        nearest: vec![0; n],
        dn: vec![f64::INFINITY; n],
        ds: vec![f64::INFINITY; n],
    };
    for o in 0..n {
        for (slot, &m) in medoids.iter().enumerate() {
            let v = d[[o, m]];
            if v < a.dn[o] {
                a.ds[o] = a.dn[o];
                a.dn[o] = v;
                a.nearest[o] = slot;
            } else if v < a.ds[o] {
                a.ds[o] = v;
            }
        }
    }
    a
}

fn by_value_then_id(ids: &[String]) -> impl Fn(&(usize, f64), &(usize, f64)) -> Ordering + '_ {
    move |a, b| a.1.total_cmp(&b.1).then_with(|| ids[a.0].cmp(&ids[b.0]))
}

/// Greedy BUILD: start from the global medoid, then repeatedly add the point
/// that lowers the objective most. Ties go to the smaller id.
fn build(d: &Array2<f64>, ids: &[String], k: usize) -> Vec<usize> {
    let n = d.nrows();
    let cmp = by_value_then_id(ids);
    let first = (0..n)
        .map(|j| (j, (0..n).map(|i| d[[i, j]]).sum::<f64>()))
        .min_by(&cmp)
        .expect("n >= 1")
        .0;
    let mut medoids = vec![first];
    let mut near: Vec<f64> = (0..n).map(|i| d[[i, first]]).collect();
    while medoids.len() < k {
        let best = (0..n)
            .filter(|j| !medoids.contains(j))
            .map(|j| {
                let total: f64 = (0..n).map(|i| near[i].min(d[[i, j]])).sum();
                (j, total)
            })
            .min_by(&cmp)
            .expect("k <= n")
            .0;
        medoids.push(best);
        for i in 0..n {
            near[i] = near[i].min(d[[i, best]]);
        }
    }
    medoids
}

/// k-medoids on a symmetric distance matrix. Directed input is symmetrized.
/// `seed` only picks where the swap scan starts.
pub fn kmedoids_select(d: &DistanceMatrix, k: usize, seed: u64) -> Result<KMedoidsResult> {
    let d = if d.kind() == DistanceKind::Directed {
        log::warn!("k-medoids on a directed matrix; symmetrizing it");
        d.symmetrized()
    } else {
        d.clone()
    };
    let n = d.len();
    if k == 0 || k > n {
        return Err(Error::KOutOfRange { k, max: n });
    }
    let dv = d.values();
    let ids = d.ids();
    let mut medoids = build(dv, ids, k);
    let build_objective = objective(dv, &medoids);
    let mut history = vec![build_objective];
    let mut current = build_objective;
    let mut swaps = 0;

    // k = 1: BUILD already returns the global medoid, which is optimal.
    // k = n: every point is its own medoid.
    if k > 1 && k < n {
        let mut rng = seed::rng(seed::derive(seed, &[b"kmedoids"]));
        let start = rng.random_range(0..n);
        let mut asg = assign(dv, &medoids);
        let mut since_swap = 0;
        let mut pos = start;
        while since_swap < n {
            let xc = pos;
            pos = (pos + 1) % n;
            since_swap += 1;
            if medoids.contains(&xc) {
                continue;
            }
            // removal loss of each medoid slot
            let mut delta = vec![0.0; k];
            for o in 0..n {
                delta[asg.nearest[o]] += asg.ds[o] - asg.dn[o];
            }
            let mut acc = 0.0;
            for o in 0..n {
                let doj = dv[[o, xc]];
                if doj < asg.dn[o] {
                    acc += doj - asg.dn[o];
                    delta[asg.nearest[o]] += asg.dn[o] - asg.ds[o];
                } else if doj < asg.ds[o] {
                    delta[asg.nearest[o]] += doj - asg.ds[o];
                }
            }
            let (slot, change) = delta
                .iter()
                .enumerate()
                .map(|(s, v)| (s, v + acc))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .expect("k >= 1");
            if change >= 0.0 {
                continue;
            }
            let mut trial = medoids.clone();
            trial[slot] = xc;
            let value = objective(dv, &trial);
            // guard against accepting a rounding-level "improvement"
            if value >= current {
                continue;
            }
            medoids = trial;
            current = value;
            history.push(value);
            swaps += 1;
            since_swap = 0;
            asg = assign(dv, &medoids);
        }
    }
    medoids.sort_unstable();
    Ok(KMedoidsResult {
        ids: medoids.iter().map(|&m| ids[m].clone()).collect(),
        medoids,
        objective: current,
        build_objective,
        history,
        swaps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DistanceKind;

    fn line(points: &[f64]) -> DistanceMatrix {
        let n = points.len();
        let ids = (0..n).map(|i| format!("p{i}")).collect();
        let v = Array2::from_shape_fn((n, n), |(i, j)| (points[i] - points[j]).abs());
        DistanceMatrix::new(ids, v, DistanceKind::Symmetric, "line").unwrap()
    }

    #[test]
    fn k1_is_global_medoid() {
        let d = line(&[0.0, 1.0, 2.0, 10.0]);
        let r = kmedoids_select(&d, 1, 0).unwrap();
        // column sums: 13, 11, 11, 27 -> tie between p1 and p2, smaller id wins
        assert_eq!(r.ids, vec!["p1".to_string()]);
        assert_eq!(r.objective, 11.0);
    }

    #[test]
    fn k_equals_n_covers_everything() {
        let d = line(&[0.0, 1.0, 5.0]);
        let r = kmedoids_select(&d, 3, 0).unwrap();
        assert_eq!(r.medoids, vec![0, 1, 2]);
        assert_eq!(r.objective, 0.0);
    }

    #[test]
    fn k_out_of_range() {
        let d = line(&[0.0, 1.0]);
        assert!(matches!(kmedoids_select(&d, 0, 0), Err(Error::KOutOfRange { .. })));
        assert!(matches!(kmedoids_select(&d, 3, 0), Err(Error::KOutOfRange { .. })));
    }

    #[test]
    fn two_clusters_found() {
        let d = line(&[0.0, 0.1, 0.2, 9.0, 9.1, 9.2]);
        let r = kmedoids_select(&d, 2, 5).unwrap();
        assert_eq!(r.medoids, vec![1, 4]);
        assert!(r.history.windows(2).all(|w| w[1] < w[0]));
        assert!(r.objective <= r.build_objective);
    }
}
