//! Alignment between dataset distances and transfer error.
//!
//! Correlations are reported with their raw sign: a useful distance
//! correlates positively with error.

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{self, symmetrize, DistanceKind, DistanceMatrix, TransferMatrix};
use crate::error::{Error, Result};
use crate::seed;

fn check_pair_input(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::ShapeMismatch(format!("lengths {} and {}", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::TooFew {
            needed: 2,
            got: x.len(),
        });
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("correlation input".into()));
    }
    Ok(())
}

/// Sample Pearson correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair_input(x, y)?;
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::ZeroVariance);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// 1-based fractional ranks; tied values share the average of their ranks.
pub fn ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut out = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

/// Pearson correlation of average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair_input(x, y)?;
    pearson(&ranks(x), &ranks(y))
}

/// Sum of t(t-1)/2 over runs of equal adjacent values.
fn tied_pairs<T: PartialEq>(sorted: impl Iterator<Item = T>) -> u64 {
    let mut total = 0u64;
    let mut run = 0u64;
    let mut prev: Option<T> = None;
    for v in sorted {
        if prev.as_ref() == Some(&v) {
            run += 1;
        } else {
            total += run * (run + 1) / 2;
            run = 0;
        }
        prev = Some(v);
    }
    total + run * (run + 1) / 2
}

/// Merge sort `v` ascending, returning the number of strict inversions.
fn count_inversions(v: &mut [f64]) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = count_inversions(&mut v[..mid]) + count_inversions(&mut v[mid..]);
    let mut merged = Vec::with_capacity(n);
    let (mut i, mut j) = (0, mid);
    while i < mid && j < n {
        if v[j] < v[i] {
            merged.push(v[j]);
            swaps += (mid - i) as u64;
            j += 1;
        } else {
            merged.push(v[i]);
            i += 1;
        }
    }
    merged.extend_from_slice(&v[i..mid]);
    merged.extend_from_slice(&v[j..n]);
    v.copy_from_slice(&merged);
    swaps
}

/// Kendall's tau-b, O(n log n) (Knight's algorithm).
pub fn kendall_tau(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair_input(x, y)?;
    // fold -0.0 into 0.0 so bit-level tie detection matches `==`
    let x: Vec<f64> = x.iter().map(|v| v + 0.0).collect();
    let y: Vec<f64> = y.iter().map(|v| v + 0.0).collect();
    let n = x.len() as u64;
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]).then(y[a].total_cmp(&y[b])));
    let total = n * (n - 1) / 2;
    let ties_x = tied_pairs(order.iter().map(|&i| x[i].to_bits()));
    let ties_xy = tied_pairs(order.iter().map(|&i| (x[i].to_bits(), y[i].to_bits())));
    let mut ys: Vec<f64> = order.iter().map(|&i| y[i]).collect();
    let discordant = count_inversions(&mut ys);
    let ties_y = tied_pairs(ys.iter().map(|v| v.to_bits()));
    let denom_x = total - ties_x;
    let denom_y = total - ties_y;
    if denom_x == 0 || denom_y == 0 {
        return Err(Error::AllTies);
    }
    // concordant - discordant
    let numer = (total + ties_xy) as i64 - (ties_x + ties_y) as i64 - 2 * discordant as i64;
    Ok(numer as f64 / ((denom_x as f64) * (denom_y as f64)).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    pub pearson: f64,
    pub spearman: f64,
    pub kendall: f64,
    pub n_pairs: usize,
}

fn alignment(x: &[f64], y: &[f64]) -> Result<Alignment> {
    Ok(Alignment {
        pearson: pearson(x, y)?,
        spearman: spearman(x, y)?,
        kendall: kendall_tau(x, y)?,
        n_pairs: x.len(),
    })
}

fn aligned_transfer(d: &DistanceMatrix, p: &TransferMatrix) -> Result<TransferMatrix> {
    p.permuted(d.ids())
}

/// Correlate the upper triangle of D with the upper triangle of the
/// symmetrized transfer matrix. A directed D is symmetrized first.
pub fn align_symmetric(d: &DistanceMatrix, p: &TransferMatrix) -> Result<Alignment> {
    let d = if d.kind() == DistanceKind::Directed {
        log::warn!("align_symmetric on a directed matrix; symmetrizing it");
        d.symmetrized()
    } else {
        d.clone()
    };
    let p = symmetrize(&aligned_transfer(&d, p)?);
    let x = data::upper_triangle(d.values())?;
    let y = data::upper_triangle(p.values())?;
    alignment(&x, &y)
}

/// Correlate all ordered off-diagonal pairs of D against the unsymmetrized
/// transfer matrix, D[i][j] paired with P[i][j] (source row, target column).
pub fn align_directed(d: &DistanceMatrix, p: &TransferMatrix) -> Result<Alignment> {
    let p = aligned_transfer(d, p)?;
    let x = data::off_diagonal(d.values())?;
    let y = data::off_diagonal(p.values())?;
    alignment(&x, &y)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Statistic {
    Pearson,
    Spearman,
    Kendall,
}

impl Statistic {
    pub fn of(self, a: &Alignment) -> f64 {
        match self {
            Statistic::Pearson => a.pearson,
            Statistic::Spearman => a.spearman,
            Statistic::Kendall => a.kendall,
        }
    }

    fn compute(self, x: &[f64], y: &[f64]) -> Result<f64> {
        match self {
            Statistic::Pearson => pearson(x, y),
            Statistic::Spearman => spearman(x, y),
            Statistic::Kendall => kendall_tau(x, y),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignMode {
    Symmetric,
    Directed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub mean: f64,
    pub std: f64,
    /// Resamples that produced a defined statistic.
    pub used: usize,
}

/// Dataset-level bootstrap: draw N datasets with replacement, recompute the
/// statistic over pairs of distinct underlying datasets, report mean and
/// sample std over resamples (std = 0 for a single resample).
pub fn bootstrap_ci(
    d: &DistanceMatrix,
    p: &TransferMatrix,
    stat: Statistic,
    mode: AlignMode,
    resamples: usize,
    seed: u64,
) -> Result<Spread> {
    let n = d.len();
    if n < 4 {
        return Err(Error::TooFew { needed: 4, got: n });
    }
    if resamples == 0 {
        return Err(Error::InvalidConfig("resamples must be >= 1".into()));
    }
    let (dm, pm) = match mode {
        AlignMode::Symmetric => {
            let ds = d.symmetrized();
            let ps = symmetrize(&aligned_transfer(&ds, p)?);
            (ds.values().clone(), ps.values().clone())
        }
        AlignMode::Directed => (d.values().clone(), aligned_transfer(d, p)?.values().clone()),
    };
    let values: Vec<f64> = (0..resamples)
        .into_par_iter()
        .filter_map(|r| {
            let mut rng = seed::rng(seed::derive(seed, &[b"bootstrap", &(r as u64).to_le_bytes()]));
            let pick: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            let (mut x, mut y) = (Vec::new(), Vec::new());
            for a in 0..n {
                for b in 0..n {
                    let keep = match mode {
                        AlignMode::Symmetric => a < b,
                        AlignMode::Directed => a != b,
                    };
                    let (i, j) = (pick[a], pick[b]);
                    if keep && i != j {
                        x.push(dm[[i, j]]);
                        y.push(pm[[i, j]]);
                    }
                }
            }
            stat.compute(&x, &y).ok()
        })
        .collect();
    if values.is_empty() {
        return Err(Error::ZeroVariance);
    }
    let k = values.len() as f64;
    let mean = values.iter().sum::<f64>() / k;
    let std = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0)).sqrt()
    };
    Ok(Spread {
        mean,
        std,
        used: values.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn pearson_examples() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        assert!((pearson(&x, &y).unwrap() - 1.0).abs() < 1e-15);
        let y: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((pearson(&x, &y).unwrap() + 1.0).abs() < 1e-15);
        assert!((pearson(&x, &[1.0, 3.0, 2.0, 4.0]).unwrap() - 0.8).abs() < 1e-12);
        assert!(matches!(pearson(&x, &[1.0; 4]), Err(Error::ZeroVariance)));
        assert!(pearson(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn spearman_examples() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        let y: Vec<f64> = x.iter().map(|v: &f64| v.exp()).collect();
        assert!((spearman(&x, &y).unwrap() - 1.0).abs() < 1e-15);
        let y: Vec<f64> = x.iter().rev().copied().collect();
        assert!((spearman(&x, &y).unwrap() + 1.0).abs() < 1e-15);
        assert!((spearman(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(ranks(&[10.0, 20.0, 10.0, 30.0]), vec![1.5, 3.0, 1.5, 4.0]);
    }

    #[test]
    fn kendall_examples() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(kendall_tau(&x, &x).unwrap(), 1.0);
        assert_eq!(kendall_tau(&x, &[4.0, 3.0, 2.0, 1.0]).unwrap(), -1.0);
        // 5 concordant, 1 discordant over 6 pairs
        assert!((kendall_tau(&x, &[1.0, 3.0, 2.0, 4.0]).unwrap() - 4.0 / 6.0).abs() < 1e-15);
        assert!(matches!(kendall_tau(&[1.0, 1.0], &[1.0, 2.0]), Err(Error::AllTies)));
    }

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("d{i}")).collect()
    }

    #[test]
    fn proportional_distance_aligns_perfectly() {
        let n = 5;
        let raw = Array2::from_shape_fn((n, n), |(i, j)| if i == j { 0.05 } else { 0.1 + 0.03 * (i * 7 + j * 3 % 5) as f64 });
        let p = TransferMatrix::new(ids(n), raw).unwrap();
        let ps = symmetrize(&p);
        let dv = Array2::from_shape_fn((n, n), |(i, j)| if i == j { 0.0 } else { 3.0 * ps.values()[[i, j]] });
        let d = DistanceMatrix::new(ids(n), dv, DistanceKind::Symmetric, "t").unwrap();
        let a = align_symmetric(&d, &p).unwrap();
        assert!((a.pearson - 1.0).abs() < 1e-12);
        assert_eq!(a.n_pairs, 10);

        let off = Array2::from_shape_fn((n, n), |(i, j)| if i == j { 0.0 } else { p.values()[[i, j]] });
        let dd = DistanceMatrix::new(ids(n), off, DistanceKind::Directed, "t").unwrap();
        let a = align_directed(&dd, &p).unwrap();
        assert!((a.pearson - 1.0).abs() < 1e-12);
        assert_eq!(a.n_pairs, 20);
    }

    #[test]
    fn two_datasets_symmetric_is_degenerate() {
        let p = TransferMatrix::new(ids(2), ndarray::array![[0.0, 0.2], [0.3, 0.0]]).unwrap();
        let d = DistanceMatrix::new(ids(2), ndarray::array![[0.0, 1.0], [1.0, 0.0]], DistanceKind::Symmetric, "t").unwrap();
        assert!(align_symmetric(&d, &p).is_err());
        // two ordered pairs, constant D -> undefined
        assert!(matches!(align_directed(&d, &p), Err(Error::ZeroVariance)));
        let dd = DistanceMatrix::new(ids(2), ndarray::array![[0.0, 1.0], [2.0, 0.0]], DistanceKind::Directed, "t").unwrap();
        assert!((align_directed(&dd, &p).unwrap().pearson - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bootstrap_conventions() {
        let n = 6;
        let g = Array2::from_shape_fn((n, n), |(i, j)| (i as f64 - j as f64).abs());
        let p = TransferMatrix::new(ids(n), g.mapv(|v| 0.1 + 0.2 * v)).unwrap();
        let d = DistanceMatrix::new(ids(n), g, DistanceKind::Symmetric, "t").unwrap();
        let one = bootstrap_ci(&d, &p, Statistic::Pearson, AlignMode::Symmetric, 1, 3).unwrap();
        assert_eq!(one.std, 0.0);
        let a = bootstrap_ci(&d, &p, Statistic::Spearman, AlignMode::Symmetric, 50, 3).unwrap();
        let b = bootstrap_ci(&d, &p, Statistic::Spearman, AlignMode::Symmetric, 50, 3).unwrap();
        assert_eq!(a, b);
        assert!(a.std < 0.02 && (a.mean - 1.0).abs() < 1e-9);
        let small = DistanceMatrix::new(ids(3), Array2::zeros((3, 3)), DistanceKind::Symmetric, "t").unwrap();
        assert!(bootstrap_ci(&small, &p, Statistic::Pearson, AlignMode::Symmetric, 5, 0).is_err());
    }
}
