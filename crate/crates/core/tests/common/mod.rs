//! Independent oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use itertools::Itertools;
use ndarray::Array2;

use dsgeo::data::{DistanceKind, DistanceMatrix, EmbeddingSet};
use dsgeo::seed::{self, Rng};

pub fn rng(s: u64) -> Rng {
    seed::rng(s)
}

pub fn normal_matrix(rng: &mut Rng, n: usize, d: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((n, d), || scale * seed::normal(rng))
}

/// Central finite-difference gradient of `f` at `x`.
pub fn numeric_grad(x: &Array2<f64>, h: f64, mut f: impl FnMut(&Array2<f64>) -> f64) -> Array2<f64> {
    let mut g = Array2::zeros(x.dim());
    let mut xp = x.clone();
    for idx in ndarray::indices(x.dim()) {
        let orig = xp[idx];
        xp[idx] = orig + h;
        let up = f(&xp);
        xp[idx] = orig - h;
        let down = f(&xp);
        xp[idx] = orig;
        g[idx] = (up - down) / (2.0 * h);
    }
    g
}

/// Largest |a - n| / max(1, |n|) over entries.
pub fn max_rel_err<'a>(analytic: impl IntoIterator<Item = &'a f64>, numeric: impl IntoIterator<Item = &'a f64>) -> f64 {
    analytic
        .into_iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / n.abs().max(1.0))
        .fold(0.0, f64::max)
}

/// 1-D W2 between equal-size samples by sorted matching.
pub fn w2_1d(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let sq: f64 = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum();
    (sq / a.len() as f64).sqrt()
}

/// Kendall tau-b by counting all pairs.
pub fn brute_kendall(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len();
    let (mut c, mut d, mut tx, mut ty) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..n {
        for j in i + 1..n {
            let sx = x[i].partial_cmp(&x[j]).unwrap() as i64;
            let sy = y[i].partial_cmp(&y[j]).unwrap() as i64;
            match (sx, sy) {
                (0, 0) => {
                    tx += 1;
                    ty += 1;
                }
                (0, _) => tx += 1,
                (_, 0) => ty += 1,
                _ if sx == sy => c += 1,
                _ => d += 1,
            }
        }
    }
    let total = (n * (n - 1) / 2) as i64;
    let (dx, dy) = (total - tx, total - ty);
    if dx == 0 || dy == 0 {
        return None;
    }
    Some((c - d) as f64 / ((dx as f64) * (dy as f64)).sqrt())
}

/// Average ranks by counting, 1-based.
pub fn count_ranks(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|v| {
            let below = x.iter().filter(|w| *w < v).count() as f64;
            let equal = x.iter().filter(|w| *w == v).count() as f64;
            below + (equal + 1.0) / 2.0
        })
        .collect()
}

pub fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("s{i}")).collect()
}

pub fn euclidean_matrix(points: &Array2<f64>) -> DistanceMatrix {
    let n = points.nrows();
    let v = Array2::from_shape_fn((n, n), |(i, j)| {
        let diff = &points.row(i) - &points.row(j);
        diff.dot(&diff).sqrt()
    });
    DistanceMatrix::new(ids(n), v, DistanceKind::Symmetric, "euclidean").unwrap()
}

/// Points drawn around `k` well separated planted centres in the plane.
pub fn planted_points(rng: &mut Rng, n: usize, k: usize) -> Array2<f64> {
    let centres = normal_matrix(rng, k, 2, 6.0);
    Array2::from_shape_fn((n, 2), |(i, j)| centres[[i % k, j]] + 0.7 * seed::normal(rng))
}

/// Minimum k-medoids objective over all k-subsets.
pub fn exhaustive_kmedoids(d: &Array2<f64>, k: usize) -> f64 {
    (0..d.nrows())
        .combinations(k)
        .map(|m| dsgeo::protocols::kmedoids_objective(d, &m))
        .fold(f64::INFINITY, f64::min)
}

/// Small labeled set of `n` points in `d` dimensions with `c` classes.
pub fn labeled_set(rng: &mut Rng, id: &str, n: usize, d: usize, c: usize, shift: f64) -> EmbeddingSet {
    let mut z = normal_matrix(rng, n, d, 1.0);
    let labels: Vec<usize> = (0..n).map(|i| i % c).collect();
    for (i, mut row) in z.rows_mut().into_iter().enumerate() {
        row[labels[i] % d] += 3.0;
        row[0] += shift;
    }
    EmbeddingSet::labeled(id, z, labels).unwrap()
}
