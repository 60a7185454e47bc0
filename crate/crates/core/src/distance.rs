//! Symmetric dataset distances.
//!
//! Randomness (projection directions, balanced subsamples) is seeded from the
//! unordered pair of dataset ids, so `d(A, B)` and `d(B, A)` are bit-identical
//! and a whole matrix is reproducible under any evaluation schedule.

use itertools::Itertools;
use ndarray::{Array1, Array2, ArrayView2};
use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{mean_row, DistanceKind, DistanceMatrix, EmbeddingSet};
use crate::error::{Error, Result};
use crate::seed;

/// Largest n accepted by [`exact_w2_small`] (n! assignments).
pub const EXACT_W2_LIMIT: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SwConfig {
    /// Number of random projection directions L.
    pub projections: usize,
    /// Per-class subsample cap M.
    pub per_class_cap: usize,
    pub seed: u64,
    pub label_aware: bool,
}

impl Default for SwConfig {
    fn default() -> Self {
        Self {
            projections: 64,
            per_class_cap: 200,
            seed: 0,
            label_aware: true,
        }
    }
}

impl SwConfig {
    pub fn validate(&self) -> Result<()> {
        if self.projections == 0 {
            return Err(Error::InvalidConfig("projections must be >= 1".into()));
        }
        if self.per_class_cap == 0 {
            return Err(Error::InvalidConfig("per-class cap must be >= 1".into()));
        }
        Ok(())
    }

    pub fn digest(&self) -> String {
        seed::digest_hex(
            format!(
                "{}|{}|{}|{}",
                self.projections, self.per_class_cap, self.seed, self.label_aware
            )
            .as_bytes(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Centroid,
    Sw,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Centroid => "centroid",
            Metric::Sw => "sw",
        }
    }
}

/// `count` directions drawn uniformly from the unit sphere in R^dim
/// (normalized standard Gaussians), one per row.
pub fn directions(dim: usize, count: usize, seed: u64) -> Array2<f64> {
    let mut rng = seed::rng(seed);
    let mut out = Array2::<f64>::zeros((count, dim));
    for mut row in out.rows_mut() {
        loop {
            for v in row.iter_mut() {
                *v = seed::normal(&mut rng);
            }
            let norm = row.dot(&row).sqrt();
            if norm > 1e-12 {
                row /= norm;
                break;
            }
        }
    }
    out
}

fn check_pair_shapes(za: &ArrayView2<f64>, zb: &ArrayView2<f64>) -> Result<()> {
    if za.nrows() != zb.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "sliced W2 needs equal row counts, got {} and {}",
            za.nrows(),
            zb.nrows()
        )));
    }
    if za.ncols() != zb.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "embedding dims differ: {} vs {}",
            za.ncols(),
            zb.ncols()
        )));
    }
    if za.nrows() == 0 {
        return Err(Error::ShapeMismatch("sliced W2 of empty sets".into()));
    }
    Ok(())
}

pub(crate) fn sorted(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    v
}

/// Mean over directions of the squared 1-D W2 between the projected sets.
pub(crate) fn sliced_w2_squared(za: ArrayView2<f64>, zb: ArrayView2<f64>, dirs: &Array2<f64>) -> f64 {
    let n = za.nrows() as f64;
    let mut total = 0.0;
    for u in dirs.rows() {
        let pa = sorted(za.dot(&u).to_vec());
        let pb = sorted(zb.dot(&u).to_vec());
        let sq: f64 = pa.iter().zip(&pb).map(|(a, b)| (a - b) * (a - b)).sum();
        total += sq / n;
    }
    total / dirs.nrows() as f64
}

/// Sliced Wasserstein-2 between two equal-size point sets, directions drawn from `cfg.seed`.
pub fn sliced_w2(za: &Array2<f64>, zb: &Array2<f64>, cfg: &SwConfig) -> Result<f64> {
    cfg.validate()?;
    check_pair_shapes(&za.view(), &zb.view())?;
    let dirs = directions(za.ncols(), cfg.projections, cfg.seed);
    Ok(sliced_w2_squared(za.view(), zb.view(), &dirs).sqrt())
}

/// Exact W2 between two uniform n-point measures by enumerating all n!
/// assignments. Test oracle; n <= 8.
pub fn exact_w2_small(za: &Array2<f64>, zb: &Array2<f64>) -> Result<f64> {
    check_pair_shapes(&za.view(), &zb.view())?;
    let n = za.nrows();
    if n > EXACT_W2_LIMIT {
        return Err(Error::TooLarge {
            n,
            limit: EXACT_W2_LIMIT,
        });
    }
    let cost = Array2::from_shape_fn((n, n), |(i, j)| {
        let diff = &za.row(i) - &zb.row(j);
        diff.dot(&diff)
    });
    let best = (0..n)
        .permutations(n)
        .map(|perm| perm.iter().enumerate().map(|(i, &j)| cost[[i, j]]).sum::<f64>())
        .fold(f64::INFINITY, f64::min);
    Ok((best / n as f64).sqrt())
}

/// Seed for the per-class (`per_class = true`) or full-set computation of a
/// pair. It does not depend on the class value, so every class of a pair sees
/// the same directions and relabeling classes leaves distances unchanged.
pub fn class_seed(global: u64, id_a: &str, id_b: &str, per_class: bool) -> u64 {
    let pair = seed::pair_seed(global, id_a, id_b);
    seed::derive(pair, if per_class { &[b"class"] } else { &[b"all"] })
}

/// Draw k = min(|rows_a|, |rows_b|, cap) rows from each side without
/// replacement. Both sides use the same stream, so identical inputs yield
/// identical subsamples.
pub fn balanced_subsample(rows_a: &[usize], rows_b: &[usize], cap: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let k = rows_a.len().min(rows_b.len()).min(cap);
    let pick = |rows: &[usize]| -> Vec<usize> {
        if rows.len() == k {
            return rows.to_vec();
        }
        let mut rng = seed::rng(seed::derive(seed, &[b"subsample"]));
        let mut idx: Vec<usize> = index::sample(&mut rng, rows.len(), k)
            .into_iter()
            .map(|i| rows[i])
            .collect();
        idx.sort_unstable();
        idx
    };
    (pick(rows_a), pick(rows_b))
}

/// Sliced W2 between two row subsets under balanced subsampling, with
/// directions and subsample drawn from `seed`.
pub fn subsampled_sw(
    a: &EmbeddingSet,
    rows_a: &[usize],
    b: &EmbeddingSet,
    rows_b: &[usize],
    cfg: &SwConfig,
    seed: u64,
) -> Result<f64> {
    let (ia, ib) = balanced_subsample(rows_a, rows_b, cfg.per_class_cap, seed);
    let za = a.rows(&ia);
    let zb = b.rows(&ib);
    check_pair_shapes(&za.view(), &zb.view())?;
    let dirs = directions(a.dim(), cfg.projections, seed::derive(seed, &[b"dirs"]));
    Ok(sliced_w2_squared(za.view(), zb.view(), &dirs).sqrt())
}

/// Sliced W2 restricted to class `class` of both sets.
pub fn per_class_sw(a: &EmbeddingSet, b: &EmbeddingSet, class: usize, cfg: &SwConfig) -> Result<f64> {
    let (ra, rb) = match (a.class_rows(class), b.class_rows(class)) {
        (Some(ra), Some(rb)) => (ra, rb),
        _ => return Err(Error::NoSharedClasses(a.id().into(), b.id().into())),
    };
    let seed = class_seed(cfg.seed, a.id(), b.id(), true);
    subsampled_sw(a, ra, b, rb, cfg, seed)
}

/// Unweighted mean of per-class sliced W2 over shared classes.
pub fn label_aware_sw(a: &EmbeddingSet, b: &EmbeddingSet, cfg: &SwConfig) -> Result<f64> {
    cfg.validate()?;
    let shared = a.shared_classes(b);
    if shared.is_empty() {
        return Err(Error::NoSharedClasses(a.id().into(), b.id().into()));
    }
    let mut total = 0.0;
    for &c in &shared {
        total += per_class_sw(a, b, c, cfg)?;
    }
    Ok(total / shared.len() as f64)
}

/// Sliced W2 on the full sets, both subsampled to min(n_a, n_b, M).
pub fn label_agnostic_sw(a: &EmbeddingSet, b: &EmbeddingSet, cfg: &SwConfig) -> Result<f64> {
    cfg.validate()?;
    let ra: Vec<usize> = (0..a.n()).collect();
    let rb: Vec<usize> = (0..b.n()).collect();
    let seed = class_seed(cfg.seed, a.id(), b.id(), false);
    subsampled_sw(a, &ra, b, &rb, cfg, seed)
}

fn class_mean(set: &EmbeddingSet, class: usize) -> Array1<f64> {
    mean_row(&set.rows(set.class_rows(class).expect("class present")))
}

/// Mean over shared classes of the Euclidean gap between class means.
pub fn centroid_distance(a: &EmbeddingSet, b: &EmbeddingSet) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch(format!("embedding dims differ: {} vs {}", a.dim(), b.dim())));
    }
    let shared = a.shared_classes(b);
    if shared.is_empty() {
        return Err(Error::NoSharedClasses(a.id().into(), b.id().into()));
    }
    let total: f64 = shared
        .iter()
        .map(|&c| {
            let diff = class_mean(a, c) - class_mean(b, c);
            diff.dot(&diff).sqrt()
        })
        .sum();
    Ok(total / shared.len() as f64)
}

/// Euclidean gap between the full-set means.
pub fn label_agnostic_centroid(a: &EmbeddingSet, b: &EmbeddingSet) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch(format!("embedding dims differ: {} vs {}", a.dim(), b.dim())));
    }
    let diff = mean_row(a.z()) - mean_row(b.z());
    Ok(diff.dot(&diff).sqrt())
}

/// Distance of one pair under `metric`. The label-aware form is used when
/// `cfg.label_aware` is set and the pair shares a class; otherwise the
/// label-agnostic form on the full sets.
pub fn pair_distance(a: &EmbeddingSet, b: &EmbeddingSet, metric: Metric, cfg: &SwConfig) -> Result<f64> {
    let label_aware = cfg.label_aware && !a.shared_classes(b).is_empty();
    match (metric, label_aware) {
        (Metric::Centroid, true) => centroid_distance(a, b),
        (Metric::Centroid, false) => label_agnostic_centroid(a, b),
        (Metric::Sw, true) => label_aware_sw(a, b, cfg),
        (Metric::Sw, false) => label_agnostic_sw(a, b, cfg),
    }
}

/// Evaluate `f` once per unordered pair (in parallel) and assemble a symmetric matrix.
pub fn build_symmetric<F>(ids: Vec<String>, tag: String, f: F) -> Result<DistanceMatrix>
where
    F: Fn(usize, usize) -> Result<f64> + Sync,
{
    let n = ids.len();
    let pairs: Vec<(usize, usize)> = (0..n).tuple_combinations().collect();
    let vals: Vec<f64> = pairs
        .par_iter()
        .map(|&(i, j)| f(i, j))
        .collect::<Result<Vec<_>>>()?;
    let mut m = Array2::zeros((n, n));
    for (&(i, j), v) in pairs.iter().zip(vals) {
        m[[i, j]] = v;
        m[[j, i]] = v;
    }
    DistanceMatrix::new(ids, m, DistanceKind::Symmetric, tag)
}

/// Evaluate `f` once per ordered pair i != j (in parallel); `values[i][j] = f(i, j)`.
pub fn build_directed<F>(ids: Vec<String>, tag: String, f: F) -> Result<DistanceMatrix>
where
    F: Fn(usize, usize) -> Result<f64> + Sync,
{
    let n = ids.len();
    let pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
        .collect();
    let vals: Vec<f64> = pairs
        .par_iter()
        .map(|&(i, j)| f(i, j))
        .collect::<Result<Vec<_>>>()?;
    let mut m = Array2::zeros((n, n));
    for (&(i, j), v) in pairs.iter().zip(vals) {
        m[[i, j]] = v;
    }
    DistanceMatrix::new(ids, m, DistanceKind::Directed, tag)
}

pub fn metric_tag(metric: Metric, cfg: &SwConfig) -> String {
    match metric {
        Metric::Centroid => format!("centroid/la{}", cfg.label_aware as u8),
        Metric::Sw => format!(
            "sw/L{}/M{}/s{}/la{}/cfg-{}",
            cfg.projections,
            cfg.per_class_cap,
            cfg.seed,
            cfg.label_aware as u8,
            cfg.digest()
        ),
    }
}

/// Symmetric distance matrix over a library, one computation per unordered pair.
pub fn distance_matrix(library: &[EmbeddingSet], metric: Metric, cfg: &SwConfig) -> Result<DistanceMatrix> {
    cfg.validate()?;
    if library.len() < 2 {
        return Err(Error::TooFew {
            needed: 2,
            got: library.len(),
        });
    }
    let ids = library.iter().map(|s| s.id().to_string()).collect();
    build_symmetric(ids, metric_tag(metric, cfg), |i, j| {
        pair_distance(&library[i], &library[j], metric, cfg)
    })
}
