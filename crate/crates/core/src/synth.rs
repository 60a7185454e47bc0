//! Synthetic libraries with a planted ground truth.
//!
//! Each dataset is a mixture of isotropic Gaussians, one per class. Class
//! means drift along a random walk from dataset to dataset, so neighbouring
//! datasets are similar. The ground-truth directed distance G is the DSW
//! functional evaluated on the population parameters, and the transfer
//! matrix is a monotone link of G plus optional noise. An optional random
//! invertible linear map distorts the emitted embeddings without touching G.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Gamma};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    write_distance_matrix, write_embeddings, write_labels, write_manifest, write_transfer_matrix, DistanceKind,
    DistanceMatrix, EmbeddingSet, LibraryManifest, ManifestEntry, TransferMatrix,
};
use crate::directed::spread_penalty;
use crate::error::{Error, Result};
use crate::seed::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Link {
    /// intercept + slope * g
    Affine { slope: f64, intercept: f64 },
    /// 1 / (1 + exp(-slope * (g - midpoint)))
    Logistic { slope: f64, midpoint: f64 },
}

impl Link {
    pub fn apply(&self, g: f64) -> f64 {
        match *self {
            Link::Affine { slope, intercept } => intercept + slope * g,
            Link::Logistic { slope, midpoint } => 1.0 / (1.0 + (-slope * (g - midpoint)).exp()),
        }
    }

    fn validate(&self) -> Result<()> {
        let slope = match *self {
            Link::Affine { slope, .. } | Link::Logistic { slope, .. } => slope,
        };
        if !(slope > 0.0 && slope.is_finite()) {
            return Err(Error::InvalidConfig(format!("link slope must be > 0, got {slope}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Distortion {
    Identity,
    /// Random rotation followed by per-coordinate scaling, log-uniform in
    /// `[scale_min, scale_max]`.
    Linear { scale_min: f64, scale_max: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub n_datasets: usize,
    pub n_classes: usize,
    pub dim: usize,
    pub samples_per_dataset: usize,
    /// Std of the first dataset's class means.
    pub class_separation: f64,
    /// Std of each random-walk step of a class mean between consecutive datasets.
    pub shift_scale: f64,
    /// Class means follow `m_k = base + rho * (m_{k-1} - base) + step`; 1 is a
    /// plain random walk, 0 gives independent draws around the first dataset.
    pub walk_persistence: f64,
    /// Per-class base spread (per-coordinate std), log-uniform in this range.
    pub spread_range: (f64, f64),
    /// Per dataset and class, the log spread is shifted by U(-j, j).
    pub spread_jitter: f64,
    /// Dirichlet concentration of per-dataset class priors; `None` for uniform.
    pub prior_concentration: Option<f64>,
    /// Weight of the spread penalty in the ground truth.
    pub alpha: f64,
    pub link: Link,
    pub noise_std: f64,
    pub distortion: Distortion,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_datasets: 10,
            n_classes: 3,
            dim: 16,
            samples_per_dataset: 1000,
            class_separation: 3.0,
            shift_scale: 0.5,
            walk_persistence: 1.0,
            spread_range: (0.5, 1.5),
            spread_jitter: 0.0,
            prior_concentration: None,
            alpha: 1.0,
            link: Link::Affine {
                slope: 0.1,
                intercept: 0.05,
            },
            noise_std: 0.0,
            distortion: Distortion::Identity,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n_datasets < 3 {
            return bad(format!("n_datasets must be >= 3, got {}", self.n_datasets));
        }
        if self.n_classes == 0 || self.dim == 0 {
            return bad("n_classes and dim must be >= 1".into());
        }
        if self.samples_per_dataset < 2 * self.n_classes {
            return bad(format!(
                "samples_per_dataset must be >= {} (two per class)",
                2 * self.n_classes
            ));
        }
        let (lo, hi) = self.spread_range;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return bad(format!("spread_range ({lo}, {hi}) must satisfy 0 < lo <= hi"));
        }
        let nonneg = [
            ("class_separation", self.class_separation),
            ("shift_scale", self.shift_scale),
            ("spread_jitter", self.spread_jitter),
            ("alpha", self.alpha),
            ("noise_std", self.noise_std),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be >= 0, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.walk_persistence) {
            return bad(format!("walk_persistence must be in [0, 1], got {}", self.walk_persistence));
        }
        if let Some(c) = self.prior_concentration {
            if !(c > 0.0 && c.is_finite()) {
                return bad(format!("prior_concentration must be > 0, got {c}"));
            }
        }
        if let Distortion::Linear { scale_min, scale_max } = self.distortion {
            if !(scale_min > 0.0 && scale_max >= scale_min && scale_max.is_finite()) {
                return bad(format!("distortion scales ({scale_min}, {scale_max}) invalid"));
            }
        }
        self.link.validate()
    }

    pub fn ids(&self) -> Vec<String> {
        let width = (self.n_datasets - 1).to_string().len();
        (0..self.n_datasets).map(|k| format!("d{k:0width$}")).collect()
    }
}

/// True parameters of one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetParams {
    /// n_classes x dim.
    pub means: Array2<f64>,
    /// Per-coordinate std of each class.
    pub spreads: Vec<f64>,
    pub priors: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SynthLibrary {
    pub sets: Vec<EmbeddingSet>,
    /// Directed ground truth from population parameters.
    pub g: DistanceMatrix,
    pub params: Vec<DatasetParams>,
    /// Applied as `z -> z . distortion` when not identity.
    pub distortion: Option<Array2<f64>>,
}

fn log_uniform(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        return lo;
    }
    rng.random_range(lo.ln()..hi.ln()).exp()
}

fn dirichlet(rng: &mut Rng, k: usize, concentration: f64) -> Result<Vec<f64>> {
    let gamma = Gamma::new(concentration, 1.0).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    loop {
        let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        if total > 0.0 {
            return Ok(draws.into_iter().map(|g| g / total).collect());
        }
    }
}

/// Random orthogonal matrix (Gram-Schmidt on a Gaussian matrix).
pub fn random_rotation(dim: usize, rng: &mut Rng) -> Array2<f64> {
    let mut q = Array2::<f64>::zeros((dim, dim));
    let mut i = 0;
    while i < dim {
        let mut v = Array1::from_shape_simple_fn(dim, || seed::normal(rng));
        for j in 0..i {
            let qj = q.row(j);
            let proj = v.dot(&qj);
            v.scaled_add(-proj, &qj);
        }
        let norm = v.dot(&v).sqrt();
        if norm > 1e-8 {
            q.row_mut(i).assign(&(v / norm));
            i += 1;
        }
    }
    q
}

/// Sample sizes per class: largest-remainder rounding of n * priors with at
/// least two samples per class.
fn class_counts(priors: &[f64], n: usize) -> Vec<usize> {
    let k = priors.len();
    let free = n - 2 * k;
    let raw: Vec<f64> = priors.iter().map(|p| p * free as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| (raw[b] - raw[b].floor()).total_cmp(&(raw[a] - raw[a].floor())).then(a.cmp(&b)));
    let short = free - counts.iter().sum::<usize>();
    for &c in order.iter().take(short) {
        counts[c] += 1;
    }
    counts.iter().map(|c| c + 2).collect()
}

/// Population sliced W2 between N(m1, s1^2 I) and N(m2, s2^2 I), averaging
/// squared 1-D W2 over uniform directions.
pub fn population_sw(m1: &Array1<f64>, s1: f64, m2: &Array1<f64>, s2: f64) -> f64 {
    let diff = m1 - m2;
    (diff.dot(&diff) / m1.len() as f64 + (s1 - s2).powi(2)).sqrt()
}

/// Ground-truth DSW from source parameters to target parameters.
pub fn population_dsw(src: &DatasetParams, tgt: &DatasetParams, alpha: f64) -> f64 {
    (0..src.priors.len())
        .map(|c| {
            let sw = population_sw(&src.means.row(c).to_owned(), src.spreads[c], &tgt.means.row(c).to_owned(), tgt.spreads[c]);
            src.priors[c] * (sw + alpha * spread_penalty(src.spreads[c], tgt.spreads[c]))
        })
        .sum()
}

fn draw_params(spec: &SynthSpec) -> Result<Vec<DatasetParams>> {
    let (c, d) = (spec.n_classes, spec.dim);
    let mut rng = seed::rng(seed::derive(spec.seed, &[b"params"]));
    let base_means = Array2::from_shape_simple_fn((c, d), || spec.class_separation * seed::normal(&mut rng));
    let mut means = base_means.clone();
    let base: Vec<f64> = (0..c)
        .map(|_| log_uniform(&mut rng, spec.spread_range.0, spec.spread_range.1))
        .collect();
    let mut out = Vec::with_capacity(spec.n_datasets);
    for k in 0..spec.n_datasets {
        if k > 0 {
            let rho = spec.walk_persistence;
            means.zip_mut_with(&base_means, |m, &b| {
                *m = b + rho * (*m - b) + spec.shift_scale * seed::normal(&mut rng);
            });
        }
        let spreads = base
            .iter()
            .map(|&b| {
                if spec.spread_jitter > 0.0 {
                    b * rng.random_range(-spec.spread_jitter..spec.spread_jitter).exp()
                } else {
                    b
                }
            })
            .collect();
        let priors = match spec.prior_concentration {
            Some(conc) => dirichlet(&mut rng, c, conc)?,
            None => vec![1.0 / c as f64; c],
        };
        out.push(DatasetParams {
            means: means.clone(),
            spreads,
            priors,
        });
    }
    Ok(out)
}

fn sample_dataset(id: &str, p: &DatasetParams, n: usize, seed: u64, distortion: Option<&Array2<f64>>) -> Result<EmbeddingSet> {
    let mut rng = seed::rng(seed);
    let counts = class_counts(&p.priors, n);
    let dim = p.means.ncols();
    let mut labels: Vec<usize> = counts.iter().enumerate().flat_map(|(c, &m)| std::iter::repeat_n(c, m)).collect();
    labels.shuffle(&mut rng);
    let mut z = Array2::<f64>::zeros((n, dim));
    for (mut row, &c) in z.rows_mut().into_iter().zip(&labels) {
        let s = p.spreads[c];
        for (v, m) in row.iter_mut().zip(p.means.row(c)) {
            *v = m + s * seed::normal(&mut rng);
        }
    }
    if let Some(a) = distortion {
        z = z.dot(a);
    }
    EmbeddingSet::labeled(id, z, labels)
}

/// Sample a library and its ground-truth directed distance matrix.
pub fn gen_library(spec: &SynthSpec) -> Result<SynthLibrary> {
    spec.validate()?;
    let params = draw_params(spec)?;
    let ids = spec.ids();
    let distortion = match spec.distortion {
        Distortion::Identity => None,
        Distortion::Linear { scale_min, scale_max } => {
            let mut rng = seed::rng(seed::derive(spec.seed, &[b"distortion"]));
            let r = random_rotation(spec.dim, &mut rng);
            let s: Vec<f64> = (0..spec.dim).map(|_| log_uniform(&mut rng, scale_min, scale_max)).collect();
            Some(Array2::from_shape_fn((spec.dim, spec.dim), |(i, j)| r[[i, j]] * s[j]))
        }
    };
    let sets = ids
        .par_iter()
        .zip(&params)
        .map(|(id, p)| {
            let s = seed::derive(spec.seed, &[b"samples", id.as_bytes()]);
            sample_dataset(id, p, spec.samples_per_dataset, s, distortion.as_ref())
        })
        .collect::<Result<Vec<_>>>()?;
    let n = spec.n_datasets;
    let g = Array2::from_shape_fn((n, n), |(i, j)| {
        if i == j {
            0.0
        } else {
            population_dsw(&params[i], &params[j], spec.alpha)
        }
    });
    let g = DistanceMatrix::new(ids, g, DistanceKind::Directed, format!("synth-ground-truth/a{}", spec.alpha))?;
    Ok(SynthLibrary {
        sets,
        g,
        params,
        distortion,
    })
}

/// P[i][j] = link(G[i][j]) + N(0, noise_std^2), diagonal included.
pub fn gen_transfer_matrix(g: &DistanceMatrix, link: &Link, noise_std: f64, seed: u64) -> Result<TransferMatrix> {
    link.validate()?;
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(Error::InvalidConfig(format!("noise_std must be >= 0, got {noise_std}")));
    }
    let mut rng = seed::rng(seed::derive(seed, &[b"transfer-noise"]));
    let values = g.values().mapv(|v| {
        let noise = if noise_std > 0.0 { noise_std * seed::normal(&mut rng) } else { 0.0 };
        link.apply(v) + noise
    });
    TransferMatrix::new(g.ids().to_vec(), values)
}

/// Paths written by [`write_bundle`].
#[derive(Debug, Clone)]
pub struct BundlePaths {
    pub manifest: PathBuf,
    pub transfer: PathBuf,
    pub ground_truth: PathBuf,
}

/// Write embeddings, labels, manifest, transfer matrix and ground truth under `dir`.
pub fn write_bundle(dir: &Path, lib: &SynthLibrary, p: &TransferMatrix) -> Result<BundlePaths> {
    let mut entries = Vec::with_capacity(lib.sets.len());
    for s in &lib.sets {
        let emb = PathBuf::from(format!("data/{}.emb", s.id()));
        let lab = PathBuf::from(format!("data/{}.labels", s.id()));
        write_embeddings(&dir.join(&emb), s.z())?;
        write_labels(&dir.join(&lab), s.labels().expect("synthetic sets are labeled"))?;
        entries.push(ManifestEntry {
            dataset_id: s.id().to_string(),
            embedding_path: Some(emb),
            raw_path: None,
            labels_path: Some(lab),
        });
    }
    let manifest = LibraryManifest {
        entries,
        split_tags: BTreeMap::new(),
        base_dir: dir.to_path_buf(),
    };
    let paths = BundlePaths {
        manifest: dir.join("manifest.json"),
        transfer: dir.join("transfer.csv"),
        ground_truth: dir.join("ground_truth.csv"),
    };
    write_manifest(&paths.manifest, &manifest)?;
    write_transfer_matrix(&paths.transfer, p)?;
    write_distance_matrix(&paths.ground_truth, &lib.g)?;
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_sum_and_floor() {
        let c = class_counts(&[0.5, 0.3, 0.2], 100);
        assert_eq!(c.iter().sum::<usize>(), 100);
        assert!(c.iter().all(|&v| v >= 2));
        let c = class_counts(&[1.0, 0.0], 10);
        assert_eq!(c, vec![8, 2]);
    }

    #[test]
    fn rotation_is_orthogonal() {
        let mut rng = seed::rng(3);
        let q = random_rotation(5, &mut rng);
        let eye = q.dot(&q.t());
        for i in 0..5 {
            for j in 0..5 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((eye[[i, j]] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_shift_gives_zero_ground_truth() {
        let spec = SynthSpec {
            shift_scale: 0.0,
            samples_per_dataset: 60,
            ..SynthSpec::default()
        };
        let lib = gen_library(&spec).unwrap();
        assert!(lib.g.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn population_sw_examples() {
        let a = Array1::from(vec![0.0, 0.0]);
        let b = Array1::from(vec![2.0, 0.0]);
        assert!((population_sw(&a, 1.0, &b, 1.0) - 2f64.sqrt()).abs() < 1e-15);
        assert!((population_sw(&a, 1.0, &a, 3.0) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn validation() {
        assert!(SynthSpec { n_datasets: 2, ..SynthSpec::default() }.validate().is_err());
        assert!(SynthSpec { spread_range: (0.0, 1.0), ..SynthSpec::default() }.validate().is_err());
        assert!(SynthSpec::default().validate().is_ok());
    }

    #[test]
    fn deterministic() {
        let spec = SynthSpec {
            samples_per_dataset: 50,
            ..SynthSpec::default()
        };
        let a = gen_library(&spec).unwrap();
        let b = gen_library(&spec).unwrap();
        assert_eq!(a.sets, b.sets);
        assert_eq!(a.g, b.g);
    }
}
