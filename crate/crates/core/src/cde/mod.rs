//! Contrastive refinement of a metric head on top of frozen embeddings.
//!
//! Each step draws a batch of datasets, passes a sample of each through the
//! head twice (two stochastic views) and combines four losses:
//! listwise (transfer-matrix rows teach the centroid-similarity softmax),
//! consistency (the two views agree), correlation (label-aware SW between
//! head outputs tracks the transfer matrix) and distillation (the SW
//! distances teach the centroid softmax). Gradients are backpropagated by
//! hand and applied with Adam after global-norm clipping.

mod adam;
mod losses;
mod sw_grad;

pub use adam::{clip_global_norm, Adam, AdamConfig};
pub use losses::{consistency_loss, corr_loss, distill_loss, listwise_loss, ConsistencyGrad, LossGrad};
pub use sw_grad::{sw_subgradient, sw_value_and_grad, SwGrad};

use ndarray::{Array1, Array2};
use rand::seq::{index, SliceRandom};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{mean_row, upper_triangle, EmbeddingSet, TransferMatrix};
use crate::distance::{balanced_subsample, class_seed, directions, SwConfig};
use crate::encoder::{backward, forward, MetricHead, Trace, ViewConfig};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Lambdas {
    pub list: f64,
    pub cons: f64,
    pub corr: f64,
    pub distill: f64,
}

impl Default for Lambdas {
    fn default() -> Self {
        Self {
            list: 1.0,
            cons: 0.3,
            corr: 0.3,
            distill: 0.3,
        }
    }
}

/// On/off switches for loss ablations. A disabled term contributes neither
/// loss nor gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    pub list: bool,
    pub cons: bool,
    pub corr: bool,
    pub distill: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            list: true,
            cons: true,
            corr: true,
            distill: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CdeConfig {
    pub lambdas: Lambdas,
    pub ablation: Ablation,
    pub tau: f64,
    pub lr: f64,
    pub clip_norm: f64,
    pub epochs: usize,
    pub batch_datasets: usize,
    /// Examples drawn per dataset per step.
    pub samples_per_dataset: usize,
    pub view: ViewConfig,
    /// SW settings used by the correlation and distillation terms.
    pub sw: SwConfig,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for CdeConfig {
    fn default() -> Self {
        Self {
            lambdas: Lambdas::default(),
            ablation: Ablation::default(),
            tau: 0.1,
            lr: 1e-3,
            clip_norm: 1.0,
            epochs: 50,
            batch_datasets: 8,
            samples_per_dataset: 256,
            view: ViewConfig::default(),
            sw: SwConfig::default(),
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl CdeConfig {
    pub fn validate(&self) -> Result<()> {
        let l = self.lambdas;
        for (name, v) in [("list", l.list), ("cons", l.cons), ("corr", l.corr), ("distill", l.distill)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("lambda {name} must be >= 0, got {v}")));
            }
        }
        let positive = [("tau", self.tau), ("lr", self.lr), ("clip_norm", self.clip_norm)];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be > 0, got {v}")));
            }
        }
        if self.batch_datasets < 2 {
            return Err(Error::InvalidConfig("batch_datasets must be >= 2".into()));
        }
        if self.samples_per_dataset == 0 {
            return Err(Error::InvalidConfig("samples_per_dataset must be >= 1".into()));
        }
        self.view.validate()?;
        self.sw.validate()
    }

    /// Lambdas with disabled terms zeroed.
    pub fn weights(&self) -> Lambdas {
        let on = |b: bool, v: f64| if b { v } else { 0.0 };
        Lambdas {
            list: on(self.ablation.list, self.lambdas.list),
            cons: on(self.ablation.cons, self.lambdas.cons),
            corr: on(self.ablation.corr, self.lambdas.corr),
            distill: on(self.ablation.distill, self.lambdas.distill),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub list: f64,
    pub cons: f64,
    pub corr: f64,
    pub distill: f64,
    pub total: f64,
    pub list_rows: Vec<f64>,
    pub cons_rows: Vec<f64>,
    pub distill_rows: Vec<f64>,
    /// The correlation term was skipped because one side had zero variance.
    pub corr_skipped: bool,
}

impl LossBreakdown {
    /// Sum of weighted terms.
    pub fn weighted_total(&self, w: &Lambdas) -> f64 {
        w.list * self.list + w.cons * self.cons + w.corr * self.corr + w.distill * self.distill
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub list: f64,
    pub cons: f64,
    pub corr: f64,
    pub distill: f64,
    pub total: f64,
    pub grad_norm: f64,
}

struct Forwarded {
    t1: Trace,
    t2: Option<Trace>,
}

fn unit_centroid(out: &Array2<f64>) -> Result<(Array1<f64>, f64)> {
    let c = mean_row(out);
    let norm = c.dot(&c).sqrt();
    if !(norm > 1e-12) {
        return Err(Error::DegenerateCentroid);
    }
    Ok((c / norm, norm))
}

/// Backprop a gradient on a unit centroid to every output row.
fn centroid_backprop(g_u: &Array1<f64>, u: &Array1<f64>, norm: f64, rows: usize, into: &mut Array2<f64>) {
    let dc = (g_u - &(u * u.dot(g_u))) / norm;
    let per_row = dc / rows as f64;
    for mut r in into.rows_mut() {
        r += &per_row;
    }
}

/// Row groups compared between two datasets: one per shared class when
/// label-aware, otherwise the whole set.
fn sw_groups<'a>(a: &'a EmbeddingSet, b: &'a EmbeddingSet, sw: &SwConfig) -> Vec<(Option<usize>, Vec<usize>, Vec<usize>)> {
    let shared = if sw.label_aware { a.shared_classes(b) } else { Vec::new() };
    if shared.is_empty() {
        return vec![(None, (0..a.n()).collect(), (0..b.n()).collect())];
    }
    shared
        .into_iter()
        .map(|c| {
            (
                Some(c),
                a.class_rows(c).expect("shared").to_vec(),
                b.class_rows(c).expect("shared").to_vec(),
            )
        })
        .collect()
}

/// Per-pair SW on head outputs: value and the (rows, grad) contributions to
/// each side, already divided by the number of groups.
struct PairSw {
    value: f64,
    parts: Vec<(Vec<usize>, Array2<f64>, Vec<usize>, Array2<f64>)>,
}

fn pair_sw(
    a: &EmbeddingSet,
    out_a: &Array2<f64>,
    b: &EmbeddingSet,
    out_b: &Array2<f64>,
    sw: &SwConfig,
    sw_seed: u64,
) -> PairSw {
    let groups = sw_groups(a, b, sw);
    let g = groups.len() as f64;
    let mut value = 0.0;
    let mut parts = Vec::with_capacity(groups.len());
    for (class, ra, rb) in groups {
        let s = class_seed(sw_seed, a.id(), b.id(), class.is_some());
        let (ia, ib) = balanced_subsample(&ra, &rb, sw.per_class_cap, s);
        let dirs = directions(out_a.ncols(), sw.projections, seed::derive(s, &[b"dirs"]));
        let za = out_a.select(ndarray::Axis(0), &ia);
        let zb = out_b.select(ndarray::Axis(0), &ib);
        let r = sw_value_and_grad(za.view(), zb.view(), &dirs);
        value += r.value / g;
        parts.push((ia, r.grad_a / g, ib, r.grad_b / g));
    }
    PairSw { value, parts }
}

/// Composite loss and its parameter gradient on one batch. `sets` are the
/// (already sampled) batch datasets and `p` the matching transfer submatrix.
pub fn composite_step(
    head: &MetricHead,
    sets: &[EmbeddingSet],
    p: &Array2<f64>,
    cfg: &CdeConfig,
    step_seed: u64,
) -> Result<(LossBreakdown, Vec<f64>)> {
    let n = sets.len();
    if n < 2 {
        return Err(Error::TooFew { needed: 2, got: n });
    }
    let w = cfg.weights();
    let need_v2 = w.cons > 0.0;
    let fw: Vec<Forwarded> = sets
        .par_iter()
        .map(|s| {
            let view = |k: u8| -> Result<Trace> {
                let mut rng = seed::rng(seed::derive(step_seed, &[b"view", s.id().as_bytes(), &[k]]));
                forward(head, s.z(), Some((&cfg.view, &mut rng)))
            };
            Ok(Forwarded {
                t1: view(1)?,
                t2: if need_v2 { Some(view(2)?) } else { None },
            })
        })
        .collect::<Result<_>>()?;

    let dim = head.out_dim();
    let mut u1 = Array2::<f64>::zeros((n, dim));
    let mut u2 = Array2::<f64>::zeros((n, dim));
    let mut norms1 = vec![0.0; n];
    let mut norms2 = vec![0.0; n];
    for (i, f) in fw.iter().enumerate() {
        let (u, norm) = unit_centroid(&f.t1.output)?;
        u1.row_mut(i).assign(&u);
        norms1[i] = norm;
        if let Some(t2) = &f.t2 {
            let (u, norm) = unit_centroid(&t2.output)?;
            u2.row_mut(i).assign(&u);
            norms2[i] = norm;
        }
    }

    let mut out = LossBreakdown::default();
    let mut g_u1 = Array2::<f64>::zeros((n, dim));
    let mut g_u2 = Array2::<f64>::zeros((n, dim));
    let mut g_out1: Vec<Array2<f64>> = fw.iter().map(|f| Array2::zeros(f.t1.output.dim())).collect();

    if w.list > 0.0 {
        let l = listwise_loss(p, &u1, cfg.tau)?;
        out.list = l.value;
        out.list_rows = l.rows;
        g_u1.scaled_add(w.list, &l.grad);
    }
    if w.cons > 0.0 {
        let c = consistency_loss(&u1, &u2, cfg.tau)?;
        out.cons = c.value;
        out.cons_rows = c.rows;
        g_u1.scaled_add(w.cons, &c.grad_v1);
        g_u2.scaled_add(w.cons, &c.grad_v2);
    }
    if w.corr > 0.0 || w.distill > 0.0 {
        let sw_seed = seed::derive(step_seed, &[b"sw"]);
        let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| ((i + 1)..n).map(move |j| (i, j))).collect();
        let pair_results: Vec<PairSw> = pairs
            .par_iter()
            .map(|&(i, j)| pair_sw(&sets[i], &fw[i].t1.output, &sets[j], &fw[j].t1.output, &cfg.sw, sw_seed))
            .collect();
        let mut dsw = Array2::<f64>::zeros((n, n));
        for (&(i, j), r) in pairs.iter().zip(&pair_results) {
            dsw[[i, j]] = r.value;
            dsw[[j, i]] = r.value;
        }
        if w.corr > 0.0 {
            let x: Vec<f64> = pair_results.iter().map(|r| r.value).collect();
            let y = upper_triangle(p)?;
            match corr_loss(&x, &y) {
                Ok((value, gx)) => {
                    out.corr = value;
                    for ((&(i, j), r), g) in pairs.iter().zip(&pair_results).zip(gx) {
                        let c = w.corr * g;
                        for (ia, ga, ib, gb) in &r.parts {
                            for (k, &row) in ia.iter().enumerate() {
                                g_out1[i].row_mut(row).scaled_add(c, &ga.row(k));
                            }
                            for (k, &row) in ib.iter().enumerate() {
                                g_out1[j].row_mut(row).scaled_add(c, &gb.row(k));
                            }
                        }
                    }
                }
                Err(Error::ZeroVariance) => {
                    log::warn!("correlation term skipped: zero variance in batch distances or transfer values");
                    out.corr_skipped = true;
                }
                Err(e) => return Err(e),
            }
        }
        if w.distill > 0.0 {
            let d = distill_loss(&dsw, &u1, cfg.tau)?;
            out.distill = d.value;
            out.distill_rows = d.rows;
            g_u1.scaled_add(w.distill, &d.grad);
        }
    }
    out.total = out.weighted_total(&w);

    let mut grad = vec![0.0; head.num_params()];
    for (i, f) in fw.iter().enumerate() {
        let rows = f.t1.output.nrows();
        centroid_backprop(&g_u1.row(i).to_owned(), &u1.row(i).to_owned(), norms1[i], rows, &mut g_out1[i]);
        add(&mut grad, &backward(head, &f.t1, &g_out1[i]));
        if let Some(t2) = &f.t2 {
            let mut g2 = Array2::zeros(t2.output.dim());
            centroid_backprop(&g_u2.row(i).to_owned(), &u2.row(i).to_owned(), norms2[i], rows, &mut g2);
            add(&mut grad, &backward(head, t2, &g2));
        }
    }
    Ok((out, grad))
}

fn add(acc: &mut [f64], g: &[f64]) {
    acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
}

/// Draw up to `m` examples of `set` without replacement.
fn sample_set(set: &EmbeddingSet, m: usize, seed: u64) -> Result<EmbeddingSet> {
    if set.n() <= m {
        return Ok(set.clone());
    }
    let mut rng = seed::rng(seed);
    let mut idx = index::sample(&mut rng, set.n(), m).into_vec();
    idx.sort_unstable();
    set.subset(&idx)
}

/// Shuffled dataset batches for one epoch. A trailing batch with fewer than
/// three datasets is merged into the previous one.
fn epoch_batches(n: usize, size: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(seed));
    let mut batches: Vec<Vec<usize>> = order.chunks(size.min(n)).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() < 3) {
        let tail = batches.pop().expect("nonempty");
        batches.last_mut().expect("nonempty").extend(tail);
    }
    batches
}

fn check_inputs(library: &[EmbeddingSet], p: &TransferMatrix, head: &MetricHead) -> Result<TransferMatrix> {
    if library.len() < 3 {
        return Err(Error::TooFew {
            needed: 3,
            got: library.len(),
        });
    }
    if let Some(s) = library.iter().find(|s| s.dim() != head.in_dim()) {
        return Err(Error::ShapeMismatch(format!(
            "dataset `{}` has dimension {}, head expects {}",
            s.id(),
            s.dim(),
            head.in_dim()
        )));
    }
    let ids: Vec<String> = library.iter().map(|s| s.id().to_string()).collect();
    p.permuted(&ids)
}

/// Full-library loss at the current head, with the stochastic views drawn
/// from a fixed seed so values are comparable across calls.
pub fn evaluate(library: &[EmbeddingSet], p: &TransferMatrix, head: &MetricHead, cfg: &CdeConfig) -> Result<LossBreakdown> {
    cfg.validate()?;
    let p = check_inputs(library, p, head)?;
    let eval_seed = seed::derive(cfg.seed, &[b"eval"]);
    let sets = library
        .iter()
        .map(|s| sample_set(s, cfg.samples_per_dataset, seed::derive(eval_seed, &[b"sample", s.id().as_bytes()])))
        .collect::<Result<Vec<_>>>()?;
    Ok(composite_step(head, &sets, p.values(), cfg, eval_seed)?.0)
}

/// Train a copy of `head`. Deterministic given the inputs and `cfg.seed`.
pub fn train(
    library: &[EmbeddingSet],
    p: &TransferMatrix,
    head: &MetricHead,
    cfg: &CdeConfig,
) -> Result<(MetricHead, Vec<StepLog>)> {
    cfg.validate()?;
    let p = check_inputs(library, p, head)?;
    let mut head = head.clone();
    let mut log_records = Vec::new();
    let mut params = head.to_flat();
    let mut opt = Adam::new(params.len(), cfg.lr, cfg.adam);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let batches = epoch_batches(
            library.len(),
            cfg.batch_datasets,
            seed::derive(cfg.seed, &[b"epoch", &(epoch as u64).to_le_bytes()]),
        );
        for batch in batches {
            let step_seed = seed::derive(cfg.seed, &[b"step", &(step as u64).to_le_bytes()]);
            let sets = batch
                .iter()
                .map(|&i| {
                    let s = &library[i];
                    sample_set(s, cfg.samples_per_dataset, seed::derive(step_seed, &[b"sample", s.id().as_bytes()]))
                })
                .collect::<Result<Vec<_>>>()?;
            let pb = p.submatrix(&batch);
            let diverged = |detail: String| Error::Diverged { epoch, step, detail };
            let (loss, mut grad) = match composite_step(&head, &sets, pb.values(), cfg, step_seed) {
                Ok(r) => r,
                Err(Error::NonFinite(msg)) => return Err(diverged(msg)),
                Err(e) => return Err(e),
            };
            if !loss.total.is_finite() {
                return Err(diverged(format!("loss {}", loss.total)));
            }
            let grad_norm = clip_global_norm(&mut grad, cfg.clip_norm);
            if !grad_norm.is_finite() {
                return Err(diverged(format!("gradient norm {grad_norm}")));
            }
            opt.step(&mut params, &grad);
            head.set_flat(&params)?;
            log::debug!("epoch {epoch} step {step} loss {:.6} |g| {grad_norm:.4}", loss.total);
            log_records.push(StepLog {
                epoch,
                step,
                list: loss.list,
                cons: loss.cons,
                corr: loss.corr,
                distill: loss.distill,
                total: loss.total,
                grad_norm,
            });
            step += 1;
        }
    }
    Ok((head, log_records))
}
