//! The four refinement losses with analytic gradients.
//!
//! Centroid similarities are raw dot products `s_ij = u_i . u_j`; callers pass
//! unit rows, but the gradients are exact for any input so they can be checked
//! by finite differences without re-projecting.

use ndarray::Array2;

use crate::error::{Error, Result};

/// Scalar loss, its per-row contributions where meaningful, and gradient(s).
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub value: f64,
    pub rows: Vec<f64>,
    pub grad: Array2<f64>,
}

fn check_rows(u: &Array2<f64>) -> Result<usize> {
    let n = u.nrows();
    if n < 2 {
        return Err(Error::TooFew { needed: 2, got: n });
    }
    Ok(n)
}

/// Softmax over j != i of `logits[j]`; entry i is 0. Also returns log-probs
/// (entry i is -inf).
fn softmax_offdiag(logits: impl Fn(usize) -> f64, n: usize, i: usize) -> (Vec<f64>, Vec<f64>) {
    let max = (0..n)
        .filter(|&j| j != i)
        .map(&logits)
        .fold(f64::NEG_INFINITY, f64::max);
    let lse = max
        + (0..n)
            .filter(|&j| j != i)
            .map(|j| (logits(j) - max).exp())
            .sum::<f64>()
            .ln();
    let mut p = vec![0.0; n];
    let mut logp = vec![f64::NEG_INFINITY; n];
    for j in (0..n).filter(|&j| j != i) {
        logp[j] = logits(j) - lse;
        p[j] = logp[j].exp();
    }
    (p, logp)
}

fn kl(p: &[f64], logp: &[f64], logq: &[f64]) -> f64 {
    p.iter()
        .zip(logp)
        .zip(logq)
        .filter(|((&pk, _), _)| pk > 0.0)
        .map(|((pk, lp), lq)| pk * (lp - lq))
        .sum()
}

/// dL/dU for L depending on U only through s = U U^T, given dL/ds in `g`.
fn similarity_backprop(g: &Array2<f64>, u: &Array2<f64>) -> Array2<f64> {
    (g + &g.t()).dot(u)
}

/// (1/N) sum_i KL(q_i || p_i) with q_i = softmax_{j != i}(-cost_ij / tau) held
/// constant and p_i = softmax_{j != i}(s_ij / tau).
fn teacher_kl(cost: &Array2<f64>, u: &Array2<f64>, tau: f64) -> Result<LossGrad> {
    let n = check_rows(u)?;
    if cost.dim() != (n, n) {
        return Err(Error::ShapeMismatch(format!(
            "teacher matrix is {:?}, expected {n}x{n}",
            cost.dim()
        )));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidConfig(format!("tau must be > 0, got {tau}")));
    }
    let s = u.dot(&u.t());
    let mut g = Array2::<f64>::zeros((n, n));
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let (q, logq) = softmax_offdiag(|j| -cost[[i, j]] / tau, n, i);
        let (p, logp) = softmax_offdiag(|j| s[[i, j]] / tau, n, i);
        rows.push(kl(&q, &logq, &logp));
        for j in (0..n).filter(|&j| j != i) {
            g[[i, j]] = (p[j] - q[j]) / (n as f64 * tau);
        }
    }
    Ok(LossGrad {
        value: rows.iter().sum::<f64>() / n as f64,
        rows,
        grad: similarity_backprop(&g, u),
    })
}

/// Listwise ranking loss: rows of the transfer matrix (lower error = more
/// mass) are the teacher for the centroid-similarity softmax.
pub fn listwise_loss(p: &Array2<f64>, centroids: &Array2<f64>, tau: f64) -> Result<LossGrad> {
    teacher_kl(p, centroids, tau)
}

/// Distillation loss: the teacher comes from the (constant) SW distance matrix.
pub fn distill_loss(dsw: &Array2<f64>, centroids: &Array2<f64>, tau: f64) -> Result<LossGrad> {
    teacher_kl(dsw, centroids, tau)
}

/// Symmetrized KL between the row softmaxes of two views.
#[derive(Debug, Clone)]
pub struct ConsistencyGrad {
    pub value: f64,
    pub rows: Vec<f64>,
    pub grad_v1: Array2<f64>,
    pub grad_v2: Array2<f64>,
}

/// (1/2N) sum_i [KL(p1_i || p2_i) + KL(p2_i || p1_i)].
pub fn consistency_loss(v1: &Array2<f64>, v2: &Array2<f64>, tau: f64) -> Result<ConsistencyGrad> {
    let n = check_rows(v1)?;
    if v1.dim() != v2.dim() {
        return Err(Error::ShapeMismatch(format!("views {:?} vs {:?}", v1.dim(), v2.dim())));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidConfig(format!("tau must be > 0, got {tau}")));
    }
    let s1 = v1.dot(&v1.t());
    let s2 = v2.dot(&v2.t());
    let mut g1 = Array2::<f64>::zeros((n, n));
    let mut g2 = Array2::<f64>::zeros((n, n));
    let mut rows = Vec::with_capacity(n);
    let scale = 1.0 / (2.0 * n as f64 * tau);
    for i in 0..n {
        let (p1, lp1) = softmax_offdiag(|j| s1[[i, j]] / tau, n, i);
        let (p2, lp2) = softmax_offdiag(|j| s2[[i, j]] / tau, n, i);
        let k12 = kl(&p1, &lp1, &lp2);
        let k21 = kl(&p2, &lp2, &lp1);
        rows.push(0.5 * (k12 + k21));
        for j in (0..n).filter(|&j| j != i) {
            g1[[i, j]] = scale * (p1[j] * (lp1[j] - lp2[j] - k12) + p1[j] - p2[j]);
            g2[[i, j]] = scale * (p2[j] * (lp2[j] - lp1[j] - k21) + p2[j] - p1[j]);
        }
    }
    Ok(ConsistencyGrad {
        value: rows.iter().sum::<f64>() / n as f64,
        rows,
        grad_v1: similarity_backprop(&g1, v1),
        grad_v2: similarity_backprop(&g2, v2),
    })
}

/// 1 - pearson(x, y) and its gradient w.r.t. x.
pub fn corr_loss(x: &[f64], y: &[f64]) -> Result<(f64, Vec<f64>)> {
    if x.len() != y.len() {
        return Err(Error::ShapeMismatch(format!("{} vs {} entries", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::TooFew { needed: 2, got: x.len() });
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let xc: Vec<f64> = x.iter().map(|v| v - mx).collect();
    let yc: Vec<f64> = y.iter().map(|v| v - my).collect();
    let sxx: f64 = xc.iter().map(|v| v * v).sum();
    let syy: f64 = yc.iter().map(|v| v * v).sum();
    if !(sxx > 0.0 && syy > 0.0) {
        return Err(Error::ZeroVariance);
    }
    let sxy: f64 = xc.iter().zip(&yc).map(|(a, b)| a * b).sum();
    let denom = (sxx * syy).sqrt();
    let rho = (sxy / denom).clamp(-1.0, 1.0);
    let grad = xc
        .iter()
        .zip(&yc)
        .map(|(a, b)| -(b / denom - rho * a / sxx))
        .collect();
    Ok((1.0 - rho, grad))
}
