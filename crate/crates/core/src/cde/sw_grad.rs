//! Subgradient of sliced W2 through the sort: the matching induced by each
//! projection's sort order is frozen and the resulting quadratic is
//! differentiated. Exact wherever no projected values tie.

use ndarray::{Array2, ArrayView2};

use crate::distance::{directions, SwConfig};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct SwGrad {
    pub value: f64,
    pub grad_a: Array2<f64>,
    pub grad_b: Array2<f64>,
}

fn argsort(v: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]).then(a.cmp(&b)));
    idx
}

/// Sliced W2 over the given unit directions, with gradients w.r.t. both point sets.
pub fn sw_value_and_grad(za: ArrayView2<f64>, zb: ArrayView2<f64>, dirs: &Array2<f64>) -> SwGrad {
    let (k, d) = za.dim();
    let l = dirs.nrows();
    let mut grad_a = Array2::<f64>::zeros((k, d));
    let mut grad_b = Array2::<f64>::zeros((k, d));
    let mut sq = 0.0;
    let coeff = 2.0 / (l as f64 * k as f64);
    for u in dirs.rows() {
        let pa = za.dot(&u).to_vec();
        let pb = zb.dot(&u).to_vec();
        let oa = argsort(&pa);
        let ob = argsort(&pb);
        for (&ia, &ib) in oa.iter().zip(&ob) {
            let diff = pa[ia] - pb[ib];
            sq += diff * diff;
            let c = coeff * diff;
            grad_a.row_mut(ia).scaled_add(c, &u);
            grad_b.row_mut(ib).scaled_add(-c, &u);
        }
    }
    let value = (sq / (l as f64 * k as f64)).sqrt();
    if value > 0.0 {
        let s = 1.0 / (2.0 * value);
        grad_a *= s;
        grad_b *= s;
    } else {
        grad_a.fill(0.0);
        grad_b.fill(0.0);
    }
    SwGrad { value, grad_a, grad_b }
}

/// Same value as `distance::sliced_w2(za, zb, cfg)`, plus gradients.
pub fn sw_subgradient(za: &Array2<f64>, zb: &Array2<f64>, cfg: &SwConfig) -> Result<SwGrad> {
    cfg.validate()?;
    if za.dim() != zb.dim() || za.nrows() == 0 {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", za.dim(), zb.dim())));
    }
    let dirs = directions(za.ncols(), cfg.projections, cfg.seed);
    Ok(sw_value_and_grad(za.view(), zb.view(), &dirs))
}
