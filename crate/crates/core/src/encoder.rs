//! Per-sample encoders and the trainable metric head.
//!
//! The encoder is frozen: either embeddings are read from disk as-is, or a toy
//! linear projection maps raw features to embeddings. The metric head is a
//! small MLP on top of the embeddings; it is the only thing contrastive
//! refinement updates, so its forward pass records what the backward pass needs.

use std::path::Path;

use ndarray::{Array1, Array2, Axis, Zip};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{self, mean_row};
use crate::error::{Error, Result};
use crate::seed::{self, Rng};

pub const HEAD_MAGIC: &[u8; 4] = b"DGH1";

#[derive(Debug, Clone, PartialEq)]
pub enum EncoderSpec {
    /// Embeddings were produced elsewhere and are read from disk unchanged.
    FileBacked,
    /// z = x W with W of shape d_raw x d_emb.
    ToyLinear { weights: Array2<f64>, seed: u64 },
}

impl EncoderSpec {
    /// Toy linear encoder with W entries drawn from N(0, 1/d_raw).
    pub fn toy_linear(d_raw: usize, d_emb: usize, seed: u64) -> Result<Self> {
        if d_raw == 0 || d_emb == 0 {
            return Err(Error::InvalidConfig("toy encoder dims must be >= 1".into()));
        }
        let mut rng = seed::rng(seed::derive(seed, &[b"toy-encoder"]));
        let scale = 1.0 / (d_raw as f64).sqrt();
        let weights = Array2::from_shape_simple_fn((d_raw, d_emb), || {
            scale * seed::normal(&mut rng)
        });
        Ok(EncoderSpec::ToyLinear { weights, seed })
    }

    pub fn encode(&self, raw: &Array2<f64>) -> Result<Array2<f64>> {
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("encoder input".into()));
        }
        match self {
            EncoderSpec::FileBacked => Ok(raw.clone()),
            EncoderSpec::ToyLinear { weights, .. } => {
                if raw.ncols() != weights.nrows() {
                    return Err(Error::ShapeMismatch(format!(
                        "encoder expects {} input columns, got {}",
                        weights.nrows(),
                        raw.ncols()
                    )));
                }
                Ok(raw.dot(weights))
            }
        }
    }

    /// Read a DGE1 file and encode it.
    pub fn encode_file(&self, path: &Path) -> Result<Array2<f64>> {
        let raw = data::read_embeddings(path)?;
        self.encode(&raw)
    }

    /// Stable identifier for caching.
    pub fn digest(&self) -> String {
        match self {
            EncoderSpec::FileBacked => "file".to_string(),
            EncoderSpec::ToyLinear { weights, seed } => {
                let mut bytes = seed.to_le_bytes().to_vec();
                bytes.extend(data::encode_embeddings(weights));
                format!("toy-{}", seed::digest_hex(&bytes))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation value.
    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = pre.tanh();
                1.0 - t * t
            }
        }
    }

    fn code(self) -> u32 {
        match self {
            Activation::Relu => 0,
            Activation::Tanh => 1,
        }
    }

    fn from_code(code: u32) -> Result<Self> {
        match code {
            0 => Ok(Activation::Relu),
            1 => Ok(Activation::Tanh),
            other => Err(Error::parse("head checkpoint", format!("unknown activation code {other}"))),
        }
    }
}

/// Affine layer y = x W + b, W of shape in x out.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadInit {
    /// He/Glorot-style Gaussian weights, zero biases.
    Random,
    /// Two-layer relu head that starts as the identity map: the hidden layer
    /// carries x and -x and the output recombines them. Remaining hidden units
    /// get small random weights in and zero weights out.
    Identity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricHead {
    layers: Vec<Layer>,
    activation: Activation,
}

impl MetricHead {
    pub fn new(layers: Vec<Layer>, activation: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidConfig("metric head needs at least one layer".into()));
        }
        for (i, layer) in layers.iter().enumerate() {
            if layer.w.ncols() != layer.b.len() || layer.w.nrows() == 0 || layer.w.ncols() == 0 {
                return Err(Error::ShapeMismatch(format!("layer {i}: weight/bias dims disagree")));
            }
            if i > 0 && layers[i - 1].w.ncols() != layer.w.nrows() {
                return Err(Error::ShapeMismatch(format!("layer {i} input does not chain")));
            }
            if layer.w.iter().chain(layer.b.iter()).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("layer {i} parameters")));
            }
        }
        Ok(Self { layers, activation })
    }

    /// Head with the given layer widths, e.g. `[16, 64, 16]` for one hidden layer.
    pub fn init(dims: &[usize], activation: Activation, init: HeadInit, seed: u64) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::InvalidConfig(format!("invalid head dims {dims:?}")));
        }
        let mut rng = seed::rng(seed::derive(seed, &[b"head-init"]));
        let gain = match activation {
            Activation::Relu => 2.0,
            Activation::Tanh => 1.0,
        };
        let mut layers: Vec<Layer> = dims
            .windows(2)
            .map(|w| {
                let std = (gain / w[0] as f64).sqrt();
                Layer {
                    w: Array2::from_shape_simple_fn((w[0], w[1]), || {
                        std * seed::normal(&mut rng)
                    }),
                    b: Array1::zeros(w[1]),
                }
            })
            .collect();
        if init == HeadInit::Identity {
            let (d_in, hidden, d_out) = match dims {
                [a, h, o] => (*a, *h, *o),
                _ => {
                    return Err(Error::InvalidConfig(
                        "identity init needs exactly one hidden layer".into(),
                    ))
                }
            };
            if activation != Activation::Relu || d_out != d_in || hidden < 2 * d_in {
                return Err(Error::InvalidConfig(
                    "identity init needs relu, out_dim == in_dim and hidden >= 2 * in_dim".into(),
                ));
            }
            let first = &mut layers[0].w;
            first.slice_mut(ndarray::s![.., ..2 * d_in]).fill(0.0);
            first.mapv_inplace(|v| 0.1 * v);
            let second = &mut layers[1].w;
            second.fill(0.0);
            for i in 0..d_in {
                layers[0].w[[i, i]] = 1.0;
                layers[0].w[[i, d_in + i]] = -1.0;
                layers[1].w[[i, i]] = 1.0;
                layers[1].w[[d_in + i, i]] = -1.0;
            }
        }
        Self::new(layers, activation)
    }

    /// Default head for `dim`-dimensional embeddings: one hidden layer of 64
    /// relu units (at least 2 * dim), identity-initialized.
    pub fn default_for(dim: usize, seed: u64) -> Result<Self> {
        let hidden = 64.max(2 * dim);
        Self::init(&[dim, hidden, dim], Activation::Relu, HeadInit::Identity, seed)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].w.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().w.ncols()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// Parameters flattened layer by layer: W row-major, then b.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend(l.w.iter());
            out.extend(l.b.iter());
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                flat.len()
            )));
        }
        let mut it = flat.iter().copied();
        for l in &mut self.layers {
            for v in l.w.iter_mut().chain(l.b.iter_mut()) {
                *v = it.next().unwrap();
            }
        }
        Ok(())
    }

    pub fn digest(&self) -> String {
        seed::digest_hex(&encode_head(self))
    }
}

/// Deterministic forward pass; hidden layers use the activation, the last layer is affine.
pub fn apply_head(head: &MetricHead, z: &Array2<f64>) -> Result<Array2<f64>> {
    let trace = forward(head, z, None)?;
    Ok(trace.output)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewConfig {
    pub dropout_p: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for ViewConfig {
    fn default() -> Self {
        Self {
            dropout_p: 0.1,
            noise_sigma: 0.01,
            seed: 0,
        }
    }
}

impl ViewConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::InvalidConfig(format!("dropout_p {} not in [0, 1)", self.dropout_p)));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::InvalidConfig(format!("noise_sigma {} < 0", self.noise_sigma)));
        }
        Ok(())
    }
}

/// Two stochastic passes through the head with independent dropout masks
/// and input noise. Reproducible from `cfg.seed`.
pub fn stochastic_views(
    head: &MetricHead,
    z: &Array2<f64>,
    cfg: &ViewConfig,
) -> Result<(Array2<f64>, Array2<f64>)> {
    cfg.validate()?;
    let mut r1 = seed::rng(seed::derive(cfg.seed, &[b"view", &[1]]));
    let mut r2 = seed::rng(seed::derive(cfg.seed, &[b"view", &[2]]));
    let a = forward(head, z, Some((cfg, &mut r1)))?;
    let b = forward(head, z, Some((cfg, &mut r2)))?;
    Ok((a.output, b.output))
}

/// Everything the backward pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    /// Input of each layer after noise injection.
    inputs: Vec<Array2<f64>>,
    /// Pre-activations of hidden layers.
    pre: Vec<Array2<f64>>,
    /// Inverted-dropout multipliers (0 or 1/(1-p)) of hidden layers.
    masks: Vec<Option<Array2<f64>>>,
    pub output: Array2<f64>,
}

/// Forward pass, stochastic when `view` is given: Gaussian noise of std
/// `noise_sigma` is added to every layer input and inverted dropout is applied
/// to every hidden activation.
pub fn forward(
    head: &MetricHead,
    z: &Array2<f64>,
    mut view: Option<(&ViewConfig, &mut Rng)>,
) -> Result<Trace> {
    if z.ncols() != head.in_dim() {
        return Err(Error::ShapeMismatch(format!(
            "head expects {} input columns, got {}",
            head.in_dim(),
            z.ncols()
        )));
    }
    let last = head.layers.len() - 1;
    let mut inputs = Vec::with_capacity(head.layers.len());
    let mut pre = Vec::with_capacity(last);
    let mut masks = Vec::with_capacity(last);
    let mut x = z.clone();
    for (li, layer) in head.layers.iter().enumerate() {
        if let Some((cfg, rng)) = view.as_mut() {
            if cfg.noise_sigma > 0.0 {
                let sigma = cfg.noise_sigma;
                x.mapv_inplace(|v| v + sigma * seed::normal(rng));
            }
        }
        let mut a = x.dot(&layer.w);
        a += &layer.b;
        inputs.push(x);
        if li == last {
            x = a;
            break;
        }
        let mut h = a.mapv(|v| head.activation.apply(v));
        let mask = match view.as_mut() {
            Some((cfg, rng)) if cfg.dropout_p > 0.0 => {
                let keep = 1.0 / (1.0 - cfg.dropout_p);
                let p = cfg.dropout_p;
                let m = Array2::from_shape_simple_fn(h.dim(), || {
                    if rng.random::<f64>() < p {
                        0.0
                    } else {
                        keep
                    }
                });
                h *= &m;
                Some(m)
            }
            _ => None,
        };
        pre.push(a);
        masks.push(mask);
        x = h;
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("metric head output (diverged parameters?)".into()));
    }
    Ok(Trace {
        inputs,
        pre,
        masks,
        output: x,
    })
}

/// Gradient of a scalar loss w.r.t. the head parameters, given its gradient
/// w.r.t. the traced output. Returned in `MetricHead::to_flat` order.
pub fn backward(head: &MetricHead, trace: &Trace, grad_out: &Array2<f64>) -> Vec<f64> {
    let n_layers = head.layers.len();
    let mut per_layer: Vec<(Array2<f64>, Array1<f64>)> = Vec::with_capacity(n_layers);
    let mut g = grad_out.clone();
    for li in (0..n_layers).rev() {
        let layer = &head.layers[li];
        let x = &trace.inputs[li];
        let gw = x.t().dot(&g);
        let gb = g.sum_axis(Axis(0));
        per_layer.push((gw, gb));
        if li == 0 {
            break;
        }
        let mut gx = g.dot(&layer.w.t());
        let hidden = li - 1;
        if let Some(m) = &trace.masks[hidden] {
            gx *= m;
        }
        let act = head.activation;
        Zip::from(&mut gx)
            .and(&trace.pre[hidden])
            .for_each(|gv, &p| *gv *= act.derivative(p));
        g = gx;
    }
    per_layer.reverse();
    let mut flat = Vec::with_capacity(head.num_params());
    for (gw, gb) in per_layer {
        flat.extend(gw.iter());
        flat.extend(gb.iter());
    }
    flat
}

/// Row mean, l2-normalized.
pub fn dataset_centroid(z: &Array2<f64>) -> Result<Array1<f64>> {
    if z.nrows() == 0 {
        return Err(Error::ShapeMismatch("centroid of an empty set".into()));
    }
    let m = mean_row(z);
    let norm = m.dot(&m).sqrt();
    if !(norm > 1e-12) {
        return Err(Error::DegenerateCentroid);
    }
    Ok(m / norm)
}

// ---------------------------------------------------------------------------
// checkpoint: "DGH1", u32 layer count, u32 activation, per layer (u32 in,
// u32 out), then per layer W row-major and b as little-endian f32.

pub fn encode_head(head: &MetricHead) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(HEAD_MAGIC);
    out.extend_from_slice(&(head.layers.len() as u32).to_le_bytes());
    out.extend_from_slice(&head.activation.code().to_le_bytes());
    for l in &head.layers {
        out.extend_from_slice(&(l.w.nrows() as u32).to_le_bytes());
        out.extend_from_slice(&(l.w.ncols() as u32).to_le_bytes());
    }
    for v in head.to_flat() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_head(bytes: &[u8]) -> Result<MetricHead> {
    let ctx = "head checkpoint";
    let take_u32 = |at: usize| -> Result<u32> {
        bytes
            .get(at..at + 4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
            .ok_or_else(|| Error::parse(ctx, "truncated"))
    };
    if bytes.len() < 12 || &bytes[..4] != HEAD_MAGIC {
        return Err(Error::parse(ctx, "bad magic, expected DGH1"));
    }
    let n_layers = take_u32(4)? as usize;
    let activation = Activation::from_code(take_u32(8)?)?;
    if n_layers == 0 || n_layers > 1024 {
        return Err(Error::parse(ctx, format!("implausible layer count {n_layers}")));
    }
    let mut dims = Vec::with_capacity(n_layers);
    let mut at = 12;
    for _ in 0..n_layers {
        dims.push((take_u32(at)? as usize, take_u32(at + 4)? as usize));
        at += 8;
    }
    let total: usize = dims.iter().map(|(i, o)| i * o + o).sum();
    let payload = &bytes[at..];
    if payload.len() != total * 4 {
        return Err(Error::parse(ctx, format!("expected {} parameter bytes, found {}", total * 4, payload.len())));
    }
    let mut vals = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64);
    let layers = dims
        .iter()
        .map(|&(i, o)| {
            let w = Array2::from_shape_fn((i, o), |_| vals.next().unwrap());
            let b = Array1::from_shape_fn(o, |_| vals.next().unwrap());
            Layer { w, b }
        })
        .collect();
    MetricHead::new(layers, activation)
}

pub fn save_head(path: &Path, head: &MetricHead) -> Result<()> {
    data::write_file(path, &encode_head(head))
}

pub fn load_head(path: &Path) -> Result<MetricHead> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_head(&bytes)
}
