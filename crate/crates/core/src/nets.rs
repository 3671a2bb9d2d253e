//! Small differentiable networks over a flat parameter vector: GraphConv
//! message passing, MLPs, Gaussian and categorical heads, and Adam.
//!
//! Every forward pass that feeds a gradient returns a cache; the matching
//! `backward` accumulates into a gradient buffer laid out like the
//! parameters.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::Rng;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum NetError {
    #[error("{what}: expected {expected}, got {got}")]
    Shape {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("non-finite value after layer {layer}")]
    NonFinite { layer: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

fn check_len(what: &'static str, expected: usize, got: usize) -> Result<(), NetError> {
    if expected == got {
        Ok(())
    } else {
        Err(NetError::Shape { what, expected, got })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// All trainable parameters of one network, flattened, with the named
/// tensors they came from.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub entries: Vec<ParamEntry>,
    pub values: Vec<f64>,
}

impl ParamVector {
    pub fn new() -> Self {
        Self::default()
    }

    /// Reserves a zero-filled tensor and returns its offset.
    pub fn alloc(&mut self, name: &str, shape: &[usize]) -> usize {
        let offset = self.values.len();
        let entry = ParamEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
            offset,
        };
        self.values.resize(offset + entry.len(), 0.0);
        self.entries.push(entry);
        offset
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .map(|e| &self.values[e.range()])
    }

    pub fn zeros_like(&self) -> Vec<f64> {
        vec![0.0; self.values.len()]
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.values.clone()
    }

    /// Replaces all values from a flat vector of matching length.
    pub fn unflatten(&mut self, flat: &[f64]) -> Result<(), NetError> {
        check_len("parameter count", self.values.len(), flat.len())?;
        self.values.copy_from_slice(flat);
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn same_layout(&self, other: &ParamVector) -> bool {
        self.entries == other.entries && self.values.len() == other.values.len()
    }
}

/// Gaussian weights scaled by `gain / sqrt(fan_in)`.
fn init_weights(values: &mut [f64], fan_in: usize, gain: f64, rng: &mut Rng) {
    let scale = gain / (fan_in.max(1) as f64).sqrt();
    for v in values {
        let z: f64 = rng.sample(StandardNormal);
        *v = z * scale;
    }
}

/// Affine map `y = W x + b` with `W` stored row-major as `out x inp`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inp: usize,
    pub out: usize,
    pub w: usize,
    pub b: usize,
}

impl Dense {
    pub fn new(params: &mut ParamVector, name: &str, inp: usize, out: usize) -> Self {
        let w = params.alloc(&format!("{name}.weight"), &[out, inp]);
        let b = params.alloc(&format!("{name}.bias"), &[out]);
        Self { inp, out, w, b }
    }

    pub fn init(&self, p: &mut [f64], gain: f64, rng: &mut Rng) {
        init_weights(&mut p[self.w..self.w + self.out * self.inp], self.inp, gain, rng);
        p[self.b..self.b + self.out].iter_mut().for_each(|v| *v = 0.0);
    }

    pub fn forward(&self, p: &[f64], x: &[f64], y: &mut [f64]) {
        let w = &p[self.w..self.w + self.out * self.inp];
        for (o, yo) in y.iter_mut().enumerate() {
            *yo = p[self.b + o] + dot(&w[o * self.inp..(o + 1) * self.inp], x);
        }
    }

    /// Accumulates parameter gradients and, if asked, adds `W^T dy` to `dx`.
    pub fn backward(&self, p: &[f64], x: &[f64], dy: &[f64], grad: &mut [f64], dx: Option<&mut [f64]>) {
        for (o, &g) in dy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad[self.b + o] += g;
            axpy(g, x, &mut grad[self.w + o * self.inp..self.w + (o + 1) * self.inp]);
        }
        if let Some(dx) = dx {
            let w = &p[self.w..self.w + self.out * self.inp];
            for (o, &g) in dy.iter().enumerate() {
                if g != 0.0 {
                    axpy(g, &w[o * self.inp..(o + 1) * self.inp], dx);
                }
            }
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// One message-passing layer: `h'_u = tanh(W1 h_u + W2 sum_{v in N(u)} h_v + b)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraphConv {
    pub inp: usize,
    pub out: usize,
    pub w1: usize,
    pub w2: usize,
    pub b: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphNet {
    pub input: usize,
    pub layers: Vec<GraphConv>,
}

/// Per-layer node states (`hs[0]` is the input) and neighbor sums.
#[derive(Debug, Clone, Default)]
pub struct GraphCache {
    pub nodes: usize,
    pub hs: Vec<Vec<f64>>,
    pub sums: Vec<Vec<f64>>,
}

impl GraphCache {
    pub fn output(&self) -> &[f64] {
        self.hs.last().map(|h| h.as_slice()).unwrap_or(&[])
    }
}

impl GraphNet {
    pub fn new(params: &mut ParamVector, name: &str, input: usize, hidden: &[usize]) -> Self {
        let mut layers = Vec::with_capacity(hidden.len());
        let mut inp = input;
        for (i, &out) in hidden.iter().enumerate() {
            let w1 = params.alloc(&format!("{name}.{i}.self_weight"), &[out, inp]);
            let w2 = params.alloc(&format!("{name}.{i}.neighbor_weight"), &[out, inp]);
            let b = params.alloc(&format!("{name}.{i}.bias"), &[out]);
            layers.push(GraphConv { inp, out, w1, w2, b });
            inp = out;
        }
        Self { input, layers }
    }

    pub fn init(&self, p: &mut [f64], rng: &mut Rng) {
        for l in &self.layers {
            // self and neighbor paths share the fan-in budget
            init_weights(&mut p[l.w1..l.w1 + l.out * l.inp], 2 * l.inp, 1.0, rng);
            init_weights(&mut p[l.w2..l.w2 + l.out * l.inp], 2 * l.inp, 1.0, rng);
            p[l.b..l.b + l.out].iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn output_size(&self) -> usize {
        self.layers.last().map_or(self.input, |l| l.out)
    }

    /// Runs all layers on row-major node features (`nodes x input`).
    pub fn forward(&self, p: &[f64], nbrs: &[Vec<usize>], x: &[f64]) -> Result<GraphCache, NetError> {
        let n = nbrs.len();
        check_len("graph node features", n * self.input, x.len())?;
        let mut cache = GraphCache {
            nodes: n,
            hs: Vec::with_capacity(self.layers.len() + 1),
            sums: Vec::with_capacity(self.layers.len()),
        };
        cache.hs.push(x.to_vec());
        for (li, l) in self.layers.iter().enumerate() {
            let h = cache.hs.last().expect("input present");
            let mut s = vec![0.0; n * l.inp];
            for (u, nu) in nbrs.iter().enumerate() {
                let su = &mut s[u * l.inp..(u + 1) * l.inp];
                for &v in nu {
                    axpy(1.0, &h[v * l.inp..(v + 1) * l.inp], su);
                }
            }
            let w1 = &p[l.w1..l.w1 + l.out * l.inp];
            let w2 = &p[l.w2..l.w2 + l.out * l.inp];
            let mut out = vec![0.0; n * l.out];
            for u in 0..n {
                let hu = &h[u * l.inp..(u + 1) * l.inp];
                let su = &s[u * l.inp..(u + 1) * l.inp];
                for o in 0..l.out {
                    let row = o * l.inp..(o + 1) * l.inp;
                    let pre = p[l.b + o] + dot(&w1[row.clone()], hu) + dot(&w2[row], su);
                    out[u * l.out + o] = pre.tanh();
                }
            }
            if out.iter().any(|v| !v.is_finite()) {
                return Err(NetError::NonFinite { layer: li });
            }
            cache.sums.push(s);
            cache.hs.push(out);
        }
        Ok(cache)
    }

    /// Backpropagates `dout` (`nodes x output_size`) through the cached pass.
    pub fn backward(&self, p: &[f64], nbrs: &[Vec<usize>], cache: &GraphCache, dout: &[f64], grad: &mut [f64]) {
        let n = cache.nodes;
        let mut dh = dout.to_vec();
        for (li, l) in self.layers.iter().enumerate().rev() {
            let h_out = &cache.hs[li + 1];
            let h_in = &cache.hs[li];
            let s = &cache.sums[li];
            let dpre: Vec<f64> = dh
                .iter()
                .zip(h_out)
                .map(|(g, y)| g * (1.0 - y * y))
                .collect();
            let need_input = li > 0;
            let mut dh_in = vec![0.0; if need_input { n * l.inp } else { 0 }];
            let mut ds = vec![0.0; if need_input { n * l.inp } else { 0 }];
            let w1 = &p[l.w1..l.w1 + l.out * l.inp];
            let w2 = &p[l.w2..l.w2 + l.out * l.inp];
            for u in 0..n {
                let hu = &h_in[u * l.inp..(u + 1) * l.inp];
                let su = &s[u * l.inp..(u + 1) * l.inp];
                for o in 0..l.out {
                    let g = dpre[u * l.out + o];
                    if g == 0.0 {
                        continue;
                    }
                    grad[l.b + o] += g;
                    let row = o * l.inp..(o + 1) * l.inp;
                    axpy(g, hu, &mut grad[l.w1 + row.start..l.w1 + row.end]);
                    axpy(g, su, &mut grad[l.w2 + row.start..l.w2 + row.end]);
                    if need_input {
                        axpy(g, &w1[row.clone()], &mut dh_in[u * l.inp..(u + 1) * l.inp]);
                        axpy(g, &w2[row], &mut ds[u * l.inp..(u + 1) * l.inp]);
                    }
                }
            }
            if !need_input {
                break;
            }
            // neighbor sums are linear in the neighbors' states
            for (u, nu) in nbrs.iter().enumerate() {
                for &v in nu {
                    let (src, dst) = (u * l.inp..(u + 1) * l.inp, v * l.inp..(v + 1) * l.inp);
                    for (a, b) in src.zip(dst) {
                        dh_in[b] += ds[a];
                    }
                }
            }
            dh = dh_in;
        }
    }
}

/// Affine layers with tanh between them; the last layer is affine only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

#[derive(Debug, Clone, Default)]
pub struct MlpCache {
    /// Input followed by every layer's output (post-activation for hidden layers).
    pub acts: Vec<Vec<f64>>,
}

impl MlpCache {
    pub fn output(&self) -> &[f64] {
        self.acts.last().map(|a| a.as_slice()).unwrap_or(&[])
    }
}

impl Mlp {
    /// `sizes` lists input, hidden and output widths.
    pub fn new(params: &mut ParamVector, name: &str, sizes: &[usize]) -> Self {
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| Dense::new(params, &format!("{name}.{i}"), w[0], w[1]))
            .collect();
        Self { layers }
    }

    /// Initializes every layer; the last one gets `out_gain`.
    pub fn init(&self, p: &mut [f64], out_gain: f64, rng: &mut Rng) {
        let last = self.layers.len().saturating_sub(1);
        for (i, l) in self.layers.iter().enumerate() {
            l.init(p, if i == last { out_gain } else { 1.0 }, rng);
        }
    }

    pub fn input_size(&self) -> usize {
        self.layers.first().map_or(0, |l| l.inp)
    }

    pub fn output_size(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out)
    }

    pub fn forward(&self, p: &[f64], x: &[f64]) -> Result<MlpCache, NetError> {
        check_len("mlp input", self.input_size(), x.len())?;
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_vec());
        let last = self.layers.len().saturating_sub(1);
        for (i, l) in self.layers.iter().enumerate() {
            let mut y = vec![0.0; l.out];
            l.forward(p, acts.last().expect("input present"), &mut y);
            if i < last {
                y.iter_mut().for_each(|v| *v = v.tanh());
            }
            if y.iter().any(|v| !v.is_finite()) {
                return Err(NetError::NonFinite { layer: i });
            }
            acts.push(y);
        }
        Ok(MlpCache { acts })
    }

    /// Backpropagates `dout`; returns the gradient with respect to the input.
    pub fn backward(&self, p: &[f64], cache: &MlpCache, dout: &[f64], grad: &mut [f64]) -> Vec<f64> {
        let mut dy = dout.to_vec();
        let last = self.layers.len().saturating_sub(1);
        for (i, l) in self.layers.iter().enumerate().rev() {
            if i < last {
                for (g, y) in dy.iter_mut().zip(&cache.acts[i + 1]) {
                    *g *= 1.0 - y * y;
                }
            }
            let mut dx = vec![0.0; l.inp];
            l.backward(p, &cache.acts[i], &dy, grad, Some(&mut dx));
            dy = dx;
        }
        dy
    }
}

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Diagonal Gaussian log-density.
pub fn gaussian_log_prob(mean: &[f64], log_std: &[f64], a: &[f64]) -> f64 {
    mean.iter()
        .zip(log_std)
        .zip(a)
        .map(|((&m, &ls), &x)| {
            let z = (x - m) * (-ls).exp();
            -0.5 * z * z - ls - 0.5 * LN_2PI
        })
        .sum()
}

/// Partial derivatives of [`gaussian_log_prob`] with respect to each mean and
/// log-std component.
pub fn gaussian_log_prob_grad(mean: &[f64], log_std: &[f64], a: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut dm = Vec::with_capacity(mean.len());
    let mut dls = Vec::with_capacity(mean.len());
    for ((&m, &ls), &x) in mean.iter().zip(log_std).zip(a) {
        let inv_var = (-2.0 * ls).exp();
        let d = x - m;
        dm.push(d * inv_var);
        dls.push(d * d * inv_var - 1.0);
    }
    (dm, dls)
}

/// Samples `mean + std * eps`, or returns the mean when `deterministic`.
pub fn gaussian_sample(mean: &[f64], log_std: &[f64], deterministic: bool, rng: &mut Rng) -> Vec<f64> {
    mean.iter()
        .zip(log_std)
        .map(|(&m, &ls)| {
            if deterministic {
                m
            } else {
                let eps: f64 = rng.sample(StandardNormal);
                m + ls.exp() * eps
            }
        })
        .collect()
}

pub fn log_softmax(logits: &[f64]) -> Result<Vec<f64>, NetError> {
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(NetError::NonFinite { layer: usize::MAX });
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    Ok(logits.iter().map(|l| l - lse).collect())
}

pub fn categorical_log_prob(logits: &[f64], k: usize) -> Result<f64, NetError> {
    Ok(log_softmax(logits)?[k])
}

/// Derivative of `log p(k)` with respect to the logits: `onehot(k) - softmax`.
pub fn categorical_log_prob_grad(logits: &[f64], k: usize) -> Result<Vec<f64>, NetError> {
    let lp = log_softmax(logits)?;
    Ok(lp
        .iter()
        .enumerate()
        .map(|(i, l)| f64::from(u8::from(i == k)) - l.exp())
        .collect())
}

/// Draws a class by inverse CDF, or the arg-max when `deterministic`.
pub fn categorical_sample(logits: &[f64], deterministic: bool, rng: &mut Rng) -> Result<usize, NetError> {
    let lp = log_softmax(logits)?;
    if deterministic {
        let mut best = 0;
        for (i, &v) in lp.iter().enumerate() {
            if v > lp[best] {
                best = i;
            }
        }
        return Ok(best);
    }
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, l) in lp.iter().enumerate() {
        acc += l.exp();
        if u < acc {
            return Ok(i);
        }
    }
    Ok(lp.len() - 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Adam {
    pub fn new(lr: f64, len: usize) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    /// Gradient descent step on `params` (pass the gradient of a loss to minimize).
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Rescales `grad` to at most `max_norm`; returns the norm before clipping.
pub fn clip_grad_norm(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = l2_norm(grad);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

/// Named parameter sets, written as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub nets: Vec<NamedParams>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedParams {
    pub name: String,
    pub params: ParamVector,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            nets: Vec::new(),
        }
    }

    pub fn push(&mut self, name: &str, params: &ParamVector) {
        self.nets.push(NamedParams {
            name: name.to_string(),
            params: params.clone(),
        });
    }

    /// Copies the stored values for `name` into `target`, which must share
    /// its layout.
    pub fn restore(&self, name: &str, target: &mut ParamVector) -> Result<(), NetError> {
        let stored = self
            .nets
            .iter()
            .find(|n| n.name == name)
            .ok_or_else(|| NetError::Checkpoint(format!("no parameters named {name}")))?;
        if !stored.params.same_layout(target) {
            return Err(NetError::Checkpoint(format!("layout mismatch for {name}")));
        }
        if !stored.params.is_finite() {
            return Err(NetError::Checkpoint(format!("non-finite values in {name}")));
        }
        target.values.copy_from_slice(&stored.params.values);
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, NetError> {
        let c: Checkpoint =
            serde_json::from_str(text).map_err(|e| NetError::Checkpoint(e.to_string()))?;
        if c.version != CHECKPOINT_VERSION {
            return Err(NetError::Checkpoint(format!("unsupported version {}", c.version)));
        }
        for n in &c.nets {
            let expected: usize = n.params.entries.iter().map(|e| e.len()).sum();
            check_len("checkpoint values", expected, n.params.values.len())?;
        }
        Ok(c)
    }
}

impl Default for Checkpoint {
    fn default() -> Self {
        Self::new()
    }
}
