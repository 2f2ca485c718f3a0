//! Reverse-mode differentiation over the small op set used by the backbone
//! and the losses.
//!
//! A [`Graph`] is a tape: every op appends a node holding its value and the
//! state its backward pass needs. [`Graph::backward`] walks the tape once in
//! reverse and returns gradients for every leaf created with
//! `requires_grad = true`. Tensors are `[batch, channels, length]` unless
//! stated otherwise.

mod adam;
mod checkpoint;
pub mod conv;

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{Checkpoint, TensorEntry};

use crate::error::{Error, Result};
use crate::losses::sigmoid;
use conv::ConvGeometry;

pub const BATCHNORM_EPS: f64 = 1e-5;

/// Dense row-major array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!("shape {shape:?} holds {n} values, got {}", data.len())));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: vec![1], data: vec![v] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    fn dims3(&self, what: &str) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [b, c, l] => Ok((b, c, l)),
            _ => Err(Error::Shape(format!("{what} expects a [batch, channels, length] tensor, got {:?}", self.shape))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Per-channel running statistics of a batch-normalization layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub momentum: f64,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self { mean: vec![0.0; channels], var: vec![1.0; channels], momentum: 0.1 }
    }
}

enum Op {
    Leaf,
    Conv { x: NodeId, w: NodeId, b: Option<NodeId>, geom: ConvGeometry, cols: Vec<f64> },
    Elu { x: NodeId },
    Sigmoid { x: NodeId },
    Add { a: NodeId, b: NodeId },
    Concat { a: NodeId, b: NodeId },
    Upsample { x: NodeId, factor: usize },
    BatchNorm { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Vec<f64>, inv_std: Vec<f64>, train: bool },
    Dropout { x: NodeId, mask: Vec<f64> },
    WeightedSum { x: NodeId, weights: Vec<f64> },
    Scalar { parts: Vec<(NodeId, Vec<f64>)> },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Gradients of the requires-grad leaves reached by a backward pass.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    map: BTreeMap<NodeId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.map.get(&id)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, inputs: &[NodeId], op: Op) -> NodeId {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node { value, requires_grad, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value, requires_grad, op: Op::Leaf });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Cross-correlation with "same" zero padding: output length is
    /// `ceil(L / stride)`. Weight shape is `[Cout, Cin / groups, K]`.
    pub fn conv1d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, stride: usize, groups: usize) -> Result<NodeId> {
        let (batch, cin, len) = self.value(x).dims3("conv1d input")?;
        let (cout, cin_g, k) = self.value(w).dims3("conv1d weight")?;
        if stride == 0 || groups == 0 || k == 0 {
            return Err(Error::Shape("conv1d needs positive stride, groups and kernel".into()));
        }
        if cin_g * groups != cin || cout % groups != 0 {
            return Err(Error::Shape(format!(
                "conv1d weight [{cout}, {cin_g}, {k}] with {groups} groups does not fit {cin} input channels"
            )));
        }
        if let Some(b) = b {
            if self.value(b).numel() != cout {
                return Err(Error::Shape(format!("conv1d bias must have {cout} values")));
            }
        }
        if len == 0 {
            return Err(Error::Shape("conv1d input is empty".into()));
        }
        let geom = ConvGeometry::new(batch, cin, cout, len, k, stride, groups);
        let bias = b.map(|b| self.value(b).data());
        let (out, cols) = conv::forward(self.value(x).data(), self.value(w).data(), bias, &geom);
        let value = Tensor { shape: vec![batch, cout, geom.out_len], data: out };
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, &inputs, Op::Conv { x, w, b, geom, cols }))
    }

    pub fn elu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let data = v.data.iter().map(|&a| if a > 0.0 { a } else { a.exp_m1() }).collect();
        let value = Tensor { shape: v.shape.clone(), data };
        self.push(value, &[x], Op::Elu { x })
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let value = Tensor { shape: v.shape.clone(), data: v.data.iter().map(|&a| sigmoid(a)).collect() };
        self.push(value, &[x], Op::Sigmoid { x })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape != vb.shape {
            return Err(Error::Shape(format!("add: {:?} vs {:?}", va.shape, vb.shape)));
        }
        let value =
            Tensor { shape: va.shape.clone(), data: va.data.iter().zip(&vb.data).map(|(p, q)| p + q).collect() };
        Ok(self.push(value, &[a, b], Op::Add { a, b }))
    }

    /// Concatenates along the channel axis.
    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ba, ca, la) = self.value(a).dims3("concat")?;
        let (bb, cb, lb) = self.value(b).dims3("concat")?;
        if ba != bb || la != lb {
            return Err(Error::Shape(format!("concat: [{ba}, _, {la}] vs [{bb}, _, {lb}]")));
        }
        let mut data = Vec::with_capacity(ba * (ca + cb) * la);
        for i in 0..ba {
            data.extend_from_slice(&self.value(a).data[i * ca * la..][..ca * la]);
            data.extend_from_slice(&self.value(b).data[i * cb * lb..][..cb * lb]);
        }
        let value = Tensor { shape: vec![ba, ca + cb, la], data };
        Ok(self.push(value, &[a, b], Op::Concat { a, b }))
    }

    /// Repeats every sample `factor` times.
    pub fn upsample_nearest(&mut self, x: NodeId, factor: usize) -> Result<NodeId> {
        let (b, c, l) = self.value(x).dims3("upsample")?;
        if factor == 0 {
            return Err(Error::Shape("upsample factor must be positive".into()));
        }
        let src = &self.value(x).data;
        let mut data = Vec::with_capacity(src.len() * factor);
        for &v in src {
            data.extend(std::iter::repeat(v).take(factor));
        }
        let value = Tensor { shape: vec![b, c, l * factor], data };
        Ok(self.push(value, &[x], Op::Upsample { x, factor }))
    }

    /// Batch normalization over batch and length. Training mode normalizes
    /// with batch statistics and updates `stats`; eval mode uses `stats`.
    pub fn batchnorm1d(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        stats: &mut RunningStats,
        mode: Mode,
    ) -> Result<NodeId> {
        let (b, c, l) = self.value(x).dims3("batchnorm")?;
        if self.value(gamma).numel() != c || self.value(beta).numel() != c || stats.mean.len() != c {
            return Err(Error::Shape(format!("batchnorm parameters must have {c} channels")));
        }
        let m = (b * l) as f64;
        let xs = &self.value(x).data;
        let mut inv_std = vec![0.0; c];
        let mut xhat = vec![0.0; xs.len()];
        for ch in 0..c {
            let (mean, var) = match mode {
                Mode::Train => {
                    let mut sum = 0.0;
                    for i in 0..b {
                        sum += xs[(i * c + ch) * l..][..l].iter().sum::<f64>();
                    }
                    let mean = sum / m;
                    let mut ss = 0.0;
                    for i in 0..b {
                        ss += xs[(i * c + ch) * l..][..l].iter().map(|v| (v - mean).powi(2)).sum::<f64>();
                    }
                    let var = ss / m;
                    let mom = stats.momentum;
                    let unbiased = if m > 1.0 { var * m / (m - 1.0) } else { var };
                    stats.mean[ch] = (1.0 - mom) * stats.mean[ch] + mom * mean;
                    stats.var[ch] = (1.0 - mom) * stats.var[ch] + mom * unbiased;
                    (mean, var)
                }
                Mode::Eval => (stats.mean[ch], stats.var[ch]),
            };
            let is = 1.0 / (var + BATCHNORM_EPS).sqrt();
            inv_std[ch] = is;
            for i in 0..b {
                let off = (i * c + ch) * l;
                for j in 0..l {
                    xhat[off + j] = (xs[off + j] - mean) * is;
                }
            }
        }
        let (g, bt) = (&self.value(gamma).data, &self.value(beta).data);
        let mut data = vec![0.0; xs.len()];
        for i in 0..b {
            for ch in 0..c {
                let off = (i * c + ch) * l;
                for j in 0..l {
                    data[off + j] = g[ch] * xhat[off + j] + bt[ch];
                }
            }
        }
        let value = Tensor { shape: vec![b, c, l], data };
        let train = mode == Mode::Train;
        Ok(self.push(value, &[x, gamma, beta], Op::BatchNorm { x, gamma, beta, xhat, inv_std, train }))
    }

    /// Inverted dropout; identity in eval mode or at rate 0.
    pub fn dropout(&mut self, x: NodeId, rate: f64, mode: Mode, rng: &mut impl Rng) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!("dropout rate must lie in [0, 1), got {rate}")));
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let v = self.value(x);
        let mask: Vec<f64> = (0..v.numel()).map(|_| if rng.gen_bool(rate) { 0.0 } else { keep }).collect();
        let value = Tensor { shape: v.shape.clone(), data: v.data.iter().zip(&mask).map(|(a, m)| a * m).collect() };
        Ok(self.push(value, &[x], Op::Dropout { x, mask }))
    }

    /// Scalar `Σ weights·x`.
    pub fn weighted_sum(&mut self, x: NodeId, weights: Vec<f64>) -> Result<NodeId> {
        let v = self.value(x);
        if weights.len() != v.numel() {
            return Err(Error::Shape(format!("weighted_sum: {} weights for {} values", weights.len(), v.numel())));
        }
        let s = v.data.iter().zip(&weights).map(|(a, w)| a * w).sum();
        Ok(self.push(Tensor::scalar(s), &[x], Op::WeightedSum { x, weights }))
    }

    /// Scalar node with a precomputed value and precomputed gradients with
    /// respect to each listed input.
    pub fn scalar_from_parts(&mut self, value: f64, parts: Vec<(NodeId, Vec<f64>)>) -> Result<NodeId> {
        for (id, g) in &parts {
            if g.len() != self.value(*id).numel() {
                return Err(Error::Shape(format!(
                    "gradient of length {} for a node with {} values",
                    g.len(),
                    self.value(*id).numel()
                )));
            }
        }
        let inputs: Vec<NodeId> = parts.iter().map(|p| p.0).collect();
        Ok(self.push(Tensor::scalar(value), &inputs, Op::Scalar { parts }))
    }

    /// Backpropagates from the scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Shape(format!("backward needs a scalar loss, got shape {:?}", self.value(loss).shape)));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    out.map.insert(NodeId(i), Tensor { shape: node.value.shape.clone(), data: g });
                }
                Op::Conv { x, w, b, geom, cols } => {
                    let need_x = self.requires_grad(*x);
                    let (dx, dw, db) = conv::backward(&g, self.value(*w).data(), cols, geom, need_x);
                    if let Some(dx) = dx {
                        self.accumulate(&mut grads, *x, &dx);
                    }
                    self.accumulate(&mut grads, *w, &dw);
                    if let Some(b) = b {
                        self.accumulate(&mut grads, *b, &db);
                    }
                }
                Op::Elu { x } => {
                    let xs = &self.value(*x).data;
                    let d: Vec<f64> = g
                        .iter()
                        .zip(xs.iter().zip(&node.value.data))
                        .map(|(g, (&a, &y))| if a > 0.0 { *g } else { g * (y + 1.0) })
                        .collect();
                    self.accumulate(&mut grads, *x, &d);
                }
                Op::Sigmoid { x } => {
                    let d: Vec<f64> = g.iter().zip(&node.value.data).map(|(g, y)| g * y * (1.0 - y)).collect();
                    self.accumulate(&mut grads, *x, &d);
                }
                Op::Add { a, b } => {
                    self.accumulate(&mut grads, *a, &g);
                    self.accumulate(&mut grads, *b, &g);
                }
                Op::Concat { a, b } => {
                    let (bs, ca, l) = self.value(*a).dims3("concat")?;
                    let cb = self.value(*b).shape[1];
                    let mut ga = Vec::with_capacity(bs * ca * l);
                    let mut gb = Vec::with_capacity(bs * cb * l);
                    for k in 0..bs {
                        let row = &g[k * (ca + cb) * l..][..(ca + cb) * l];
                        ga.extend_from_slice(&row[..ca * l]);
                        gb.extend_from_slice(&row[ca * l..]);
                    }
                    self.accumulate(&mut grads, *a, &ga);
                    self.accumulate(&mut grads, *b, &gb);
                }
                Op::Upsample { x, factor } => {
                    let d: Vec<f64> = g.chunks(*factor).map(|c| c.iter().sum()).collect();
                    self.accumulate(&mut grads, *x, &d);
                }
                Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                    let (b, c, l) = node.value.dims3("batchnorm")?;
                    let gm = &self.value(*gamma).data;
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    let mut dx = vec![0.0; g.len()];
                    let m = (b * l) as f64;
                    for ch in 0..c {
                        let (mut sum_dy, mut sum_dy_xhat) = (0.0, 0.0);
                        for i in 0..b {
                            let off = (i * c + ch) * l;
                            for j in 0..l {
                                sum_dy += g[off + j];
                                sum_dy_xhat += g[off + j] * xhat[off + j];
                            }
                        }
                        dgamma[ch] = sum_dy_xhat;
                        dbeta[ch] = sum_dy;
                        let scale = gm[ch] * inv_std[ch];
                        for i in 0..b {
                            let off = (i * c + ch) * l;
                            for j in 0..l {
                                dx[off + j] = if *train {
                                    scale * (g[off + j] - sum_dy / m - xhat[off + j] * sum_dy_xhat / m)
                                } else {
                                    scale * g[off + j]
                                };
                            }
                        }
                    }
                    self.accumulate(&mut grads, *x, &dx);
                    self.accumulate(&mut grads, *gamma, &dgamma);
                    self.accumulate(&mut grads, *beta, &dbeta);
                }
                Op::Dropout { x, mask } => {
                    let d: Vec<f64> = g.iter().zip(mask).map(|(g, m)| g * m).collect();
                    self.accumulate(&mut grads, *x, &d);
                }
                Op::WeightedSum { x, weights } => {
                    let d: Vec<f64> = weights.iter().map(|w| w * g[0]).collect();
                    self.accumulate(&mut grads, *x, &d);
                }
                Op::Scalar { parts } => {
                    for (id, pg) in parts {
                        let d: Vec<f64> = pg.iter().map(|v| v * g[0]).collect();
                        self.accumulate(&mut grads, *id, &d);
                    }
                }
            }
        }
        Ok(out)
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], id: NodeId, delta: &[f64]) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(acc) => acc.iter_mut().zip(delta).for_each(|(a, d)| *a += d),
            slot @ None => *slot = Some(delta.to_vec()),
        }
    }
}

#[cfg(test)]
mod tests;
