//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Every operation on a [`Tape`] evaluates eagerly, records how it was
//! produced, and returns a [`Var`] handle. [`Tape::backward`] walks the
//! record in reverse and accumulates gradients into the [`ParamStore`]
//! entries that were read through [`Tape::param`].

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{KgsError, Result};
use crate::tensor::{softmax_rows, Tensor};

/// Batch-norm variance guard.
pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// A named learnable tensor with its gradient and momentum buffer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub momentum: Tensor,
    /// Frozen parameters still receive gradients but are never updated.
    pub trainable: bool,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        let momentum = Tensor::zeros(value.shape());
        Self {
            name: name.into(),
            value,
            grad,
            momentum,
            trainable: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter `{name}`");
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter::new(name, value));
        id
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Adjacency {
    Shared,
    PerSample,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MulScalar(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    MatMul(Var, Var),
    AddBias { x: Var, b: Var, axis: usize },
    MulBias { x: Var, g: Var, axis: usize },
    Conv2d { x: Var, w: Var, stride: usize, pad: usize },
    TemporalConv { x: Var, w: Var, dilation: usize, stride: usize, pad: usize },
    GraphAgg { x: Var, a: Var, kind: Adjacency },
    BatchNorm { x: Var, inv_std: Vec<f64> },
    MeanTrailing { x: Var },
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    BroadcastLast { x: Var, n: usize },
    AdaptivePool { x: Var },
    Concat { xs: Vec<Var>, axis: usize },
    Sum(Var),
    Softmax(Var),
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    ScalarMap { input: Var, jacobian: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Per-channel batch statistics reported by [`Tape::batch_norm`].
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Gradients for every node of a tape, indexed by [`Var`].
pub struct Gradients(Vec<Option<Tensor>>);

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.0[v.0].as_ref()
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    poisoned: Option<String>,
}

fn dim_err(op: &str, a: &[usize], b: &[usize]) -> KgsError {
    KgsError::Dimension(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

/// Strides for row-major `shape`.
fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let new_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides = strides(shape);
    let mapped: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; shape.len()];
    for _ in 0..data.len() {
        let src: usize = idx.iter().zip(&mapped).map(|(i, s)| i * s).sum();
        out.push(data[src]);
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            if idx[d] < new_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (out, new_shape)
}

fn pool_window(j: usize, input: usize, output: usize) -> (usize, usize) {
    let start = j * input / output;
    let end = ((j + 1) * input).div_ceil(output);
    (start, end)
}

/// Output length of a strided, padded 1-D convolution.
pub fn conv_out_len(input: usize, kernel: usize, dilation: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - dilation * (kernel - 1) - 1) / stride + 1
}

/// Output indices `o` in `0..out_len` with `0 ≤ o·stride + offset < in_len`.
fn valid_range(out_len: usize, stride: usize, offset: isize, in_len: usize) -> std::ops::Range<usize> {
    let s = stride as isize;
    let lo = if offset >= 0 { 0 } else { ((-offset) + s - 1) / s }.min(out_len as isize);
    let hi = (in_len as isize - offset + s - 1).div_euclid(s).clamp(lo, out_len as isize);
    (lo as usize)..(hi as usize)
}

#[derive(Debug, Clone, Copy)]
struct Conv2dGeom {
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Conv2dGeom {
    fn patch(&self) -> usize {
        self.ci * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }

    /// Unfolds one sample `(Ci,H,W)` into a `(Ci·Kh·Kw, Ho·Wo)` patch matrix.
    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let p = self.positions();
        for c in 0..self.ci {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = &mut cols[((c * self.kh + ky) * self.kw + kx) * p..][..p];
                    row.fill(0.0);
                    let xs = valid_range(self.wo, self.stride, kx as isize - self.pad as isize, self.w);
                    for oy in valid_range(self.ho, self.stride, ky as isize - self.pad as isize, self.h) {
                        let iy = oy * self.stride + ky - self.pad;
                        let src = &x[(c * self.h + iy) * self.w..][..self.w];
                        let dst = &mut row[oy * self.wo..][..self.wo];
                        for ox in xs.clone() {
                            dst[ox] = src[ox * self.stride + kx - self.pad];
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Self::im2col`]: scatters patch gradients back onto `dx`.
    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let p = self.positions();
        for c in 0..self.ci {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = &cols[((c * self.kh + ky) * self.kw + kx) * p..][..p];
                    let xs = valid_range(self.wo, self.stride, kx as isize - self.pad as isize, self.w);
                    for oy in valid_range(self.ho, self.stride, ky as isize - self.pad as isize, self.h) {
                        let iy = oy * self.stride + ky - self.pad;
                        let dst = &mut dx[(c * self.h + iy) * self.w..][..self.w];
                        let src = &row[oy * self.wo..][..self.wo];
                        for ox in xs.clone() {
                            dst[ox * self.stride + kx - self.pad] += src[ox];
                        }
                    }
                }
            }
        }
    }
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    y.iter_mut().zip(x).for_each(|(y, x)| *y += a * x);
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(a, b)| a * b).sum()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        if self.poisoned.is_none() && !value.all_finite() {
            self.poisoned = Some(format!(
                "non-finite value produced by {} (node {})",
                op_name(&op),
                self.nodes.len()
            ));
        }
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Fails if any recorded value was NaN or infinite.
    pub fn ensure_finite(&self) -> Result<()> {
        match &self.poisoned {
            Some(msg) => Err(KgsError::Data(msg.clone())),
            None => Ok(()),
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).value.clone(), Op::Param(id))
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(dim_err(name, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let t = self.value(a).map(|x| x * k);
        self.push(t, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let t = self.value(a).map(|x| x + k);
        self.push(t, Op::AddScalar(a))
    }

    /// `a · s` for a one-element `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(dim_err("mul_scalar", self.shape(a), self.shape(s)));
        }
        let k = self.value(s).item();
        let t = self.value(a).map(|x| x * k);
        Ok(self.push(t, Op::MulScalar(a, s)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x.max(0.0));
        self.push(t, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a).map(sigmoid);
        self.push(t, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::tanh);
        self.push(t, Op::Tanh(a))
    }

    /// `(m,k) × (k,n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(dim_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(ta.data(), tb.data(), &mut out, m, k, n);
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::MatMul(a, b)))
    }

    fn channel_layout(&self, x: Var, b: Var, axis: usize, name: &str) -> Result<(usize, usize)> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        if axis >= sx.len() || sb.len() != 1 || sb[0] != sx[axis] {
            return Err(dim_err(name, sx, sb));
        }
        Ok((sx[axis], sx[axis + 1..].iter().product()))
    }

    /// Adds `b[c]` to every element whose index along `axis` is `c`.
    pub fn add_bias(&mut self, x: Var, b: Var, axis: usize) -> Result<Var> {
        let (n, inner) = self.channel_layout(x, b, axis, "add_bias")?;
        let bias = self.value(b).data();
        let mut t = self.value(x).clone();
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            *v += bias[(i / inner) % n];
        }
        Ok(self.push(t, Op::AddBias { x, b, axis }))
    }

    /// Multiplies every element whose index along `axis` is `c` by `g[c]`.
    pub fn mul_bias(&mut self, x: Var, g: Var, axis: usize) -> Result<Var> {
        let (n, inner) = self.channel_layout(x, g, axis, "mul_bias")?;
        let gain = self.value(g).data();
        let mut t = self.value(x).clone();
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            *v *= gain[(i / inner) % n];
        }
        Ok(self.push(t, Op::MulBias { x, g, axis }))
    }

    /// 2-D cross-correlation: `x (N,Ci,H,W)`, `w (Co,Ci,Kh,Kw)`, zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || stride == 0 {
            return Err(dim_err("conv2d", &sx, &sw));
        }
        let (n, ci, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (co, kh, kw) = (sw[0], sw[2], sw[3]);
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(dim_err("conv2d", &sx, &sw));
        }
        let ho = conv_out_len(h, kh, 1, stride, pad);
        let wo = conv_out_len(wd, kw, 1, stride, pad);
        let geom = Conv2dGeom { ci, h, w: wd, kh, kw, stride, pad, ho, wo };
        let (k, p) = (geom.patch(), geom.positions());
        let (xd, wdta) = (self.value(x).data(), self.value(w).data());
        let mut out = vec![0.0; n * co * p];
        let mut cols = vec![0.0; k * p];
        for b in 0..n {
            geom.im2col(&xd[b * ci * h * wd..][..ci * h * wd], &mut cols);
            for o in 0..co {
                let dst = &mut out[(b * co + o) * p..][..p];
                for (kk, col) in cols.chunks_exact(p).enumerate() {
                    let wv = wdta[o * k + kk];
                    if wv != 0.0 {
                        axpy(dst, wv, col);
                    }
                }
            }
        }
        let t = Tensor::new(vec![n, co, ho, wo], out)?;
        Ok(self.push(t, Op::Conv2d { x, w, stride, pad }))
    }

    /// Temporal convolution over `x (B,Ci,T,V)` with `w (Co,Ci,K)`, applied
    /// independently at every joint. Zero padding keeps `T` at stride 1.
    pub fn temporal_conv(&mut self, x: Var, w: Var, dilation: usize, stride: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 3 || sx[1] != sw[1] || stride == 0 || dilation == 0 {
            return Err(dim_err("temporal_conv", &sx, &sw));
        }
        let (bn, ci, t_in, v) = (sx[0], sx[1], sx[2], sx[3]);
        let (co, k) = (sw[0], sw[2]);
        let pad = dilation * (k - 1) / 2;
        let t_out = conv_out_len(t_in, k, dilation, stride, pad);
        let (xd, wd) = (self.value(x).data(), self.value(w).data());
        let mut out = vec![0.0; bn * co * t_out * v];
        for b in 0..bn {
            for o in 0..co {
                let dst = &mut out[(b * co + o) * t_out * v..][..t_out * v];
                for c in 0..ci {
                    let src = &xd[(b * ci + c) * t_in * v..][..t_in * v];
                    for kk in 0..k {
                        let wv = wd[(o * ci + c) * k + kk];
                        if wv == 0.0 {
                            continue;
                        }
                        let offset = (kk * dilation) as isize - pad as isize;
                        let range = valid_range(t_out, stride, offset, t_in);
                        if stride == 1 {
                            let ti0 = (range.start as isize + offset) as usize;
                            let len = range.len() * v;
                            axpy(&mut dst[range.start * v..][..len], wv, &src[ti0 * v..][..len]);
                        } else {
                            for to in range {
                                let ti = (to as isize * stride as isize + offset) as usize;
                                axpy(&mut dst[to * v..][..v], wv, &src[ti * v..][..v]);
                            }
                        }
                    }
                }
            }
        }
        let t = Tensor::new(vec![bn, co, t_out, v], out)?;
        Ok(self.push(t, Op::TemporalConv { x, w, dilation, stride, pad }))
    }

    /// `y[b,c,t,i] = Σ_j A[i,j]·x[b,c,t,j]` with `A (V,V)` shared or `(B,V,V)` per sample.
    pub fn graph_agg(&mut self, x: Var, a: Var) -> Result<Var> {
        let (sx, sa) = (self.shape(x).to_vec(), self.shape(a).to_vec());
        if sx.len() != 4 {
            return Err(dim_err("graph_agg", &sx, &sa));
        }
        let (bn, c, t, v) = (sx[0], sx[1], sx[2], sx[3]);
        let kind = match sa.as_slice() {
            [p, q] if *p == v && *q == v => Adjacency::Shared,
            [b, p, q] if *b == bn && *p == v && *q == v => Adjacency::PerSample,
            _ => return Err(dim_err("graph_agg", &sx, &sa)),
        };
        let (xd, ad) = (self.value(x).data(), self.value(a).data());
        let mut out = vec![0.0; xd.len()];
        for b in 0..bn {
            let adj = match kind {
                Adjacency::Shared => ad,
                Adjacency::PerSample => &ad[b * v * v..(b + 1) * v * v],
            };
            for row in 0..c * t {
                let base = (b * c * t + row) * v;
                let xr = &xd[base..base + v];
                for i in 0..v {
                    let ar = &adj[i * v..(i + 1) * v];
                    out[base + i] = ar.iter().zip(xr).map(|(p, q)| p * q).sum();
                }
            }
        }
        let tensor = Tensor::new(sx, out)?;
        Ok(self.push(tensor, Op::GraphAgg { x, a, kind }))
    }

    /// Normalizes every channel (axis 1) with its statistics over all other axes.
    pub fn batch_norm(&mut self, x: Var) -> Result<(Var, BatchStats)> {
        let sx = self.shape(x).to_vec();
        if sx.len() < 2 {
            return Err(KgsError::Dimension(format!("batch_norm needs rank ≥ 2, got {sx:?}")));
        }
        let (n, c) = (sx[0], sx[1]);
        let inner: usize = sx[2..].iter().product();
        let count = (n * inner) as f64;
        let xd = self.value(x).data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * inner;
                mean[ch] += xd[base..base + inner].iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * inner;
                var[ch] += xd[base..base + inner]
                    .iter()
                    .map(|x| (x - mean[ch]) * (x - mean[ch]))
                    .sum::<f64>();
            }
        }
        var.iter_mut().for_each(|s| *s /= count);
        let inv_std: Vec<f64> = var.iter().map(|s| 1.0 / (s + BN_EPS).sqrt()).collect();
        let mut out = vec![0.0; xd.len()];
        for (i, o) in out.iter_mut().enumerate() {
            let ch = (i / inner) % c;
            *o = (xd[i] - mean[ch]) * inv_std[ch];
        }
        let t = Tensor::new(sx, out)?;
        let var_out = self.push(t, Op::BatchNorm { x, inv_std });
        Ok((var_out, BatchStats { mean, var }))
    }

    /// Averages over every axis after the first `keep`.
    pub fn mean_trailing(&mut self, x: Var, keep: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if keep == 0 || keep > sx.len() {
            return Err(KgsError::Dimension(format!("mean_trailing keep={keep} on {sx:?}")));
        }
        let inner: usize = sx[keep..].iter().product();
        let data = self
            .value(x)
            .data()
            .chunks(inner)
            .map(|c| c.iter().sum::<f64>() / inner as f64)
            .collect();
        let t = Tensor::new(sx[..keep].to_vec(), data)?;
        Ok(self.push(t, Op::MeanTrailing { x }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(t, Op::Reshape(x)))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let mut seen = perm.to_vec();
        seen.sort_unstable();
        if seen != (0..sx.len()).collect::<Vec<_>>() {
            return Err(KgsError::Dimension(format!("invalid permutation {perm:?} for {sx:?}")));
        }
        let (data, shape) = permute_data(self.value(x).data(), &sx, perm);
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::Permute { x, perm: perm.to_vec() }))
    }

    /// Appends a trailing axis of extent `n`, repeating every element.
    pub fn broadcast_last(&mut self, x: Var, n: usize) -> Var {
        let src = self.value(x);
        let mut shape = src.shape().to_vec();
        shape.push(n);
        let data = src.data().iter().flat_map(|&v| std::iter::repeat(v).take(n)).collect();
        let t = Tensor::new(shape, data).expect("broadcast shape");
        self.push(t, Op::BroadcastLast { x, n })
    }

    /// Adaptive average pooling of the last axis down to `out_len`.
    pub fn adaptive_avg_pool_last(&mut self, x: Var, out_len: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let len = *sx.last().ok_or_else(|| KgsError::Dimension("pool on scalar".into()))?;
        if out_len == 0 || out_len > len {
            return Err(KgsError::Dimension(format!("cannot pool length {len} to {out_len}")));
        }
        let mut data = Vec::with_capacity(sx.iter().product::<usize>() / len * out_len);
        for row in self.value(x).data().chunks(len) {
            for j in 0..out_len {
                let (s, e) = pool_window(j, len, out_len);
                data.push(row[s..e].iter().sum::<f64>() / (e - s) as f64);
            }
        }
        let mut shape = sx;
        *shape.last_mut().unwrap() = out_len;
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::AdaptivePool { x }))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*xs.first().ok_or_else(|| KgsError::Dimension("concat of nothing".into()))?).to_vec();
        if axis >= first.len() {
            return Err(KgsError::Dimension(format!("concat axis {axis} on {first:?}")));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            if s.len() != first.len()
                || s.iter().enumerate().any(|(d, &e)| d != axis && e != first[d])
            {
                return Err(dim_err("concat", &first, s));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let t = self.value(x);
                let block = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::Concat { xs: xs.to_vec(), axis }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).sum());
        self.push(t, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let width = *t.shape().last().unwrap();
        let data = softmax_rows(t.data(), width);
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::Softmax(x))
    }

    /// Mean softmax cross-entropy of `logits (B,K)` against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(KgsError::Dimension(format!(
                "cross-entropy logits {s:?} vs {} labels",
                labels.len()
            )));
        }
        let k = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(KgsError::Data(format!("label {bad} outside [0, {k})")));
        }
        let probs = softmax_rows(self.value(logits).data(), k);
        let loss = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| {
                let row = &self.value(logits).data()[i * k..(i + 1) * k];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
                lse - row[l]
            })
            .sum::<f64>()
            / labels.len() as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec(), probs },
        ))
    }

    /// Records `output = f(input)` for a one-element `input`, given `∂output/∂input`.
    pub fn scalar_map(&mut self, input: Var, output: Tensor, jacobian: Vec<f64>) -> Result<Var> {
        if self.value(input).len() != 1 || jacobian.len() != output.len() {
            return Err(KgsError::Dimension(format!(
                "scalar_map: input {:?}, output {:?}, jacobian {}",
                self.shape(input),
                output.shape(),
                jacobian.len()
            )));
        }
        Ok(self.push(output, Op::ScalarMap { input, jacobian }))
    }

    /// Gradients of a one-element `loss` with respect to every node.
    pub fn gradients(&self, loss: Var) -> Result<Gradients> {
        self.ensure_finite()?;
        if self.value(loss).len() != 1 {
            return Err(KgsError::Contract(format!(
                "gradients need a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients(grads))
    }

    /// Accumulates `∂loss/∂param` into every parameter read on this tape.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.gradients(loss)?;
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, &grads.0[i]) {
                if !g.all_finite() {
                    return Err(KgsError::Data(format!(
                        "non-finite gradient for parameter `{}`",
                        store.get(*id).name
                    )));
                }
                store.get_mut(*id).grad.add_assign(g);
            }
        }
        Ok(())
    }

    fn backprop(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let gd = g.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(self.nodes[v.0].value.shape()));
            f(slot.data_mut());
        };
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, gd));
                acc(*b, &mut |d| add_into(d, gd));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_into(d, gd));
                acc(*b, &mut |d| d.iter_mut().zip(gd).for_each(|(x, g)| *x -= g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |d| d.iter_mut().zip(gd).zip(vb).for_each(|((x, g), y)| *x += g * y));
                acc(*b, &mut |d| d.iter_mut().zip(gd).zip(va).for_each(|((x, g), y)| *x += g * y));
            }
            Op::Scale(a, k) => acc(*a, &mut |d| d.iter_mut().zip(gd).for_each(|(x, g)| *x += g * k)),
            Op::AddScalar(a) => acc(*a, &mut |d| add_into(d, gd)),
            Op::MulScalar(a, s) => {
                let k = self.value(*s).item();
                let va = self.value(*a).data();
                acc(*a, &mut |d| d.iter_mut().zip(gd).for_each(|(x, g)| *x += g * k));
                let ds: f64 = gd.iter().zip(va).map(|(g, x)| g * x).sum();
                acc(*s, &mut |d| d[0] += ds);
            }
            Op::Relu(a) => {
                let va = self.value(*a).data();
                acc(*a, &mut |d| {
                    d.iter_mut().zip(gd).zip(va).for_each(|((x, g), v)| {
                        if *v > 0.0 {
                            *x += g
                        }
                    })
                });
            }
            Op::Sigmoid(a) => {
                let out = node.value.data();
                acc(*a, &mut |d| d.iter_mut().zip(gd).zip(out).for_each(|((x, g), s)| *x += g * s * (1.0 - s)));
            }
            Op::Tanh(a) => {
                let out = node.value.data();
                acc(*a, &mut |d| d.iter_mut().zip(gd).zip(out).for_each(|((x, g), t)| *x += g * (1.0 - t * t)));
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                let (ad, bd) = (ta.data(), tb.data());
                // dA = G·Bᵀ, dB = Aᵀ·G
                acc(*a, &mut |d| {
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += gd[i * n + j] * bd[p * n + j];
                            }
                            d[i * k + p] += s;
                        }
                    }
                });
                acc(*b, &mut |d| {
                    for i in 0..m {
                        for p in 0..k {
                            let av = ad[i * k + p];
                            for j in 0..n {
                                d[p * n + j] += av * gd[i * n + j];
                            }
                        }
                    }
                });
            }
            Op::AddBias { x, b, axis } => {
                let shape = self.shape(*x);
                let (n, inner) = (shape[*axis], shape[axis + 1..].iter().product::<usize>());
                acc(*x, &mut |d| add_into(d, gd));
                acc(*b, &mut |d| gd.iter().enumerate().for_each(|(i, g)| d[(i / inner) % n] += g));
            }
            Op::MulBias { x, g: gain, axis } => {
                let shape = self.shape(*x);
                let (n, inner) = (shape[*axis], shape[axis + 1..].iter().product::<usize>());
                let (xv, gv) = (self.value(*x).data(), self.value(*gain).data());
                acc(*x, &mut |d| {
                    d.iter_mut().zip(gd).enumerate().for_each(|(i, (x, g))| *x += g * gv[(i / inner) % n])
                });
                acc(*gain, &mut |d| {
                    gd.iter().zip(xv).enumerate().for_each(|(i, (g, x))| d[(i / inner) % n] += g * x)
                });
            }
            Op::Conv2d { x, w, stride, pad } => {
                let (sx, sw) = (self.shape(*x), self.shape(*w));
                let (n, ci, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
                let (co, kh, kw) = (sw[0], sw[2], sw[3]);
                let (ho, wo) = (node.value.shape()[2], node.value.shape()[3]);
                let geom = Conv2dGeom { ci, h, w: wd, kh, kw, stride: *stride, pad: *pad, ho, wo };
                let (k, p, plane) = (geom.patch(), geom.positions(), ci * h * wd);
                let (xd, wdta) = (self.value(*x).data(), self.value(*w).data());
                let mut dx = vec![0.0; xd.len()];
                let mut dw = vec![0.0; wdta.len()];
                let mut cols = vec![0.0; k * p];
                let mut dcols = vec![0.0; k * p];
                for b in 0..n {
                    geom.im2col(&xd[b * plane..][..plane], &mut cols);
                    dcols.fill(0.0);
                    for o in 0..co {
                        let g = &gd[(b * co + o) * p..][..p];
                        for (kk, (col, dcol)) in cols.chunks_exact(p).zip(dcols.chunks_exact_mut(p)).enumerate() {
                            dw[o * k + kk] += dot(g, col);
                            axpy(dcol, wdta[o * k + kk], g);
                        }
                    }
                    geom.col2im(&dcols, &mut dx[b * plane..][..plane]);
                }
                acc(*x, &mut |d| add_into(d, &dx));
                acc(*w, &mut |d| add_into(d, &dw));
            }
            Op::TemporalConv { x, w, dilation, stride, pad } => {
                let (sx, sw) = (self.shape(*x), self.shape(*w));
                let (bn, ci, t_in, v) = (sx[0], sx[1], sx[2], sx[3]);
                let (co, k) = (sw[0], sw[2]);
                let t_out = node.value.shape()[2];
                let (xd, wd) = (self.value(*x).data(), self.value(*w).data());
                let mut dx = vec![0.0; xd.len()];
                let mut dw = vec![0.0; wd.len()];
                for b in 0..bn {
                    for o in 0..co {
                        let g = &gd[(b * co + o) * t_out * v..][..t_out * v];
                        for c in 0..ci {
                            let base = (b * ci + c) * t_in * v;
                            for kk in 0..k {
                                let widx = (o * ci + c) * k + kk;
                                let wv = wd[widx];
                                let offset = (kk * *dilation) as isize - *pad as isize;
                                let range = valid_range(t_out, *stride, offset, t_in);
                                if *stride == 1 {
                                    let ti0 = base + (range.start as isize + offset) as usize * v;
                                    let len = range.len() * v;
                                    let gs = &g[range.start * v..][..len];
                                    dw[widx] += dot(gs, &xd[ti0..][..len]);
                                    axpy(&mut dx[ti0..][..len], wv, gs);
                                } else {
                                    for to in range {
                                        let ti = base + (to as isize * *stride as isize + offset) as usize * v;
                                        let gs = &g[to * v..][..v];
                                        dw[widx] += dot(gs, &xd[ti..][..v]);
                                        axpy(&mut dx[ti..][..v], wv, gs);
                                    }
                                }
                            }
                        }
                    }
                }
                acc(*x, &mut |d| add_into(d, &dx));
                acc(*w, &mut |d| add_into(d, &dw));
            }
            Op::GraphAgg { x, a, kind } => {
                let sx = self.shape(*x);
                let (bn, c, t, v) = (sx[0], sx[1], sx[2], sx[3]);
                let (xd, ad) = (self.value(*x).data(), self.value(*a).data());
                let mut dx = vec![0.0; xd.len()];
                let mut da = vec![0.0; ad.len()];
                for b in 0..bn {
                    let off = match kind {
                        Adjacency::Shared => 0,
                        Adjacency::PerSample => b * v * v,
                    };
                    for row in 0..c * t {
                        let base = (b * c * t + row) * v;
                        for i in 0..v {
                            let g = gd[base + i];
                            if g == 0.0 {
                                continue;
                            }
                            for j in 0..v {
                                dx[base + j] += ad[off + i * v + j] * g;
                                da[off + i * v + j] += g * xd[base + j];
                            }
                        }
                    }
                }
                acc(*x, &mut |d| add_into(d, &dx));
                acc(*a, &mut |d| add_into(d, &da));
            }
            Op::BatchNorm { x, inv_std } => {
                let sx = self.shape(*x);
                let (n, c) = (sx[0], sx[1]);
                let inner: usize = sx[2..].iter().product();
                let count = (n * inner) as f64;
                let xhat = node.value.data();
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for (i, (&g, &xh)) in gd.iter().zip(xhat).enumerate() {
                    let ch = (i / inner) % c;
                    sum_g[ch] += g;
                    sum_gx[ch] += g * xh;
                }
                acc(*x, &mut |d| {
                    for (i, (dv, (&g, &xh))) in d.iter_mut().zip(gd.iter().zip(xhat)).enumerate() {
                        let ch = (i / inner) % c;
                        *dv += inv_std[ch] * (g - sum_g[ch] / count - xh * sum_gx[ch] / count);
                    }
                });
            }
            Op::MeanTrailing { x } => {
                let inner = self.value(*x).len() / node.value.len();
                acc(*x, &mut |d| {
                    for (i, dv) in d.iter_mut().enumerate() {
                        *dv += gd[i / inner] / inner as f64;
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &mut |d| add_into(d, gd)),
            Op::Permute { x, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let (back, _) = permute_data(gd, node.value.shape(), &inverse);
                acc(*x, &mut |d| add_into(d, &back));
            }
            Op::BroadcastLast { x, n } => acc(*x, &mut |d| {
                for (i, chunk) in gd.chunks(*n).enumerate() {
                    d[i] += chunk.iter().sum::<f64>();
                }
            }),
            Op::AdaptivePool { x } => {
                let len = *self.shape(*x).last().unwrap();
                let out_len = *node.value.shape().last().unwrap();
                acc(*x, &mut |d| {
                    for (r, (drow, grow)) in d.chunks_mut(len).zip(gd.chunks(out_len)).enumerate() {
                        let _ = r;
                        for (j, &g) in grow.iter().enumerate() {
                            let (s, e) = pool_window(j, len, out_len);
                            let share = g / (e - s) as f64;
                            drow[s..e].iter_mut().for_each(|v| *v += share);
                        }
                    }
                });
            }
            Op::Concat { xs, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &x in xs {
                    let block = self.shape(x)[*axis] * inner;
                    acc(x, &mut |d| {
                        for o in 0..outer {
                            let src = &gd[o * total + offset..o * total + offset + block];
                            add_into(&mut d[o * block..(o + 1) * block], src);
                        }
                    });
                    offset += block;
                }
            }
            Op::Sum(x) => {
                let g0 = gd[0];
                acc(*x, &mut |d| d.iter_mut().for_each(|v| *v += g0));
            }
            Op::Softmax(x) => {
                let out = node.value.data();
                let width = *node.value.shape().last().unwrap();
                acc(*x, &mut |d| {
                    for ((drow, grow), prow) in d.chunks_mut(width).zip(gd.chunks(width)).zip(out.chunks(width)) {
                        let dot: f64 = grow.iter().zip(prow).map(|(g, p)| g * p).sum();
                        for ((dv, g), p) in drow.iter_mut().zip(grow).zip(prow) {
                            *dv += p * (g - dot);
                        }
                    }
                });
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let k = self.shape(*logits)[1];
                let scale = gd[0] / labels.len() as f64;
                acc(*logits, &mut |d| {
                    for (i, &l) in labels.iter().enumerate() {
                        for j in 0..k {
                            let target = if j == l { 1.0 } else { 0.0 };
                            d[i * k + j] += scale * (probs[i * k + j] - target);
                        }
                    }
                });
            }
            Op::ScalarMap { input, jacobian } => {
                let s: f64 = gd.iter().zip(jacobian).map(|(g, j)| g * j).sum();
                acc(*input, &mut |d| d[0] += s);
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "constant",
        Op::Param(_) => "parameter",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::AddScalar(..) => "add_scalar",
        Op::MulScalar(..) => "mul_scalar",
        Op::Relu(_) => "relu",
        Op::Sigmoid(_) => "sigmoid",
        Op::Tanh(_) => "tanh",
        Op::MatMul(..) => "matmul",
        Op::AddBias { .. } => "add_bias",
        Op::MulBias { .. } => "mul_bias",
        Op::Conv2d { .. } => "conv2d",
        Op::TemporalConv { .. } => "temporal_conv",
        Op::GraphAgg { .. } => "graph_agg",
        Op::BatchNorm { .. } => "batch_norm",
        Op::MeanTrailing { .. } => "mean_trailing",
        Op::Reshape(_) => "reshape",
        Op::Permute { .. } => "permute",
        Op::BroadcastLast { .. } => "broadcast_last",
        Op::AdaptivePool { .. } => "adaptive_avg_pool",
        Op::Concat { .. } => "concat",
        Op::Sum(_) => "sum",
        Op::Softmax(_) => "softmax",
        Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
        Op::ScalarMap { .. } => "scalar_map",
    }
}
