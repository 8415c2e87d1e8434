//! Parameterized layers on top of [`Graph`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Mode, Var};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Forward-pass context: the tape, read-only weights and run mode.
pub struct Ctx<'s, T: Scalar> {
    pub g: Graph<T>,
    pub store: &'s ParamStore<T>,
    pub mode: Mode,
    /// Dropout probability applied where layers ask for it (0 disables).
    pub dropout: f64,
    pub rng: ChaCha8Rng,
}

impl<'s, T: Scalar> Ctx<'s, T> {
    pub fn new(store: &'s ParamStore<T>, mode: Mode) -> Self {
        Ctx {
            g: Graph::new(),
            store,
            mode,
            dropout: 0.0,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn with_dropout(mut self, p: f64, seed: u64) -> Self {
        self.dropout = p;
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        self.g.param(self.store, id)
    }

    pub fn drop(&mut self, x: Var) -> Result<Var> {
        if self.mode == Mode::Train && self.dropout > 0.0 {
            let p = self.dropout;
            self.g.dropout(x, p, &mut self.rng)
        } else {
            Ok(x)
        }
    }
}

/// Registers parameters under a dotted name prefix.
pub struct Init<'a, T: Scalar> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a, T: Scalar> Init<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng) -> Self {
        Init {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn sub(&mut self, name: &str) -> Init<'_, T> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Init {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn name(&self, leaf: &str) -> String {
        if self.prefix.is_empty() {
            leaf.to_string()
        } else {
            format!("{}.{leaf}", self.prefix)
        }
    }

    /// Uniform in `±1/sqrt(fan_in)`.
    pub fn fan_in(&mut self, leaf: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let t = Tensor::uniform(shape, -bound, bound, self.rng);
        let name = self.name(leaf);
        self.store.add(&name, t)
    }

    pub fn normal(&mut self, leaf: &str, shape: &[usize], std: f64) -> ParamId {
        let t = Tensor::normal(shape, 0.0, std, self.rng);
        let name = self.name(leaf);
        self.store.add(&name, t)
    }

    pub fn constant(&mut self, leaf: &str, shape: &[usize], v: f64) -> ParamId {
        let name = self.name(leaf);
        self.store.add(&name, Tensor::full(shape, T::of(v)))
    }

    pub fn buffer(&mut self, leaf: &str, shape: &[usize], v: f64) -> ParamId {
        let name = self.name(leaf);
        self.store.add_buffer(&name, Tensor::full(shape, T::of(v)))
    }
}

/// `y = x·W + b` over the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, d_in: usize, d_out: usize, bias: bool) -> Self {
        let w = init.fan_in("weight", &[d_in, d_out], d_in);
        let b = bias.then(|| init.constant("bias", &[d_out], 0.0));
        Linear { w, b, d_in, d_out }
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = cx.p(self.w);
        let y = cx.g.matmul(x, w)?;
        match self.b {
            Some(b) => add_last_axis_bias(cx, y, b),
            None => Ok(y),
        }
    }
}

pub(crate) fn add_last_axis_bias<T: Scalar>(cx: &mut Ctx<'_, T>, y: Var, b: ParamId) -> Result<Var> {
    let bv = cx.p(b);
    let r = cx.g.shape(y).len();
    let mut shape = vec![1; r];
    shape[r - 1] = cx.g.shape(bv)[0];
    let bv = cx.g.reshape(bv, &shape)?;
    cx.g.add(y, bv)
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// Square kernel with "same" padding at stride 1.
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, c_in: usize, c_out: usize, k: usize, stride: usize, bias: bool) -> Self {
        let w = init.fan_in("weight", &[c_out, c_in, k, k], c_in * k * k);
        let b = bias.then(|| init.constant("bias", &[c_out], 0.0));
        Conv2d { w, b, stride, pad: k / 2 }
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = cx.p(self.w);
        let b = self.b.map(|b| cx.p(b));
        cx.g.conv2d(x, w, b, self.stride, self.pad)
    }
}

/// 3×3 depthwise convolution with bias.
#[derive(Clone, Debug)]
pub struct DwConv {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl DwConv {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, c: usize, bias: bool) -> Self {
        let w = init.fan_in("weight", &[c, 1, 3, 3], 9);
        let b = bias.then(|| init.constant("bias", &[c], 0.0));
        DwConv { w, b }
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = cx.p(self.w);
        let b = self.b.map(|b| cx.p(b));
        cx.g.depthwise_conv2d(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm2d {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, c: usize) -> Self {
        BatchNorm2d {
            gamma: init.constant("gamma", &[c], 1.0),
            beta: init.constant("beta", &[c], 0.0),
            running_mean: init.buffer("running_mean", &[c], 0.0),
            running_var: init.buffer("running_var", &[c], 1.0),
        }
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let gamma = cx.p(self.gamma);
        let beta = cx.p(self.beta);
        let store = cx.store;
        let (y, update) = cx.g.batch_norm(
            x,
            gamma,
            beta,
            store.get(self.running_mean),
            store.get(self.running_var),
            cx.mode,
        )?;
        if let Some((rm, rv)) = update {
            cx.g.record_buffer_update(self.running_mean, rm);
            cx.g.record_buffer_update(self.running_var, rv);
        }
        Ok(y)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, d: usize) -> Self {
        LayerNorm {
            gamma: init.constant("gamma", &[d], 1.0),
            beta: init.constant("beta", &[d], 0.0),
        }
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let g = cx.p(self.gamma);
        let b = cx.p(self.beta);
        cx.g.layer_norm(x, g, b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Act {
    Relu,
    Gelu,
    Identity,
}

pub fn activate<T: Scalar>(cx: &mut Ctx<'_, T>, x: Var, act: Act) -> Result<Var> {
    match act {
        Act::Relu => cx.g.relu(x),
        Act::Gelu => cx.g.gelu(x),
        Act::Identity => Ok(x),
    }
}

/// Convolution (no bias) followed by batch norm and an activation.
#[derive(Clone, Debug)]
pub struct ConvBnAct {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
    pub act: Act,
}

impl ConvBnAct {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, c_in: usize, c_out: usize, k: usize, stride: usize, act: Act) -> Self {
        let conv = Conv2d::new(&mut init.sub("conv"), c_in, c_out, k, stride, false);
        let bn = BatchNorm2d::new(&mut init.sub("bn"), c_out);
        ConvBnAct { conv, bn, act }
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(cx, x)?;
        let y = self.bn.forward(cx, y)?;
        activate(cx, y, self.act)
    }
}

/// `[N, L, C]` tokens to a `[N, C, H, W]` map.
pub fn tokens_to_map<T: Scalar>(g: &mut Graph<T>, x: Var, h: usize, w: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let p = g.permute(x, &[0, 2, 1])?;
    g.reshape(p, &[s[0], s[2], h, w])
}

/// `[N, C, H, W]` map to `[N, H*W, C]` tokens.
pub fn map_to_tokens<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let r = g.reshape(x, &[s[0], s[1], s[2] * s[3]])?;
    g.permute(r, &[0, 2, 1])
}

/// `[N, L, C]` to `[N*heads, L, C/heads]`.
pub fn split_heads<T: Scalar>(g: &mut Graph<T>, x: Var, heads: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (n, l, c) = (s[0], s[1], s[2]);
    let r = g.reshape(x, &[n, l, heads, c / heads])?;
    let p = g.permute(r, &[0, 2, 1, 3])?;
    g.reshape(p, &[n * heads, l, c / heads])
}

/// Inverse of [`split_heads`].
pub fn merge_heads<T: Scalar>(g: &mut Graph<T>, x: Var, heads: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (nh, l, d) = (s[0], s[1], s[2]);
    let r = g.reshape(x, &[nh / heads, heads, l, d])?;
    let p = g.permute(r, &[0, 2, 1, 3])?;
    g.reshape(p, &[nh / heads, l, heads * d])
}

/// Multi-head scaled dot-product attention.
///
/// Returns the head-mixed output `[N, Lq, C]` and the attention weights
/// `[N*heads, Lq, Lk]`.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, dim: usize, heads: usize, qkv_bias: bool) -> Self {
        MultiHeadAttention {
            q: Linear::new(&mut init.sub("q"), dim, dim, qkv_bias),
            k: Linear::new(&mut init.sub("k"), dim, dim, qkv_bias),
            v: Linear::new(&mut init.sub("v"), dim, dim, qkv_bias),
            out: Linear::new(&mut init.sub("out"), dim, dim, true),
            heads,
        }
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, query: Var, memory: Var, causal: bool) -> Result<(Var, Var)> {
        let q = self.q.forward(cx, query)?;
        let k = self.k.forward(cx, memory)?;
        let v = self.v.forward(cx, memory)?;
        let q = split_heads(&mut cx.g, q, self.heads)?;
        let k = split_heads(&mut cx.g, k, self.heads)?;
        let v = split_heads(&mut cx.g, v, self.heads)?;
        let d = cx.g.shape(q)[2];
        let scores = cx.g.bmm(q, k, false, true)?;
        let scores = cx.g.scale(scores, T::of(1.0 / (d as f64).sqrt()))?;
        let attn = cx.g.softmax(scores, causal)?;
        let ctx = cx.g.bmm(attn, v, false, false)?;
        let merged = merge_heads(&mut cx.g, ctx, self.heads)?;
        let y = self.out.forward(cx, merged)?;
        Ok((y, attn))
    }
}

#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
}

impl Embedding {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, rows: usize, dim: usize, std: f64) -> Self {
        Embedding {
            table: init.normal("weight", &[rows, dim], std),
        }
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, ids: &[usize], shape: &[usize]) -> Result<Var> {
        let t = cx.p(self.table);
        cx.g.embedding(t, ids, shape)
    }
}
