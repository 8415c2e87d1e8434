//! Reverse-mode differentiation over a linear tape.
//!
//! Every op appends one node holding its output value and whatever it needs
//! for the backward pass. Nodes are appended in evaluation order, so walking
//! the tape backwards is a reverse topological traversal.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::params::{ParamId, ParamStore};
use crate::scalar::{gemm, Scalar};
use crate::tensor::{numel, strides, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch-norm behaviour.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const LN_EPS: f64 = 1e-5;

pub(crate) enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    DivScalar(Var, Var),
    MatMul(Var, Var),
    Bmm { a: Var, b: Var, ta: bool, tb: bool },
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Softmax { x: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T>, train: bool },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    DwConv { x: Var, w: Var, b: Option<Var> },
    Reshape(Var),
    Permute { x: Var, axes: Vec<usize> },
    Narrow { x: Var, axis: usize, start: usize },
    Concat { xs: Vec<Var>, axis: usize },
    SumAll(Var),
    MeanAll(Var),
    Embedding { table: Var, ids: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize>, mask: Vec<bool>, probs: Vec<T>, count: usize },
    Cosine { a: Var, b: Var, eps: T },
    Dropout { x: Var, mask: Vec<T> },
}

pub(crate) struct Node<T> {
    pub value: Tensor<T>,
    pub op: Op<T>,
    pub requires_grad: bool,
}

/// A tape of recorded tensor operations.
///
/// One graph is built per forward pass and consumed by [`Graph::backward`].
pub struct Graph<T: Scalar> {
    pub(crate) nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    buffer_updates: Vec<(ParamId, Tensor<T>)>,
    consumed: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    leaves: HashMap<Var, Tensor<T>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for a leaf that required gradients, if it was reached.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.get(&v)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id).and_then(|v| self.leaves.get(v))
    }

    /// Parameter gradients in parameter order.
    pub fn params(&self) -> Vec<(ParamId, &Tensor<T>)> {
        let mut out: Vec<_> = self
            .params
            .iter()
            .filter_map(|(id, v)| self.leaves.get(v).map(|g| (*id, g)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(Error::dim(op, format!("rank mismatch {a:?} vs {b:?}")));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, y) => Ok(y),
            (x, 1) => Ok(x),
            _ => Err(Error::dim(op, format!("cannot broadcast {a:?} with {b:?}"))),
        })
        .collect()
}

/// Offsets into a broadcast operand for every element of the output.
fn broadcast_offsets(out: &[usize], inp: &[usize]) -> Vec<usize> {
    let in_st = strides(inp);
    let bst: Vec<usize> = out
        .iter()
        .zip(inp)
        .zip(&in_st)
        .map(|((&o, &i), &s)| if i == 1 && o != 1 { 0 } else { s })
        .collect();
    let r = out.len();
    let n = numel(out);
    let mut offs = Vec::with_capacity(n);
    let mut idx = vec![0usize; r];
    let mut off = 0usize;
    for _ in 0..n {
        offs.push(off);
        for d in (0..r).rev() {
            idx[d] += 1;
            off += bst[d];
            if idx[d] < out[d] {
                break;
            }
            off -= bst[d] * out[d];
            idx[d] = 0;
        }
    }
    offs
}

/// (outer, axis, inner) extents around an axis.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
            buffer_updates: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check_live(&self) -> Result<()> {
        if self.consumed {
            Err(Error::StaleTape)
        } else {
            Ok(())
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Records a leaf tensor.
    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, false)
    }

    /// Leaf bound to a stored parameter; repeated calls return the same var.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let e = store.entry(id);
        let v = self.leaf(e.value.clone(), e.trainable);
        self.params.insert(id, v);
        v
    }

    /// Batch-norm running statistics computed during this pass.
    pub fn take_buffer_updates(&mut self) -> Vec<(ParamId, Tensor<T>)> {
        std::mem::take(&mut self.buffer_updates)
    }

    pub(crate) fn record_buffer_update(&mut self, id: ParamId, t: Tensor<T>) {
        self.buffer_updates.push((id, t));
    }

    // ---------------------------------------------------------------- elementwise

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<(Tensor<T>, bool)> {
        let (ta, tb) = (self.value(a), self.value(b));
        let rg = self.rg(a) || self.rg(b);
        if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            return Ok((Tensor::from_parts(ta.shape().to_vec(), data), rg));
        }
        let out = broadcast_shape(op, ta.shape(), tb.shape())?;
        let oa = broadcast_offsets(&out, ta.shape());
        let ob = broadcast_offsets(&out, tb.shape());
        let (da, db) = (ta.data(), tb.data());
        let data = oa.iter().zip(&ob).map(|(&i, &j)| f(da[i], db[j])).collect();
        Ok((Tensor::from_parts(out, data), rg))
    }

    /// Elementwise sum with same-rank broadcasting over unit extents.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_live()?;
        let (t, rg) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_live()?;
        let (t, rg) = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_live()?;
        let (t, rg) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        self.check_live()?;
        let t = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        Ok(self.push(t, Op::Scale(a, s), rg))
    }

    /// Divides every element by a single-element tensor.
    pub fn div_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        self.check_live()?;
        if self.value(s).numel() != 1 {
            return Err(Error::dim("div_scalar", format!("divisor has shape {:?}", self.shape(s))));
        }
        let d = self.value(s).item();
        if d == T::zero() || !d.is_finite() {
            return Err(Error::Numeric {
                op: "div_scalar",
                detail: format!("divisor {d}"),
            });
        }
        let t = self.value(a).map(|x| x / d);
        let rg = self.rg(a) || self.rg(s);
        Ok(self.push(t, Op::DivScalar(a, s), rg))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.check_live()?;
        let t = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        let rg = self.rg(a);
        Ok(self.push(t, Op::Relu(a), rg))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.check_live()?;
        let t = self.value(a).map(kernels::gelu);
        let rg = self.rg(a);
        Ok(self.push(t, Op::Gelu(a), rg))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.check_live()?;
        let t = self.value(a).map(kernels::sigmoid);
        let rg = self.rg(a);
        Ok(self.push(t, Op::Sigmoid(a), rg))
    }

    /// Inverted dropout; identity when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, p: f64, rng: &mut R) -> Result<Var> {
        self.check_live()?;
        if p <= 0.0 {
            return Ok(a);
        }
        if p >= 1.0 {
            return Err(Error::Config(format!("dropout probability {p} must be < 1")));
        }
        let keep = T::of(1.0 / (1.0 - p));
        let n = self.value(a).numel();
        let mask: Vec<T> = (0..n)
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let src = self.value(a);
        let data = src.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let t = Tensor::from_parts(src.shape().to_vec(), data);
        let rg = self.rg(a);
        Ok(self.push(t, Op::Dropout { x: a, mask }, rg))
    }

    // ---------------------------------------------------------------- products

    /// `a[..., m, k] · b[k, n] -> [..., m, n]`; leading axes of `a` are batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_live()?;
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::dim("matmul", format!("{sa:?} x {sb:?}")));
        }
        let k = sb[0];
        let n = sb[1];
        let m = numel(&sa) / k;
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, T::zero(), &mut out);
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(shape, out), Op::MatMul(a, b), rg))
    }

    /// Batched product `op(a)·op(b)` over matching leading batch axes, where
    /// `op` transposes the last two axes when the flag is set.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        self.check_live()?;
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let err = || Error::dim("bmm", format!("{sa:?} x {sb:?} (ta={ta}, tb={tb})"));
        if sa.len() < 3 || sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(err());
        }
        let r = sa.len();
        let (m, k) = if ta { (sa[r - 1], sa[r - 2]) } else { (sa[r - 2], sa[r - 1]) };
        let (k2, n) = if tb { (sb[r - 1], sb[r - 2]) } else { (sb[r - 2], sb[r - 1]) };
        if k != k2 {
            return Err(err());
        }
        let batch: usize = sa[..r - 2].iter().product();
        let mut out = vec![T::zero(); batch * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &da[i * m * k..(i + 1) * m * k],
                ta,
                &db[i * k * n..(i + 1) * k * n],
                tb,
                T::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let mut shape = sa[..r - 2].to_vec();
        shape.extend([m, n]);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Bmm { a, b, ta, tb }, rg))
    }

    // ---------------------------------------------------------------- normalization

    /// Softmax over the last axis. With `causal`, entry `j` of row `i` in each
    /// trailing `[T, S]` block is excluded when `j > i`.
    pub fn softmax(&mut self, x: Var, causal: bool) -> Result<Var> {
        self.check_live()?;
        let t = self.value(x);
        let shape = t.shape().to_vec();
        let s = *shape.last().ok_or_else(|| Error::dim("softmax", "rank-0 input"))?;
        let rows_per_block = if causal {
            if shape.len() < 2 {
                return Err(Error::dim("softmax", "causal softmax needs rank >= 2"));
            }
            shape[shape.len() - 2]
        } else {
            1
        };
        let src = t.data();
        if src.iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric {
                op: "softmax",
                detail: "NaN input".into(),
            });
        }
        let mut out = vec![T::zero(); src.len()];
        for (r, (row, dst)) in src.chunks(s).zip(out.chunks_mut(s)).enumerate() {
            let limit = if causal { (r % rows_per_block + 1).min(s) } else { s };
            let mx = row[..limit].iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for j in 0..limit {
                let e = (row[j] - mx).exp();
                dst[j] = e;
                z = z + e;
            }
            for v in dst[..limit].iter_mut() {
                *v = *v / z;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Softmax { x }, rg))
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        self.check_live()?;
        let sx = self.shape(x).to_vec();
        let d = *sx.last().ok_or_else(|| Error::dim("layer_norm", "rank-0 input"))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::dim(
                "layer_norm",
                format!("input {sx:?}, gamma {:?}, beta {:?}", self.shape(gamma), self.shape(beta)),
            ));
        }
        let eps = T::of(LN_EPS);
        let dn = T::of(d as f64);
        let (src, g, b) = (self.value(x).data(), self.value(gamma).data(), self.value(beta).data());
        let rows = src.len() / d;
        let mut xhat = vec![T::zero(); src.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor::from_parts(sx, out),
            Op::LayerNorm { x, gamma, beta, xhat, rstd },
            rg,
        ))
    }

    /// Batch normalization of `[N,C,H,W]` over batch and spatial axes.
    ///
    /// In train mode the returned tuple carries updated running statistics
    /// (momentum [`BN_MOMENTUM`], unbiased variance).
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
        mode: Mode,
    ) -> Result<(Var, Option<(Tensor<T>, Tensor<T>)>)> {
        self.check_live()?;
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 {
            return Err(Error::dim("batch_norm", format!("expected [N,C,H,W], got {sx:?}")));
        }
        let (n, c, hw) = (sx[0], sx[1], sx[2] * sx[3]);
        if n == 0 || hw == 0 {
            return Err(Error::EmptyInput("batch_norm over an empty batch".into()));
        }
        for (name, t) in [("gamma", self.shape(gamma)), ("beta", self.shape(beta)), ("running_mean", running_mean.shape()), ("running_var", running_var.shape())] {
            if t != [c] {
                return Err(Error::dim("batch_norm", format!("{name} has shape {t:?}, expected [{c}]")));
            }
        }
        let eps = T::of(BN_EPS);
        let m = n * hw;
        let src = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); src.len()];
        let mut out = vec![T::zero(); src.len()];
        let mut rstd = vec![T::zero(); c];
        let mut update = None;
        match mode {
            Mode::Train => {
                let mut means = vec![T::zero(); c];
                let mut vars = vec![T::zero(); c];
                for ch in 0..c {
                    let mut s = T::zero();
                    for i in 0..n {
                        let base = (i * c + ch) * hw;
                        s = s + src[base..base + hw].iter().copied().sum::<T>();
                    }
                    let mean = s / T::of(m as f64);
                    let mut v = T::zero();
                    for i in 0..n {
                        let base = (i * c + ch) * hw;
                        v = v + src[base..base + hw].iter().map(|&x| (x - mean) * (x - mean)).sum::<T>();
                    }
                    means[ch] = mean;
                    vars[ch] = v / T::of(m as f64);
                }
                let mom = T::of(BN_MOMENTUM);
                let unbias = if m > 1 { T::of(m as f64 / (m as f64 - 1.0)) } else { T::one() };
                let rm = running_mean
                    .data()
                    .iter()
                    .zip(&means)
                    .map(|(&r, &mu)| (T::one() - mom) * r + mom * mu)
                    .collect();
                let rv = running_var
                    .data()
                    .iter()
                    .zip(&vars)
                    .map(|(&r, &v)| (T::one() - mom) * r + mom * v * unbias)
                    .collect();
                update = Some((Tensor::from_parts(vec![c], rm), Tensor::from_parts(vec![c], rv)));
                for ch in 0..c {
                    rstd[ch] = T::one() / (vars[ch] + eps).sqrt();
                }
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * hw;
                        for p in base..base + hw {
                            let h = (src[p] - means[ch]) * rstd[ch];
                            xhat[p] = h;
                            out[p] = h * g[ch] + b[ch];
                        }
                    }
                }
            }
            Mode::Eval => {
                let (rm, rv) = (running_mean.data(), running_var.data());
                for ch in 0..c {
                    rstd[ch] = T::one() / (rv[ch] + eps).sqrt();
                }
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * hw;
                        for p in base..base + hw {
                            let h = (src[p] - rm[ch]) * rstd[ch];
                            xhat[p] = h;
                            out[p] = h * g[ch] + b[ch];
                        }
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let v = self.push(
            Tensor::from_parts(sx, out),
            Op::BatchNorm { x, gamma, beta, xhat, rstd, train: mode == Mode::Train },
            rg,
        );
        Ok((v, update))
    }

    // ---------------------------------------------------------------- convolution

    /// 2-D cross-correlation of `[N,C,H,W]` with `[Co,C,kh,kw]` weights.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        self.check_live()?;
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 {
            return Err(Error::dim("conv2d", format!("input {sx:?}, weight {sw:?}")));
        }
        if sx[1] != sw[1] {
            return Err(Error::dim(
                "conv2d",
                format!("input has {} channels, weight expects {}", sx[1], sw[1]),
            ));
        }
        let (kh, kw) = (sw[2], sw[3]);
        if kh % 2 == 0 || kw % 2 == 0 || stride == 0 {
            return Err(Error::Unsupported(format!("conv2d kernel {kh}x{kw} stride {stride}")));
        }
        if sx[2] + 2 * pad < kh || sx[3] + 2 * pad < kw {
            return Err(Error::dim("conv2d", format!("kernel {kh}x{kw} larger than padded input {sx:?}")));
        }
        let co = sw[0];
        if let Some(b) = b {
            if self.shape(b) != [co] {
                return Err(Error::dim("conv2d", format!("bias {:?}, expected [{co}]", self.shape(b))));
            }
        }
        let geom = ConvGeom {
            c: sx[1],
            h: sx[2],
            w: sx[3],
            kh,
            kw,
            stride,
            pad,
            ho: (sx[2] + 2 * pad - kh) / stride + 1,
            wo: (sx[3] + 2 * pad - kw) / stride + 1,
        };
        let n = sx[0];
        let (kk, p) = (geom.cols_rows(), geom.out_positions());
        let in_sz = geom.c * geom.h * geom.w;
        let src = self.value(x).data();
        let wd = self.value(w).data();
        let mut out = vec![T::zero(); n * co * p];
        let mut cols = if geom.is_pointwise() { Vec::new() } else { vec![T::zero(); kk * p] };
        for i in 0..n {
            let img = &src[i * in_sz..(i + 1) * in_sz];
            let rhs: &[T] = if geom.is_pointwise() {
                img
            } else {
                kernels::im2col(img, &geom, &mut cols);
                &cols
            };
            let dst = &mut out[i * co * p..(i + 1) * co * p];
            if let Some(b) = b {
                let bd = self.value(b).data();
                for o in 0..co {
                    dst[o * p..(o + 1) * p].fill(bd[o]);
                }
                gemm(co, kk, p, wd, false, rhs, false, T::one(), dst);
            } else {
                gemm(co, kk, p, wd, false, rhs, false, T::zero(), dst);
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(
            Tensor::from_parts(vec![n, co, geom.ho, geom.wo], out),
            Op::Conv2d { x, w, b, geom },
            rg,
        ))
    }

    /// 3×3 depthwise convolution, stride 1, padding 1, weights `[C,1,3,3]`.
    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        self.check_live()?;
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 {
            return Err(Error::dim("depthwise_conv2d", format!("expected [N,C,H,W], got {sx:?}")));
        }
        if sw.len() != 4 || sw[2] != 3 || sw[3] != 3 || sw[1] != 1 {
            return Err(Error::Unsupported(format!(
                "depthwise kernel must be [C,1,3,3], got {sw:?}"
            )));
        }
        let c = sx[1];
        if sw[0] != c {
            return Err(Error::dim("depthwise_conv2d", format!("{c} channels vs weight {sw:?}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [c] {
                return Err(Error::dim("depthwise_conv2d", format!("bias {:?}", self.shape(b))));
            }
        }
        let (h, wd) = (sx[2], sx[3]);
        let hw = h * wd;
        let src = self.value(x).data();
        let k = self.value(w).data();
        let bias = b.map(|b| self.value(b).data().to_vec());
        let mut out = vec![T::zero(); src.len()];
        for (pi, (plane, dst)) in src.chunks(hw).zip(out.chunks_mut(hw)).enumerate() {
            let ch = pi % c;
            let bv = bias.as_ref().map_or(T::zero(), |b| b[ch]);
            kernels::dw3x3_plane(plane, &k[ch * 9..ch * 9 + 9], bv, h, wd, dst);
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::from_parts(sx, out), Op::DwConv { x, w, b }, rg))
    }

    // ---------------------------------------------------------------- layout

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.check_live()?;
        let t = self.value(x).reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.check_live()?;
        let t = self.value(x).permute(axes)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Permute { x, axes: axes.to_vec() }, rg))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_live()?;
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() || len == 0 || start + len > sx[axis] {
            return Err(Error::dim(
                "narrow",
                format!("[{start}, {}) on axis {axis} of {sx:?}", start + len),
            ));
        }
        let (outer, ext, inner) = split_axis(&sx, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * ext + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = sx;
        shape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Narrow { x, axis, start }, rg))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        self.check_live()?;
        let first = xs.first().ok_or_else(|| Error::EmptyInput("concat of zero tensors".into()))?;
        let s0 = self.shape(*first).to_vec();
        if axis >= s0.len() {
            return Err(Error::dim("concat", format!("axis {axis} for rank {}", s0.len())));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != s0.len() || s.iter().enumerate().any(|(d, &e)| d != axis && e != s0[d]) {
                return Err(Error::dim("concat", format!("{s0:?} vs {s:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&s0, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let t = self.value(v);
                let e = t.shape()[axis];
                out.extend_from_slice(&t.data()[o * e * inner..(o + 1) * e * inner]);
            }
        }
        let mut shape = s0;
        shape[axis] = total;
        let rg = xs.iter().any(|&v| self.rg(v));
        Ok(self.push(Tensor::from_parts(shape, out), Op::Concat { xs: xs.to_vec(), axis }, rg))
    }

    // ---------------------------------------------------------------- reductions & losses

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check_live()?;
        let t = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        Ok(self.push(t, Op::SumAll(x), rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.check_live()?;
        let v = self.value(x);
        let t = Tensor::scalar(v.sum() / T::of(v.numel() as f64));
        let rg = self.rg(x);
        Ok(self.push(t, Op::MeanAll(x), rg))
    }

    /// Row lookup: `ids` index rows of `table[V, D]`; output is `shape ++ [D]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], shape: &[usize]) -> Result<Var> {
        self.check_live()?;
        let st = self.shape(table).to_vec();
        if st.len() != 2 || numel(shape) != ids.len() {
            return Err(Error::dim("embedding", format!("table {st:?}, {} ids for shape {shape:?}", ids.len())));
        }
        let (v, d) = (st[0], st[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::dim("embedding", format!("id {bad} out of range for {v} rows")));
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let mut oshape = shape.to_vec();
        oshape.push(d);
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::from_parts(oshape, out),
            Op::Embedding { table, ids: ids.to_vec() },
            rg,
        ))
    }

    /// Mean token cross-entropy over unmasked rows of `logits[..., V]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        self.check_live()?;
        let sl = self.shape(logits).to_vec();
        let v = *sl.last().ok_or_else(|| Error::dim("cross_entropy", "rank-0 logits"))?;
        let rows = numel(&sl) / v;
        if targets.len() != rows || mask.len() != rows {
            return Err(Error::dim(
                "cross_entropy",
                format!("{rows} rows, {} targets, {} mask entries", targets.len(), mask.len()),
            ));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::Contract("cross_entropy: every target position is padding".into()));
        }
        let src = self.value(logits).data();
        let mut probs = vec![T::zero(); src.len()];
        let mut loss = T::zero();
        for r in 0..rows {
            if !mask[r] {
                continue;
            }
            let t = targets[r];
            if t >= v {
                return Err(Error::dim("cross_entropy", format!("target {t} out of range {v}")));
            }
            let row = &src[r * v..(r + 1) * v];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&x| (x - mx).exp()).sum();
            let lz = z.ln() + mx;
            for j in 0..v {
                probs[r * v + j] = (row[j] - lz).exp();
            }
            loss = loss + (lz - row[t]);
        }
        let t = Tensor::scalar(loss / T::of(count as f64));
        let rg = self.rg(logits);
        Ok(self.push(
            t,
            Op::CrossEntropy { logits, targets: targets.to_vec(), mask: mask.to_vec(), probs, count },
            rg,
        ))
    }

    /// Cosine similarity reduced over `axes`, keeping reduced axes as unit
    /// extents. The denominator is clamped below by `eps`, so zero vectors
    /// give 0.
    pub fn cosine(&mut self, a: Var, b: Var, axes: &[usize], eps: f64) -> Result<Var> {
        self.check_live()?;
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb {
            return Err(Error::dim("cosine", format!("{sa:?} vs {sb:?}")));
        }
        if axes.is_empty() || axes.iter().any(|&ax| ax >= sa.len()) {
            return Err(Error::dim("cosine", format!("axes {axes:?} for rank {}", sa.len())));
        }
        let mut oshape = sa.clone();
        for &ax in axes {
            oshape[ax] = 1;
        }
        let offs = broadcast_offsets(&sa, &oshape);
        let no = numel(&oshape);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut dot = vec![T::zero(); no];
        let mut na = vec![T::zero(); no];
        let mut nb = vec![T::zero(); no];
        for (i, &o) in offs.iter().enumerate() {
            dot[o] = dot[o] + da[i] * db[i];
            na[o] = na[o] + da[i] * da[i];
            nb[o] = nb[o] + db[i] * db[i];
        }
        let e = T::of(eps);
        let out = (0..no)
            .map(|o| dot[o] / (na[o].sqrt() * nb[o].sqrt()).max(e))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::from_parts(oshape, out),
            Op::Cosine { a, b, eps: e },
            rg,
        ))
    }

    // ---------------------------------------------------------------- backward

    /// Runs reverse-mode differentiation from a scalar loss and clears the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        self.check_live()?;
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut leaves = HashMap::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                let shape = self.nodes[i].value.shape().to_vec();
                leaves.insert(Var(i), Tensor::from_parts(shape, g));
                continue;
            }
            crate::backward::propagate(self, i, &g, &mut grads)?;
        }
        self.nodes.clear();
        self.consumed = true;
        Ok(Gradients {
            leaves,
            params: std::mem::take(&mut self.params),
        })
    }
}

pub(crate) fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, contrib: Vec<T>) {
    match &mut grads[v.0] {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(contrib) {
                *a = *a + b;
            }
        }
        slot @ None => *slot = Some(contrib),
    }
}

pub(crate) fn reduce_broadcast<T: Scalar>(g: &[T], out_shape: &[usize], in_shape: &[usize]) -> Vec<T> {
    if out_shape == in_shape {
        return g.to_vec();
    }
    let offs = broadcast_offsets(out_shape, in_shape);
    let mut r = vec![T::zero(); numel(in_shape)];
    for (i, &o) in offs.iter().enumerate() {
        r[o] = r[o] + g[i];
    }
    r
}

pub(crate) fn broadcast_offsets_pub(out: &[usize], inp: &[usize]) -> Vec<usize> {
    broadcast_offsets(out, inp)
}

pub(crate) fn split_axis_pub(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    split_axis(shape, axis)
}
