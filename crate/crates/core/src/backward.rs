//! Vector-Jacobian products for every op recorded on a [`Graph`].

use crate::error::Result;
use crate::graph::{accumulate, broadcast_offsets_pub, reduce_broadcast, split_axis_pub, Graph, Op, Var};
use crate::kernels;
use crate::scalar::{gemm, Scalar};
use crate::tensor::numel;

pub(crate) fn propagate<T: Scalar>(
    graph: &Graph<T>,
    i: usize,
    g: &[T],
    grads: &mut [Option<Vec<T>>],
) -> Result<()> {
    let node = &graph.nodes[i];
    let out_shape = node.value.shape();
    let val = |v: Var| &graph.nodes[v.index()].value;
    let rg = |v: Var| graph.nodes[v.index()].requires_grad;

    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if rg(*a) {
                accumulate(grads, *a, reduce_broadcast(g, out_shape, val(*a).shape()));
            }
            if rg(*b) {
                accumulate(grads, *b, reduce_broadcast(g, out_shape, val(*b).shape()));
            }
        }
        Op::Sub(a, b) => {
            if rg(*a) {
                accumulate(grads, *a, reduce_broadcast(g, out_shape, val(*a).shape()));
            }
            if rg(*b) {
                let r = reduce_broadcast(g, out_shape, val(*b).shape());
                accumulate(grads, *b, r.into_iter().map(|x| -x).collect());
            }
        }
        Op::Mul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            if ta.shape() == tb.shape() {
                if rg(*a) {
                    accumulate(grads, *a, g.iter().zip(tb.data()).map(|(&g, &y)| g * y).collect());
                }
                if rg(*b) {
                    accumulate(grads, *b, g.iter().zip(ta.data()).map(|(&g, &x)| g * x).collect());
                }
            } else {
                let oa = broadcast_offsets_pub(out_shape, ta.shape());
                let ob = broadcast_offsets_pub(out_shape, tb.shape());
                if rg(*a) {
                    let mut r = vec![T::zero(); ta.numel()];
                    for k in 0..g.len() {
                        r[oa[k]] = r[oa[k]] + g[k] * tb.data()[ob[k]];
                    }
                    accumulate(grads, *a, r);
                }
                if rg(*b) {
                    let mut r = vec![T::zero(); tb.numel()];
                    for k in 0..g.len() {
                        r[ob[k]] = r[ob[k]] + g[k] * ta.data()[oa[k]];
                    }
                    accumulate(grads, *b, r);
                }
            }
        }
        Op::Scale(a, s) => {
            accumulate(grads, *a, g.iter().map(|&x| x * *s).collect());
        }
        Op::DivScalar(a, s) => {
            let d = val(*s).item();
            if rg(*a) {
                accumulate(grads, *a, g.iter().map(|&x| x / d).collect());
            }
            if rg(*s) {
                let y = node.value.data();
                let total: T = g.iter().zip(y).map(|(&gi, &yi)| gi * yi).sum();
                accumulate(grads, *s, vec![-total / d]);
            }
        }
        Op::MatMul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let (k, n) = (tb.shape()[0], tb.shape()[1]);
            let m = ta.numel() / k;
            if rg(*a) {
                let mut r = vec![T::zero(); m * k];
                gemm(m, n, k, g, false, tb.data(), true, T::zero(), &mut r);
                accumulate(grads, *a, r);
            }
            if rg(*b) {
                let mut r = vec![T::zero(); k * n];
                gemm(k, m, n, ta.data(), true, g, false, T::zero(), &mut r);
                accumulate(grads, *b, r);
            }
        }
        Op::Bmm { a, b, ta, tb } => {
            let (xa, xb) = (val(*a), val(*b));
            let r = out_shape.len();
            let (m, n) = (out_shape[r - 2], out_shape[r - 1]);
            let sa = xa.shape();
            let k = if *ta { sa[sa.len() - 2] } else { sa[sa.len() - 1] };
            let batch = numel(&out_shape[..r - 2]);
            let (da, db) = (xa.data(), xb.data());
            if rg(*a) {
                let mut res = vec![T::zero(); batch * m * k];
                for bi in 0..batch {
                    let gb = &g[bi * m * n..(bi + 1) * m * n];
                    let bb = &db[bi * k * n..(bi + 1) * k * n];
                    let dst = &mut res[bi * m * k..(bi + 1) * m * k];
                    if *ta {
                        gemm(k, n, m, bb, *tb, gb, true, T::zero(), dst);
                    } else {
                        gemm(m, n, k, gb, false, bb, !*tb, T::zero(), dst);
                    }
                }
                accumulate(grads, *a, res);
            }
            if rg(*b) {
                let mut res = vec![T::zero(); batch * k * n];
                for bi in 0..batch {
                    let gb = &g[bi * m * n..(bi + 1) * m * n];
                    let ab = &da[bi * m * k..(bi + 1) * m * k];
                    let dst = &mut res[bi * k * n..(bi + 1) * k * n];
                    if *tb {
                        gemm(n, m, k, gb, true, ab, *ta, T::zero(), dst);
                    } else {
                        gemm(k, m, n, ab, !*ta, gb, false, T::zero(), dst);
                    }
                }
                accumulate(grads, *b, res);
            }
        }
        Op::Relu(a) => {
            let x = val(*a).data();
            accumulate(
                grads,
                *a,
                g.iter().zip(x).map(|(&g, &x)| if x > T::zero() { g } else { T::zero() }).collect(),
            );
        }
        Op::Gelu(a) => {
            let x = val(*a).data();
            accumulate(grads, *a, g.iter().zip(x).map(|(&g, &x)| g * kernels::gelu_grad(x)).collect());
        }
        Op::Sigmoid(a) => {
            let y = node.value.data();
            accumulate(
                grads,
                *a,
                g.iter().zip(y).map(|(&g, &y)| g * y * (T::one() - y)).collect(),
            );
        }
        Op::Dropout { x, mask } => {
            accumulate(grads, *x, g.iter().zip(mask).map(|(&g, &m)| g * m).collect());
        }
        Op::Softmax { x } => {
            let y = node.value.data();
            let s = *out_shape.last().unwrap();
            let mut r = vec![T::zero(); y.len()];
            for ((yr, gr), dst) in y.chunks(s).zip(g.chunks(s)).zip(r.chunks_mut(s)) {
                let dotp: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                for j in 0..s {
                    dst[j] = yr[j] * (gr[j] - dotp);
                }
            }
            accumulate(grads, *x, r);
        }
        Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
            let d = *out_shape.last().unwrap();
            let rows = xhat.len() / d;
            let gm = val(*gamma).data();
            if rg(*x) {
                let dn = T::of(d as f64);
                let mut r = vec![T::zero(); xhat.len()];
                for row in 0..rows {
                    let (lo, hi) = (row * d, (row + 1) * d);
                    let mut s1 = T::zero();
                    let mut s2 = T::zero();
                    for j in lo..hi {
                        let dh = g[j] * gm[j - lo];
                        s1 = s1 + dh;
                        s2 = s2 + dh * xhat[j];
                    }
                    let k = rstd[row] / dn;
                    for j in lo..hi {
                        let dh = g[j] * gm[j - lo];
                        r[j] = k * (dn * dh - s1 - xhat[j] * s2);
                    }
                }
                accumulate(grads, *x, r);
            }
            if rg(*gamma) {
                let mut r = vec![T::zero(); d];
                for (j, (&gv, &h)) in g.iter().zip(xhat).enumerate() {
                    r[j % d] = r[j % d] + gv * h;
                }
                accumulate(grads, *gamma, r);
            }
            if rg(*beta) {
                let mut r = vec![T::zero(); d];
                for (j, &gv) in g.iter().enumerate() {
                    r[j % d] = r[j % d] + gv;
                }
                accumulate(grads, *beta, r);
            }
        }
        Op::BatchNorm { x, gamma, beta, xhat, rstd, train } => {
            let (n, c) = (out_shape[0], out_shape[1]);
            let hw = out_shape[2] * out_shape[3];
            let gm = val(*gamma).data();
            let mut sum_g = vec![T::zero(); c];
            let mut sum_gx = vec![T::zero(); c];
            for i in 0..n {
                for ch in 0..c {
                    let base = (i * c + ch) * hw;
                    for p in base..base + hw {
                        sum_g[ch] = sum_g[ch] + g[p];
                        sum_gx[ch] = sum_gx[ch] + g[p] * xhat[p];
                    }
                }
            }
            if rg(*x) {
                let mut r = vec![T::zero(); g.len()];
                let m = T::of((n * hw) as f64);
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * hw;
                        let gs = gm[ch] * rstd[ch];
                        for p in base..base + hw {
                            r[p] = if *train {
                                gs * (g[p] - sum_g[ch] / m - xhat[p] * sum_gx[ch] / m)
                            } else {
                                gs * g[p]
                            };
                        }
                    }
                }
                accumulate(grads, *x, r);
            }
            if rg(*gamma) {
                accumulate(grads, *gamma, sum_gx);
            }
            if rg(*beta) {
                accumulate(grads, *beta, sum_g);
            }
        }
        Op::Conv2d { x, w, b, geom } => {
            let n = out_shape[0];
            let co = out_shape[1];
            let (kk, p) = (geom.cols_rows(), geom.out_positions());
            let in_sz = geom.c * geom.h * geom.w;
            let src = val(*x).data();
            let wd = val(*w).data();
            let mut dw = rg(*w).then(|| vec![T::zero(); co * kk]);
            let mut dx = rg(*x).then(|| vec![T::zero(); n * in_sz]);
            let mut cols = vec![T::zero(); if geom.is_pointwise() { 0 } else { kk * p }];
            let mut dcols = vec![T::zero(); kk * p];
            for i in 0..n {
                let gi = &g[i * co * p..(i + 1) * co * p];
                let img = &src[i * in_sz..(i + 1) * in_sz];
                if let Some(dw) = dw.as_mut() {
                    let colsref: &[T] = if geom.is_pointwise() {
                        img
                    } else {
                        kernels::im2col(img, geom, &mut cols);
                        &cols
                    };
                    gemm(co, p, kk, gi, false, colsref, true, T::one(), dw);
                }
                if let Some(dx) = dx.as_mut() {
                    let dst = &mut dx[i * in_sz..(i + 1) * in_sz];
                    if geom.is_pointwise() {
                        gemm(kk, co, p, wd, true, gi, false, T::zero(), dst);
                    } else {
                        gemm(kk, co, p, wd, true, gi, false, T::zero(), &mut dcols);
                        kernels::col2im(&dcols, geom, dst);
                    }
                }
            }
            if let Some(dx) = dx {
                accumulate(grads, *x, dx);
            }
            if let Some(dw) = dw {
                accumulate(grads, *w, dw);
            }
            if let Some(b) = b {
                if rg(*b) {
                    let mut db = vec![T::zero(); co];
                    for (k, chunk) in g.chunks(p).enumerate() {
                        db[k % co] = db[k % co] + chunk.iter().copied().sum::<T>();
                    }
                    accumulate(grads, *b, db);
                }
            }
        }
        Op::DwConv { x, w, b } => {
            let c = out_shape[1];
            let (h, wd) = (out_shape[2], out_shape[3]);
            let hw = h * wd;
            let src = val(*x).data();
            let k = val(*w).data();
            let mut dx = rg(*x).then(|| vec![T::zero(); src.len()]);
            let mut dk = rg(*w).then(|| vec![T::zero(); c * 9]);
            for (pi, gp) in g.chunks(hw).enumerate() {
                let ch = pi % c;
                kernels::dw3x3_plane_backward(
                    &src[pi * hw..(pi + 1) * hw],
                    &k[ch * 9..ch * 9 + 9],
                    gp,
                    h,
                    wd,
                    dx.as_mut().map(|d| &mut d[pi * hw..(pi + 1) * hw]),
                    dk.as_mut().map(|d| &mut d[ch * 9..ch * 9 + 9]),
                );
            }
            if let Some(dx) = dx {
                accumulate(grads, *x, dx);
            }
            if let Some(dk) = dk {
                accumulate(grads, *w, dk);
            }
            if let Some(b) = b {
                if rg(*b) {
                    let mut db = vec![T::zero(); c];
                    for (pi, gp) in g.chunks(hw).enumerate() {
                        db[pi % c] = db[pi % c] + gp.iter().copied().sum::<T>();
                    }
                    accumulate(grads, *b, db);
                }
            }
        }
        Op::Reshape(x) => accumulate(grads, *x, g.to_vec()),
        Op::Permute { x, axes } => {
            let mut inv = vec![0; axes.len()];
            for (i, &a) in axes.iter().enumerate() {
                inv[a] = i;
            }
            let gt = crate::tensor::Tensor::from_parts(out_shape.to_vec(), g.to_vec());
            accumulate(grads, *x, gt.permute(&inv)?.into_vec());
        }
        Op::Narrow { x, axis, start } => {
            let sx = val(*x).shape();
            let (outer, ext, inner) = split_axis_pub(sx, *axis);
            let len = out_shape[*axis];
            let mut r = vec![T::zero(); numel(sx)];
            for o in 0..outer {
                let dst = (o * ext + start) * inner;
                r[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            accumulate(grads, *x, r);
        }
        Op::Concat { xs, axis } => {
            let (outer, total, inner) = split_axis_pub(out_shape, *axis);
            let mut off = 0;
            for &v in xs {
                let e = val(v).shape()[*axis];
                if rg(v) {
                    let mut r = Vec::with_capacity(outer * e * inner);
                    for o in 0..outer {
                        let base = (o * total + off) * inner;
                        r.extend_from_slice(&g[base..base + e * inner]);
                    }
                    accumulate(grads, v, r);
                }
                off += e;
            }
        }
        Op::SumAll(x) => accumulate(grads, *x, vec![g[0]; val(*x).numel()]),
        Op::MeanAll(x) => {
            let n = val(*x).numel();
            accumulate(grads, *x, vec![g[0] / T::of(n as f64); n]);
        }
        Op::Embedding { table, ids } => {
            let st = val(*table).shape();
            let d = st[1];
            let mut r = vec![T::zero(); st[0] * d];
            for (k, &id) in ids.iter().enumerate() {
                for j in 0..d {
                    r[id * d + j] = r[id * d + j] + g[k * d + j];
                }
            }
            accumulate(grads, *table, r);
        }
        Op::CrossEntropy { logits, targets, mask, probs, count } => {
            let v = *val(*logits).shape().last().unwrap();
            let scale = g[0] / T::of(*count as f64);
            let mut r = vec![T::zero(); probs.len()];
            for (row, &t) in targets.iter().enumerate() {
                if !mask[row] {
                    continue;
                }
                for j in 0..v {
                    r[row * v + j] = probs[row * v + j] * scale;
                }
                r[row * v + t] = r[row * v + t] - scale;
            }
            accumulate(grads, *logits, r);
        }
        Op::Cosine { a, b, eps } => {
            let (xa, xb) = (val(*a), val(*b));
            let offs = broadcast_offsets_pub(xa.shape(), out_shape);
            let no = node.value.numel();
            let (da, db) = (xa.data(), xb.data());
            let mut dot = vec![T::zero(); no];
            let mut na = vec![T::zero(); no];
            let mut nb = vec![T::zero(); no];
            for (k, &o) in offs.iter().enumerate() {
                dot[o] = dot[o] + da[k] * db[k];
                na[o] = na[o] + da[k] * da[k];
                nb[o] = nb[o] + db[k] * db[k];
            }
            let cos = node.value.data();
            let mut ga = vec![T::zero(); da.len()];
            let mut gb = vec![T::zero(); db.len()];
            for (k, &o) in offs.iter().enumerate() {
                let prod = na[o].sqrt() * nb[o].sqrt();
                if prod > *eps {
                    ga[k] = g[o] * (db[k] / prod - cos[o] * da[k] / na[o]);
                    gb[k] = g[o] * (da[k] / prod - cos[o] * db[k] / nb[o]);
                } else {
                    ga[k] = g[o] * db[k] / *eps;
                    gb[k] = g[o] * da[k] / *eps;
                }
            }
            if rg(*a) {
                accumulate(grads, *a, ga);
            }
            if rg(*b) {
                accumulate(grads, *b, gb);
            }
        }
    }
    Ok(())
}
