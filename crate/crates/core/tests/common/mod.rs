//! Naive f64 reference implementations shared by the integration tests.
//! Everything here works on plain `Vec<f64>` with explicit loops.
#![allow(dead_code)]

pub mod metric_oracles;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use satcap::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::normal(shape, 0.0, 1.0, &mut rng(seed))
}

pub fn assert_close(a: &[f64], b: &[f64], tol: f64, what: &str) {
    assert_eq!(a.len(), b.len(), "{what}: length");
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "{what}[{i}]: {x} vs {y}");
    }
}

/// `[m,k]·[k,n]`
pub fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i * k + p] * b[p * n + j];
            }
            out[i * n + j] = s;
        }
    }
    out
}

pub fn transpose(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut t = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            t[j * m + i] = a[i * n + j];
        }
    }
    t
}

pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// Adds `bias[j]` to every row of an `[m, n]` matrix.
pub fn add_row(a: &[f64], bias: &[f64]) -> Vec<f64> {
    let n = bias.len();
    a.iter().enumerate().map(|(i, x)| x + bias[i % n]).collect()
}

pub fn softmax_rows(a: &[f64], n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.len());
    for row in a.chunks(n) {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|x| (x - mx).exp()).collect();
        let s: f64 = e.iter().sum();
        out.extend(e.iter().map(|x| x / s));
    }
    out
}

pub fn layer_norm_rows(a: &[f64], gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let n = gamma.len();
    let mut out = Vec::with_capacity(a.len());
    for row in a.chunks(n) {
        let mean = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        let inv = 1.0 / (var + 1e-5).sqrt();
        out.extend(row.iter().enumerate().map(|(j, x)| (x - mean) * inv * gamma[j] + beta[j]));
    }
    out
}

pub fn relu(a: &[f64]) -> Vec<f64> {
    a.iter().map(|x| x.max(0.0)).collect()
}

pub fn gelu(a: &[f64]) -> Vec<f64> {
    let k = (2.0 / std::f64::consts::PI).sqrt();
    a.iter()
        .map(|&x| 0.5 * x * (1.0 + (k * (x + 0.044715 * x * x * x)).tanh()))
        .collect()
}

/// Train-mode batch norm on `[N,C,H,W]` with biased variance.
pub fn bn_train(x: &[f64], n: usize, c: usize, hw: usize, gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    let cnt = (n * hw) as f64;
    for ch in 0..c {
        let idx = |b: usize, p: usize| (b * c + ch) * hw + p;
        let mut mean = 0.0;
        for b in 0..n {
            for p in 0..hw {
                mean += x[idx(b, p)];
            }
        }
        mean /= cnt;
        let mut var = 0.0;
        for b in 0..n {
            for p in 0..hw {
                var += (x[idx(b, p)] - mean).powi(2);
            }
        }
        var /= cnt;
        let inv = 1.0 / (var + 1e-5).sqrt();
        for b in 0..n {
            for p in 0..hw {
                out[idx(b, p)] = (x[idx(b, p)] - mean) * inv * gamma[ch] + beta[ch];
            }
        }
    }
    out
}

/// Zero-padded "same" convolution of `[N,Ci,H,W]` with `[Co,Ci/groups,k,k]`, stride 1.
pub fn conv_same(x: &[f64], n: usize, ci: usize, h: usize, w: usize, wt: &[f64], co: usize, k: usize, groups: usize) -> Vec<f64> {
    let pad = (k / 2) as isize;
    let cig = ci / groups;
    let cog = co / groups;
    let mut out = vec![0.0; n * co * h * w];
    for b in 0..n {
        for o in 0..co {
            let g = o / cog;
            for y in 0..h {
                for xx in 0..w {
                    let mut s = 0.0;
                    for ic in 0..cig {
                        let c_in = g * cig + ic;
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = y as isize + ky as isize - pad;
                                let ix = xx as isize + kx as isize - pad;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                s += x[((b * ci + c_in) * h + iy as usize) * w + ix as usize]
                                    * wt[((o * cig + ic) * k + ky) * k + kx];
                            }
                        }
                    }
                    out[((b * co + o) * h + y) * w + xx] = s;
                }
            }
        }
    }
    out
}

/// `[N,C,H*W]` channel bias.
pub fn add_channel(x: &[f64], c: usize, hw: usize, bias: &[f64]) -> Vec<f64> {
    x.iter().enumerate().map(|(i, v)| v + bias[(i / hw) % c]).collect()
}

/// `[N,L,C]` tokens ↔ `[N,C,L]` maps.
pub fn tokens_to_map(x: &[f64], n: usize, l: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for b in 0..n {
        for p in 0..l {
            for ch in 0..c {
                out[(b * c + ch) * l + p] = x[(b * l + p) * c + ch];
            }
        }
    }
    out
}

pub fn map_to_tokens(x: &[f64], n: usize, c: usize, l: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for b in 0..n {
        for ch in 0..c {
            for p in 0..l {
                out[(b * l + p) * c + ch] = x[(b * c + ch) * l + p];
            }
        }
    }
    out
}

/// Weights of one attention module as plain vectors (`[C,C]` row-major).
pub struct MhaWeights {
    pub wq: Vec<f64>,
    pub bq: Option<Vec<f64>>,
    pub wk: Vec<f64>,
    pub bk: Option<Vec<f64>>,
    pub wv: Vec<f64>,
    pub bv: Option<Vec<f64>>,
    pub wo: Vec<f64>,
    pub bo: Vec<f64>,
}

impl MhaWeights {
    pub fn read(s: &satcap::ParamStore<f64>, m: &satcap::nn::MultiHeadAttention) -> Self {
        let v = |id: satcap::ParamId| s.get(id).data().to_vec();
        MhaWeights {
            wq: v(m.q.w),
            bq: m.q.b.map(v),
            wk: v(m.k.w),
            bk: m.k.b.map(v),
            wv: v(m.v.w),
            bv: m.v.b.map(v),
            wo: v(m.out.w),
            bo: v(m.out.b.unwrap()),
        }
    }
}

/// Scaled dot-product attention of one sequence; returns the output
/// `[lq, c]` and the per-head weights `[heads][lq*lk]`.
pub fn mha(w: &MhaWeights, q_in: &[f64], kv: &[f64], lq: usize, lk: usize, c: usize, heads: usize, causal: bool) -> (Vec<f64>, Vec<Vec<f64>>) {
    let lin = |x: &[f64], l: usize, wt: &[f64], b: &Option<Vec<f64>>| {
        let y = mm(x, wt, l, c, c);
        match b {
            Some(b) => add_row(&y, b),
            None => y,
        }
    };
    let q = lin(q_in, lq, &w.wq, &w.bq);
    let k = lin(kv, lk, &w.wk, &w.bk);
    let v = lin(kv, lk, &w.wv, &w.bv);
    let d = c / heads;
    let mut merged = vec![0.0; lq * c];
    let mut maps = Vec::new();
    for h in 0..heads {
        let cols = |m: &[f64], l: usize| -> Vec<f64> { (0..l).flat_map(|i| m[i * c + h * d..i * c + (h + 1) * d].to_vec()).collect() };
        let (qh, kh, vh) = (cols(&q, lq), cols(&k, lk), cols(&v, lk));
        let mut scores: Vec<f64> = mm(&qh, &transpose(&kh, lk, d), lq, d, lk).iter().map(|x| x / (d as f64).sqrt()).collect();
        if causal {
            for i in 0..lq {
                for j in i + 1..lk {
                    scores[i * lk + j] = f64::NEG_INFINITY;
                }
            }
        }
        let att = softmax_rows(&scores, lk);
        let o = mm(&att, &vh, lq, lk, d);
        for i in 0..lq {
            merged[i * c + h * d..i * c + (h + 1) * d].copy_from_slice(&o[i * d..(i + 1) * d]);
        }
        maps.push(att);
    }
    (add_row(&mm(&merged, &w.wo, lq, c, c), &w.bo), maps)
}
