//! Post-norm transformer caption decoder with greedy and beam inference.

use crate::error::{Error, Result};
use crate::graph::{Mode, Var};
use crate::nn::{Ctx, Embedding, Init, LayerNorm, Linear, MultiHeadAttention};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::vocab::{END, START};

/// `LN(x + SelfAttn(x))`, `LN(x + CrossAttn(x, mem))`, `LN(x + MLP(x))`.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub self_attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub norm3: LayerNorm,
}

impl DecoderLayer {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, c: usize, heads: usize, ffn_ratio: usize) -> Self {
        DecoderLayer {
            self_attn: MultiHeadAttention::new(&mut init.sub("self_attn"), c, heads, true),
            norm1: LayerNorm::new(&mut init.sub("norm1"), c),
            cross_attn: MultiHeadAttention::new(&mut init.sub("cross_attn"), c, heads, true),
            norm2: LayerNorm::new(&mut init.sub("norm2"), c),
            fc1: Linear::new(&mut init.sub("fc1"), c, ffn_ratio * c, true),
            fc2: Linear::new(&mut init.sub("fc2"), ffn_ratio * c, c, true),
            norm3: LayerNorm::new(&mut init.sub("norm3"), c),
        }
    }

    /// Returns the output and the self- and cross-attention weights.
    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var, memory: Var) -> Result<(Var, Var, Var)> {
        let (s, self_w) = self.self_attn.forward(cx, x, x, true)?;
        let s = cx.drop(s)?;
        let x = cx.g.add(x, s)?;
        let x = self.norm1.forward(cx, x)?;
        let (c, cross_w) = self.cross_attn.forward(cx, x, memory, false)?;
        let c = cx.drop(c)?;
        let x = cx.g.add(x, c)?;
        let x = self.norm2.forward(cx, x)?;
        let h = self.fc1.forward(cx, x)?;
        let h = cx.g.relu(h)?;
        let h = self.fc2.forward(cx, h)?;
        let h = cx.drop(h)?;
        let x = cx.g.add(x, h)?;
        let x = self.norm3.forward(cx, x)?;
        Ok((x, self_w, cross_w))
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub embed: Embedding,
    pub pos: ParamId,
    pub layers: Vec<DecoderLayer>,
    pub out: Linear,
    pub max_len: usize,
    pub heads: usize,
    pub vocab_size: usize,
}

/// Logits `[N,T,V]` plus attention weights of the last layer.
pub struct DecoderOutput {
    pub logits: Var,
    /// `[N*h, T, T]`
    pub self_attn: Var,
    /// `[N*h, T, HW]`
    pub cross_attn: Var,
}

impl Decoder {
    pub fn new<T: Scalar>(
        init: &mut Init<'_, T>,
        c: usize,
        heads: usize,
        layers: usize,
        ffn_ratio: usize,
        max_len: usize,
        vocab_size: usize,
    ) -> Self {
        let embed = Embedding::new(&mut init.sub("embed"), vocab_size, c, 1.0);
        let pos = init.normal("pos", &[max_len, c], 0.02);
        let layers = (0..layers)
            .map(|i| DecoderLayer::new(&mut init.sub(&format!("layer{i}")), c, heads, ffn_ratio))
            .collect();
        let out = Linear::new(&mut init.sub("out"), c, vocab_size, true);
        Decoder {
            embed,
            pos,
            layers,
            out,
            max_len,
            heads,
            vocab_size,
        }
    }

    /// Teacher-forced forward for `ids` laid out `[n, t]`, attending to
    /// `memory[n, HW, C]`.
    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, ids: &[usize], n: usize, t: usize, memory: Var) -> Result<DecoderOutput> {
        if t == 0 || t > self.max_len {
            return Err(Error::Contract(format!(
                "decoder input length {t} outside 1..={}",
                self.max_len
            )));
        }
        let ms = cx.g.shape(memory).to_vec();
        if ms.len() != 3 || ms[0] != n {
            return Err(Error::dim("decoder", format!("memory {ms:?} for batch {n}")));
        }
        let x = self.embed.forward(cx, ids, &[n, t])?;
        let c = cx.g.shape(x)[2];
        let pos = cx.p(self.pos);
        let pos = cx.g.narrow(pos, 0, 0, t)?;
        let pos = cx.g.reshape(pos, &[1, t, c])?;
        let x = cx.g.add(x, pos)?;
        let mut x = cx.drop(x)?;
        let mut attn = None;
        for layer in &self.layers {
            let (y, s, a) = layer.forward(cx, x, memory)?;
            x = y;
            attn = Some((s, a));
        }
        let (self_attn, cross_attn) = attn.expect("decoder has at least one layer");
        let logits = self.out.forward(cx, x)?;
        Ok(DecoderOutput {
            logits,
            self_attn,
            cross_attn,
        })
    }

    /// Logits of the last position for every prefix in `prefixes` (equal
    /// lengths), plus the cross-attention rows `[n, h, HW]` of that position.
    fn step<T: Scalar>(&self, store: &ParamStore<T>, memory: &Tensor<T>, prefixes: &[Vec<usize>]) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let n = prefixes.len();
        let t = prefixes[0].len();
        let ids: Vec<usize> = prefixes.iter().flatten().copied().collect();
        let mut cx = Ctx::new(store, Mode::Eval);
        let mem = cx.g.constant(memory.clone());
        let out = self.forward(&mut cx, &ids, n, t, mem)?;
        let v = self.vocab_size;
        let logits = cx.g.value(out.logits).data();
        let rows = (0..n)
            .map(|i| {
                let off = (i * t + t - 1) * v;
                logits[off..off + v].iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).collect()
            })
            .collect();
        let a = cx.g.value(out.cross_attn);
        let hw = a.shape()[2];
        let ad = a.data();
        let h = self.heads;
        let attn = (0..n)
            .map(|i| {
                let mut r = Vec::with_capacity(h * hw);
                for head in 0..h {
                    let off = ((i * h + head) * t + t - 1) * hw;
                    r.extend(ad[off..off + hw].iter().map(|x| x.to_f64().unwrap_or(f64::NAN)));
                }
                r
            })
            .collect();
        Ok((rows, attn))
    }

    /// Greedy decoding for every memory in the batch `[N,HW,C]`.
    pub fn greedy<T: Scalar>(&self, store: &ParamStore<T>, memory: &Tensor<T>) -> Result<Vec<Decoded>> {
        let s = memory.shape();
        let (n, hw) = (s[0], s[1]);
        let mut prefixes = vec![vec![START]; n];
        let mut done = vec![false; n];
        let mut attn: Vec<Vec<f64>> = vec![Vec::new(); n];
        while prefixes[0].len() < self.max_len && done.iter().any(|d| !d) {
            let (rows, att) = self.step(store, memory, &prefixes)?;
            for i in 0..n {
                if done[i] {
                    // keep prefixes rectangular; the padding is never read back
                    prefixes[i].push(END);
                    continue;
                }
                let next = argmax(&rows[i]);
                prefixes[i].push(next);
                attn[i].extend_from_slice(&att[i]);
                if next == END {
                    done[i] = true;
                }
            }
        }
        Ok(prefixes
            .into_iter()
            .zip(attn)
            .map(|(p, a)| Decoded::new(&p, a, self.heads, hw))
            .collect())
    }

    /// Length-normalized beam search for a single memory `[1,HW,C]`.
    pub fn beam<T: Scalar>(&self, store: &ParamStore<T>, memory: &Tensor<T>, width: usize) -> Result<Vec<usize>> {
        let s = memory.shape();
        if s[0] != 1 {
            return Err(Error::dim("beam", format!("expected one memory, got {s:?}")));
        }
        let width = width.max(1);
        let mut beams: Vec<(Vec<usize>, f64)> = vec![(vec![START], 0.0)];
        let mut finished: Vec<(Vec<usize>, f64)> = Vec::new();
        let per = memory.numel();
        while !beams.is_empty() && beams[0].0.len() < self.max_len && finished.len() < width {
            let k = beams.len();
            let mut data = Vec::with_capacity(per * k);
            for _ in 0..k {
                data.extend_from_slice(memory.data());
            }
            let mem = Tensor::new(&[k, s[1], s[2]], data)?;
            let prefixes: Vec<Vec<usize>> = beams.iter().map(|b| b.0.clone()).collect();
            let (rows, _) = self.step(store, &mem, &prefixes)?;
            let mut cand: Vec<(Vec<usize>, f64)> = Vec::new();
            for ((p, score), row) in beams.iter().zip(&rows) {
                let lp = log_softmax(row);
                for (tok, l) in lp.iter().enumerate() {
                    let mut q = p.clone();
                    q.push(tok);
                    cand.push((q, score + l));
                }
            }
            // stable sort keeps lower ids first on ties
            cand.sort_by(|a, b| b.1.total_cmp(&a.1));
            beams.clear();
            for (q, sc) in cand {
                if beams.len() + finished.len() >= width {
                    break;
                }
                if *q.last().expect("nonempty") == END {
                    finished.push((q, sc));
                } else {
                    beams.push((q, sc));
                }
            }
        }
        finished.extend(beams);
        let norm = |(q, sc): &(Vec<usize>, f64)| sc / (q.len() - 1) as f64;
        let best = finished
            .iter()
            .max_by(|a, b| norm(a).total_cmp(&norm(b)))
            .expect("at least one hypothesis");
        Ok(best.0[1..].iter().copied().take_while(|&t| t != END).collect())
    }
}

/// A decoded caption with per-step cross-attention.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    /// Word ids, without `<start>` and `<end>`.
    pub ids: Vec<usize>,
    /// `[steps, h, HW]` weights of the final decoder layer, one step per
    /// emitted token (including `<end>` when reached).
    pub attention: Tensor<f64>,
}

impl Decoded {
    fn new(prefix: &[usize], attn: Vec<f64>, heads: usize, hw: usize) -> Self {
        let ids: Vec<usize> = prefix[1..].iter().copied().take_while(|&t| t != END).collect();
        let steps = attn.len() / (heads * hw);
        Decoded {
            ids,
            attention: Tensor::new(&[steps, heads, hw], attn).expect("attention rows are complete"),
        }
    }

    /// Head-averaged attention `[steps, HW]`.
    pub fn mean_attention(&self) -> Tensor<f64> {
        let s = self.attention.shape();
        let (steps, h, hw) = (s[0], s[1], s[2]);
        let d = self.attention.data();
        Tensor::from_fn(&[steps, hw], |i| {
            let (t, p) = (i / hw, i % hw);
            (0..h).map(|k| d[(t * h + k) * hw + p]).sum::<f64>() / h as f64
        })
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lz = row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln() + mx;
    row.iter().map(|x| x - lz).collect()
}
