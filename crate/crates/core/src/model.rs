//! The full captioning model: siamese encoder, fusion and decoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::decoder::{Decoded, Decoder, DecoderOutput};
use crate::encoder::{Encoded, Encoder};
use crate::error::{Error, Result};
use crate::fusion::Fusion;
use crate::graph::{Mode, Var};
use crate::nn::{map_to_tokens, tokens_to_map, Ctx, Init};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::vocab::{END, PAD, START};

#[derive(Clone, Debug)]
pub struct SatCap {
    pub cfg: ModelConfig,
    pub encoder: Encoder,
    pub fusion: Fusion,
    pub decoder: Decoder,
}

/// Both encoder passes and the fused decoder memory.
pub struct Memory {
    pub before: Encoded,
    pub after: Encoded,
    /// `[N, HW, C]`
    pub tokens: Var,
}

/// Teacher-forcing inputs for a batch of captions.
#[derive(Clone, Debug, PartialEq)]
pub struct CaptionBatch {
    pub n: usize,
    pub t: usize,
    /// `<start> w1 .. wk`, padded.
    pub inputs: Vec<usize>,
    /// `w1 .. wk <end>`, padded.
    pub targets: Vec<usize>,
    pub mask: Vec<bool>,
}

impl CaptionBatch {
    /// Captions longer than `max_len - 1` words are truncated.
    pub fn new(captions: &[Vec<usize>], max_len: usize) -> Result<Self> {
        if captions.is_empty() {
            return Err(Error::EmptyInput("caption batch is empty".into()));
        }
        let keep = max_len.saturating_sub(1);
        let t = captions.iter().map(|c| c.len().min(keep) + 1).max().unwrap_or(1);
        let n = captions.len();
        let mut inputs = vec![PAD; n * t];
        let mut targets = vec![PAD; n * t];
        let mut mask = vec![false; n * t];
        for (i, c) in captions.iter().enumerate() {
            let c = &c[..c.len().min(keep)];
            let row = i * t;
            inputs[row] = START;
            for (j, &w) in c.iter().enumerate() {
                inputs[row + j + 1] = w;
                targets[row + j] = w;
                mask[row + j] = true;
            }
            targets[row + c.len()] = END;
            mask[row + c.len()] = true;
        }
        Ok(CaptionBatch { n, t, inputs, targets, mask })
    }
}

impl SatCap {
    /// Registers freshly initialized parameters in a new store.
    pub fn new<T: Scalar>(cfg: &ModelConfig, vocab_size: usize, seed: u64) -> Result<(Self, ParamStore<T>)> {
        let mut store = ParamStore::new();
        let model = Self::register(cfg, vocab_size, &mut store, seed)?;
        Ok((model, store))
    }

    pub fn register<T: Scalar>(cfg: &ModelConfig, vocab_size: usize, store: &mut ParamStore<T>, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if vocab_size <= END {
            return Err(Error::Config(format!("vocabulary of {vocab_size} tokens has no words")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init::new(store, &mut rng);
        let encoder = Encoder::new(&mut init.sub("encoder"), cfg)?;
        let fusion = Fusion::new(&mut init.sub("fusion"), cfg);
        let decoder = Decoder::new(
            &mut init.sub("decoder"),
            cfg.model_dim,
            cfg.heads,
            cfg.decoder_layers,
            cfg.ffn_ratio,
            cfg.max_len,
            vocab_size,
        );
        Ok(SatCap {
            cfg: cfg.clone(),
            encoder,
            fusion,
            decoder,
        })
    }

    /// Encodes both images with the shared encoder and fuses them.
    pub fn memory<T: Scalar>(&self, cx: &mut Ctx<'_, T>, before: Var, after: Var) -> Result<Memory> {
        let hw = self.cfg.feature_hw;
        let eb = self.encoder.forward(cx, before)?;
        let ea = self.encoder.forward(cx, after)?;
        let z1 = tokens_to_map(&mut cx.g, eb.tokens, hw, hw)?;
        let z2 = tokens_to_map(&mut cx.g, ea.tokens, hw, hw)?;
        let f = self.fusion.forward(cx, z1, z2)?;
        let tokens = map_to_tokens(&mut cx.g, f)?;
        Ok(Memory {
            before: eb,
            after: ea,
            tokens,
        })
    }

    pub fn logits<T: Scalar>(&self, cx: &mut Ctx<'_, T>, before: Var, after: Var, batch: &CaptionBatch) -> Result<DecoderOutput> {
        let m = self.memory(cx, before, after)?;
        self.decoder.forward(cx, &batch.inputs, batch.n, batch.t, m.tokens)
    }

    /// Mean token cross-entropy with teacher forcing.
    pub fn loss<T: Scalar>(&self, cx: &mut Ctx<'_, T>, before: Var, after: Var, batch: &CaptionBatch) -> Result<Var> {
        let out = self.logits(cx, before, after, batch)?;
        cx.g.cross_entropy(out.logits, &batch.targets, &batch.mask)
    }

    /// Decoder memory values for a batch, evaluated without a tape.
    pub fn memory_tensor<T: Scalar>(&self, store: &ParamStore<T>, before: &Tensor<T>, after: &Tensor<T>) -> Result<Tensor<T>> {
        let mut cx = Ctx::new(store, Mode::Eval);
        let b = cx.g.constant(before.clone());
        let a = cx.g.constant(after.clone());
        let m = self.memory(&mut cx, b, a)?;
        Ok(cx.g.value(m.tokens).clone())
    }

    pub fn greedy<T: Scalar>(&self, store: &ParamStore<T>, before: &Tensor<T>, after: &Tensor<T>) -> Result<Vec<Decoded>> {
        let mem = self.memory_tensor(store, before, after)?;
        self.decoder.greedy(store, &mem)
    }

    pub fn beam<T: Scalar>(&self, store: &ParamStore<T>, before: &Tensor<T>, after: &Tensor<T>, width: usize) -> Result<Vec<Vec<usize>>> {
        let mem = self.memory_tensor(store, before, after)?;
        let s = mem.shape().to_vec();
        let per = s[1] * s[2];
        (0..s[0])
            .map(|i| {
                let one = Tensor::new(&[1, s[1], s[2]], mem.data()[i * per..(i + 1) * per].to_vec())?;
                self.decoder.beam(store, &one, width)
            })
            .collect()
    }

    /// Shape `[N, 3, S, S]` or `[N, C_o, H, W]` expected for one branch.
    pub fn input_shape(&self, n: usize) -> [usize; 4] {
        let c = &self.cfg;
        if c.use_backbone {
            [n, 3, c.image_size, c.image_size]
        } else {
            [n, c.backbone_dim, c.feature_hw, c.feature_hw]
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn caption_batch_layout() {
        let b = CaptionBatch::new(&[vec![5, 6], vec![7]], 40).unwrap();
        assert_eq!(b.t, 3);
        assert_eq!(b.inputs, vec![START, 5, 6, START, 7, PAD]);
        assert_eq!(b.targets, vec![5, 6, END, 7, END, PAD]);
        assert_eq!(b.mask, vec![true, true, true, true, true, false]);
        let long = CaptionBatch::new(&[vec![9; 10]], 4).unwrap();
        assert_eq!(long.t, 4);
        assert_eq!(long.targets, vec![9, 9, 9, END]);
    }
}
