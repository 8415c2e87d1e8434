//! Finite-difference checks of every model layer and of the full model.
//!
//! Each layer is reduced to a scalar through a fixed random projection
//! `sum(y ⊙ R)`, then checked with respect to its inputs and its parameters.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{FfnVariant, FusionMethod, LocalEnhance, ModelConfig};
use crate::decoder::DecoderLayer;
use crate::encoder::{Cam, ConvFfn, Sam, Sem};
use crate::error::Result;
use crate::fusion::Fusion;
use crate::gradcheck::{grad_check_many, grad_check_params, GradCheckReport, DEFAULT_FLOOR};
use crate::graph::{Graph, Mode, Var};
use crate::model::{CaptionBatch, SatCap};
use crate::nn::{Ctx, Init};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const LAYER_TOL: f64 = 1e-4;
pub const MODEL_TOL: f64 = 1e-3;
const EPS: f64 = 1e-5;
/// Smaller step for the full model: deep ReLU stacks put more pre-activations
/// within reach of a kink.
const MODEL_EPS: f64 = 1e-6;

/// Elements perturbed per parameter tensor.
pub const PER_PARAM: usize = 6;

fn project(g: &mut Graph<f64>, y: Var) -> Result<Var> {
    let shape = g.value(y).shape().to_vec();
    let seed = shape.iter().fold(17u64, |h, &d| h.wrapping_mul(31).wrapping_add(d as u64));
    let r = Tensor::uniform(&shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
    let r = g.constant(r);
    let p = g.mul(y, r)?;
    g.sum(p)
}

fn with_ctx<F>(g: &mut Graph<f64>, store: &ParamStore<f64>, f: F) -> Result<Var>
where
    F: FnOnce(&mut Ctx<'_, f64>) -> Result<Var>,
{
    let mut cx = Ctx::new(store, Mode::Train);
    cx.g = std::mem::replace(g, Graph::new());
    let out = f(&mut cx);
    *g = cx.g;
    out
}

/// Checks a layer w.r.t. its inputs and its parameters (BN in train mode).
pub fn check_layer<L, B, F>(seed: u64, build: B, inputs: &[Tensor<f64>], forward: F) -> Result<GradCheckReport>
where
    B: FnOnce(&mut Init<'_, f64>) -> Result<L>,
    F: Fn(&mut Ctx<'_, f64>, &L, &[Var]) -> Result<Var>,
{
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layer = build(&mut Init::new(&mut store, &mut rng))?;
    let mut report = grad_check_many(
        |g, vars| {
            let y = with_ctx(g, &store, |cx| forward(cx, &layer, vars))?;
            project(g, y)
        },
        inputs,
        EPS,
        DEFAULT_FLOOR,
    )?;
    let params = grad_check_params(
        &store,
        |g, s| {
            let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
            let y = with_ctx(g, s, |cx| forward(cx, &layer, &vars))?;
            project(g, y)
        },
        EPS,
        DEFAULT_FLOOR,
        PER_PARAM,
        &mut rng,
    )?;
    report.merge(params);
    Ok(report)
}

fn rand_input(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::normal(shape, 0.0, 1.0, rng)
}

/// Per-layer checks at small shapes: `(layer name, report)`.
pub fn layer_suite(seed: u64) -> Result<Vec<(String, GradCheckReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let (n, c, hw) = (2, 8, 3);
    let tokens = rand_input(&[n, hw * hw, c], &mut rng);
    let mut out = Vec::new();

    let x = rand_input(&[n, 6, hw, hw], &mut rng);
    out.push((
        "sem".to_string(),
        check_layer(seed, |i| Ok(Sem::new(i, 6, c, hw)), &[x], |cx, l, v| l.forward(cx, v[0]))?,
    ));
    out.push((
        "sam".to_string(),
        check_layer(seed, |i| Ok(Sam::new(i, c, 2)), &[tokens.clone()], |cx, l, v| {
            Ok(l.forward(cx, v[0])?.0)
        })?,
    ));
    for &local in LocalEnhance::ALL {
        out.push((
            format!("cam[{local}]"),
            check_layer(seed, |i| Ok(Cam::new(i, c, local)), &[tokens.clone()], |cx, l, v| {
                Ok(l.forward(cx, v[0], hw, hw)?.0)
            })?,
        ));
    }
    for variant in [FfnVariant::Gated, FfnVariant::Standard] {
        out.push((
            format!("conv_ffn[{variant}]"),
            check_layer(seed, |i| ConvFfn::new(i, c, 2, variant), &[tokens.clone()], |cx, l, v| {
                l.forward(cx, v[0], hw, hw)
            })?,
        ));
    }
    let z1 = rand_input(&[n, c, hw, hw], &mut rng);
    let z2 = rand_input(&[n, c, hw, hw], &mut rng);
    for &method in FusionMethod::ALL {
        let cfg = ModelConfig {
            model_dim: c,
            fusion_method: method,
            ..ModelConfig::default()
        };
        out.push((
            format!("fusion[{method}]"),
            check_layer(seed, |i| Ok(Fusion::new(i, &cfg)), &[z1.clone(), z2.clone()], |cx, l, v| {
                l.forward(cx, v[0], v[1])
            })?,
        ));
    }
    let q = rand_input(&[n, 4, c], &mut rng);
    out.push((
        "decoder_layer".to_string(),
        check_layer(seed, |i| Ok(DecoderLayer::new(i, c, 2, 2)), &[q, tokens], |cx, l, v| {
            Ok(l.forward(cx, v[0], v[1])?.0)
        })?,
    ));

    // cross-entropy on raw logits, with padding in the mask
    let logits = rand_input(&[n, 3, 5], &mut rng);
    let targets: Vec<usize> = (0..n * 3).map(|_| rng.random_range(0..5)).collect();
    let mask = vec![true, true, false, true, true, true];
    out.push((
        "loss".to_string(),
        grad_check_many(|g, v| g.cross_entropy(v[0], &targets, &mask), &[logits], EPS, DEFAULT_FLOOR)?,
    ));
    Ok(out)
}

/// Small full-model configuration: C=16, 2 heads, E=1, D=1, 4×4 features.
pub fn desk_check_config() -> ModelConfig {
    ModelConfig {
        model_dim: 16,
        heads: 2,
        encoder_layers: 1,
        decoder_layers: 1,
        ffn_ratio: 2,
        feature_hw: 4,
        image_size: 16,
        backbone_dim: 16,
        max_len: 8,
        dropout: 0.0,
        ..ModelConfig::default()
    }
}

pub const DESK_VOCAB: usize = 12;

/// Checks the caption loss of the whole model w.r.t. every parameter.
pub fn full_model_check(cfg: &ModelConfig, vocab_size: usize, seed: u64, per_param: usize) -> Result<GradCheckReport> {
    let (model, store) = SatCap::new::<f64>(cfg, vocab_size, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let shape = model.input_shape(2);
    let before = Tensor::uniform(&shape, 0.0, 1.0, &mut rng);
    let after = Tensor::uniform(&shape, 0.0, 1.0, &mut rng);
    let caps: Vec<Vec<usize>> = (0..2)
        .map(|i| (0..3 + i).map(|_| rng.random_range(4..vocab_size)).collect())
        .collect();
    let batch = CaptionBatch::new(&caps, cfg.max_len)?;
    grad_check_params(
        &store,
        |g, s| {
            with_ctx(g, s, |cx| {
                let b = cx.g.constant(before.clone());
                let a = cx.g.constant(after.clone());
                model.loss(cx, b, a, &batch)
            })
        },
        MODEL_EPS,
        DEFAULT_FLOOR,
        per_param,
        &mut rng,
    )
}
