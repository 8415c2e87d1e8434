//! Training loop, checkpoints, evaluation and ablation sweeps.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{parse_model_config, parse_train_config, CaptionPolicy, CosineAxis, FusionMethod, LocalEnhance, ModelConfig, Ordering, TrainConfig};
use crate::container::Container;
use crate::data::{derive_seed, Dataset, SamplePair, Split};
use crate::error::{Error, Result};
use crate::graph::Mode;
use crate::metrics::{score, EvalRecord, MetricReport, ScaledReport};
use crate::model::{CaptionBatch, SatCap};
use crate::nn::Ctx;
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::vocab::Vocab;

/// Stacks per-pair `[..]` arrays into one `[N, ..]` tensor.
pub fn stack<T: Scalar>(pairs: &[&SamplePair], pick: impl Fn(&SamplePair) -> &Tensor<f32>) -> Result<Tensor<T>> {
    let first = pairs
        .first()
        .ok_or_else(|| Error::EmptyInput("cannot stack an empty batch".into()))?;
    let inner = pick(first).shape().to_vec();
    let mut data = Vec::with_capacity(pairs.len() * pick(first).numel());
    for p in pairs {
        let t = pick(p);
        if t.shape() != inner.as_slice() {
            return Err(Error::Load {
                id: p.id.clone(),
                reason: format!("array shape {:?} differs from {:?}", t.shape(), inner),
            });
        }
        data.extend(t.data().iter().map(|&x| T::of(x as f64)));
    }
    let mut shape = vec![pairs.len()];
    shape.extend(inner);
    Tensor::new(&shape, data)
}

fn check_inputs(model: &SatCap, pairs: &[&SamplePair]) -> Result<()> {
    let want = model.input_shape(1);
    for p in pairs {
        if p.before.shape() != &want[1..] || p.after.shape() != &want[1..] {
            return Err(Error::Load {
                id: p.id.clone(),
                reason: format!("arrays {:?} do not match model input {:?}", p.before.shape(), &want[1..]),
            });
        }
    }
    Ok(())
}

// ------------------------------------------------------------------ checkpoints

/// Everything needed to rebuild a model and resume its training.
#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub model_cfg: ModelConfig,
    pub train_cfg: TrainConfig,
    pub vocab: Vocab,
    /// Completed epochs.
    pub epoch: usize,
    /// Best validation composite so far and the epoch that reached it.
    pub best: Option<(usize, f64)>,
    pub store: ParamStore<T>,
    pub adam: Option<Adam<T>>,
}

const PARAM: &str = "param/";
const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";

impl<T: Scalar> Checkpoint<T> {
    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new();
        c.push_text("config.model", &self.model_cfg.to_kv())?;
        c.push_text("config.train", &self.train_cfg.to_kv())?;
        c.push_text("vocab", &self.vocab.to_text())?;
        let (best_epoch, best_score) = match self.best {
            Some((e, s)) => (e as u64 + 1, s),
            None => (0, 0.0),
        };
        let adam_step = self.adam.as_ref().map_or(0, |a| a.step);
        // the per-epoch RNG is derived from (seed, epoch), so these two
        // numbers are the complete generator state
        c.push_u64("meta", &[self.epoch as u64, self.train_cfg.seed, adam_step, best_epoch])?;
        c.push("meta.best", &[1], crate::container::EntryData::F64(vec![best_score]))?;
        for e in self.store.entries() {
            c.push_tensor(&format!("{PARAM}{}", e.name), &e.value)?;
        }
        if let Some(a) = &self.adam {
            for (i, e) in self.store.entries().iter().enumerate() {
                if let (Some(m), Some(v)) = (&a.m[i], &a.v[i]) {
                    c.push_tensor(&format!("{ADAM_M}{}", e.name), m)?;
                    c.push_tensor(&format!("{ADAM_V}{}", e.name), v)?;
                }
            }
        }
        Ok(c)
    }

    /// Rebuilds the model and validates every stored tensor against it.
    pub fn from_container(c: &Container) -> Result<(SatCap, Self)> {
        let model_cfg = parse_model_config(&c.text("config.model")?)?;
        let train_cfg = parse_train_config(&c.text("config.train")?)?;
        let vocab = Vocab::from_text(&c.text("vocab")?)?;
        let meta = c.u64s("meta")?;
        if meta.len() != 4 {
            return Err(Error::Format(format!("meta holds {} values, expected 4", meta.len())));
        }
        let best_score = c.tensor::<f64>("meta.best")?.data()[0];
        let mut store = ParamStore::new();
        let model = SatCap::register(&model_cfg, vocab.len(), &mut store, 0)?;
        let ids: Vec<_> = store.ids().collect();
        for &id in &ids {
            let name = store.entry(id).name.clone();
            let t = c.tensor::<T>(&format!("{PARAM}{name}"))?;
            let expected = store.get(id).shape().to_vec();
            if t.shape() != expected.as_slice() {
                return Err(Error::ShapeConflict {
                    name,
                    expected,
                    found: t.shape().to_vec(),
                });
            }
            store.set(id, t)?;
        }
        let n_params = c.entries.iter().filter(|e| e.name.starts_with(PARAM)).count();
        if n_params != ids.len() {
            return Err(Error::Format(format!(
                "checkpoint has {n_params} parameters, the configured model has {}",
                ids.len()
            )));
        }
        let has_adam = c.entries.iter().any(|e| e.name.starts_with(ADAM_M));
        let adam = if has_adam || meta[2] > 0 {
            let mut a = Adam::new(adam_config(&train_cfg), &store);
            a.step = meta[2];
            for &id in &ids {
                let name = &store.entry(id).name;
                if c.get(&format!("{ADAM_M}{name}")).is_some() {
                    a.m[id.index()] = Some(c.tensor(&format!("{ADAM_M}{name}"))?);
                    a.v[id.index()] = Some(c.tensor(&format!("{ADAM_V}{name}"))?);
                }
            }
            Some(a)
        } else {
            None
        };
        let ck = Checkpoint {
            model_cfg,
            train_cfg,
            vocab,
            epoch: meta[0] as usize,
            best: (meta[3] > 0).then(|| (meta[3] as usize - 1, best_score)),
            store,
            adam,
        };
        Ok((model, ck))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: &Path) -> Result<(SatCap, Self)> {
        Self::from_container(&Container::load(path)?)
    }
}

fn adam_config(t: &TrainConfig) -> AdamConfig {
    AdamConfig {
        lr: t.learning_rate,
        beta1: t.beta1,
        beta2: t.beta2,
        eps: t.adam_eps,
        clip_norm: t.clip_norm,
    }
}

// ------------------------------------------------------------------ training

/// One line of the training log.
#[derive(Clone, Debug, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub val: Option<ScaledReport>,
    pub best_epoch: Option<usize>,
    pub seconds: f64,
}

pub struct Trainer<T: Scalar> {
    pub model: SatCap,
    pub store: ParamStore<T>,
    pub adam: Adam<T>,
    pub vocab: Vocab,
    pub model_cfg: ModelConfig,
    pub train_cfg: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub best: Option<(usize, f64)>,
    pub best_store: Option<ParamStore<T>>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model_cfg: &ModelConfig, train_cfg: &TrainConfig, vocab: Vocab) -> Result<Self> {
        model_cfg.validate()?;
        train_cfg.validate()?;
        let (model, store) = SatCap::new::<T>(model_cfg, vocab.len(), train_cfg.seed)?;
        let adam = Adam::new(adam_config(train_cfg), &store);
        Ok(Trainer {
            model,
            store,
            adam,
            vocab,
            model_cfg: model_cfg.clone(),
            train_cfg: train_cfg.clone(),
            epoch: 0,
            best: None,
            best_store: None,
        })
    }

    /// Vocabulary from the training captions, then a fresh trainer.
    pub fn for_dataset(model_cfg: &ModelConfig, train_cfg: &TrainConfig, train: &[&SamplePair]) -> Result<Self> {
        let vocab = Vocab::build(train.iter().flat_map(|p| p.captions.iter().map(String::as_str)), 1)?;
        Self::new(model_cfg, train_cfg, vocab)
    }

    /// Restores a trainer from a resume checkpoint and the matching best model.
    pub fn from_checkpoint(last: Checkpoint<T>, model: SatCap, best: Option<Checkpoint<T>>) -> Self {
        let adam = last
            .adam
            .unwrap_or_else(|| Adam::new(adam_config(&last.train_cfg), &last.store));
        Trainer {
            model,
            adam,
            vocab: last.vocab,
            model_cfg: last.model_cfg,
            train_cfg: last.train_cfg,
            epoch: last.epoch,
            best: last.best,
            best_store: best.map(|b| b.store),
            store: last.store,
        }
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            model_cfg: self.model_cfg.clone(),
            train_cfg: self.train_cfg.clone(),
            vocab: self.vocab.clone(),
            epoch: self.epoch,
            best: self.best,
            store: self.store.clone(),
            adam: Some(self.adam.clone()),
        }
    }

    /// The selected model: best validation composite, or the latest weights.
    pub fn best_checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            store: self.best_store.clone().unwrap_or_else(|| self.store.clone()),
            adam: None,
            ..self.checkpoint()
        }
    }

    pub fn selected_store(&self) -> &ParamStore<T> {
        self.best_store.as_ref().unwrap_or(&self.store)
    }

    fn target_caption<'p>(&self, p: &'p SamplePair, epoch: usize) -> &'p str {
        match self.train_cfg.caption_policy {
            CaptionPolicy::First => &p.captions[0],
            CaptionPolicy::Cycle => &p.captions[epoch % p.captions.len()],
        }
    }

    /// One optimizer step on a batch; returns the loss and gradient norm.
    pub fn step(&mut self, batch: &[&SamplePair], epoch: usize, dropout_seed: u64) -> Result<(f64, f64)> {
        let before = stack::<T>(batch, |p| &p.before)?;
        let after = stack::<T>(batch, |p| &p.after)?;
        let caps: Vec<Vec<usize>> = batch
            .iter()
            .map(|p| self.vocab.encode(self.target_caption(p, epoch)))
            .collect();
        let cb = CaptionBatch::new(&caps, self.model_cfg.max_len)?;
        let mut cx = Ctx::new(&self.store, Mode::Train).with_dropout(self.model_cfg.dropout, dropout_seed);
        let b = cx.g.constant(before);
        let a = cx.g.constant(after);
        let loss = self.model.loss(&mut cx, b, a, &cb)?;
        let lv = cx.g.value(loss).item().to_f64().unwrap_or(f64::NAN);
        if !lv.is_finite() {
            return Err(Error::Numeric {
                op: "train",
                detail: format!("loss became {lv} at epoch {}", epoch + 1),
            });
        }
        let updates = cx.g.take_buffer_updates();
        let grads = cx.g.backward(loss)?;
        drop(cx);
        for (id, t) in updates {
            self.store.set(id, t)?;
        }
        let norm = self.adam.update(&mut self.store, grads.params())?;
        Ok((lv, norm))
    }

    /// Trains one epoch over `train` in a shuffled order derived from
    /// `(seed, epoch)`. Returns mean loss and mean gradient norm.
    pub fn train_epoch(&mut self, train: &[&SamplePair]) -> Result<(f64, f64)> {
        if train.is_empty() {
            return Err(Error::EmptyInput("training split is empty".into()));
        }
        check_inputs(&self.model, train)?;
        let epoch = self.epoch;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.train_cfg.seed, epoch as u64));
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let (mut loss, mut norm, mut batches) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(self.train_cfg.batch_size) {
            let batch: Vec<&SamplePair> = chunk.iter().map(|&i| train[i]).collect();
            let (l, n) = self.step(&batch, epoch, rng.next_u64())?;
            loss += l;
            norm += n;
            batches += 1;
        }
        self.epoch += 1;
        Ok((loss / batches as f64, norm / batches as f64))
    }

    /// Trains until `train_cfg.epochs` epochs are complete, evaluating on
    /// `val` and keeping the best-composite weights.
    pub fn fit(
        &mut self,
        train: &[&SamplePair],
        val: &[&SamplePair],
        mut on_epoch: impl FnMut(&Self, &EpochLog) -> Result<()>,
    ) -> Result<()> {
        while self.epoch < self.train_cfg.epochs {
            let t0 = Instant::now();
            let (loss, grad_norm) = self.train_epoch(train)?;
            let every = self.train_cfg.eval_every;
            let mut report = None;
            if !val.is_empty() && every > 0 && (self.epoch % every == 0 || self.epoch == self.train_cfg.epochs) {
                let records = caption_records(&self.model, &self.store, &self.vocab, val, self.train_cfg.batch_size.max(16))?;
                let r = score(&records)?;
                if self.best.is_none_or(|(_, b)| r.composite > b) {
                    self.best = Some((self.epoch - 1, r.composite));
                    self.best_store = Some(self.store.clone());
                }
                report = Some(r.scaled());
            }
            let log = EpochLog {
                epoch: self.epoch,
                loss,
                grad_norm,
                val: report,
                best_epoch: self.best.map(|(e, _)| e + 1),
                seconds: t0.elapsed().as_secs_f64(),
            };
            on_epoch(self, &log)?;
        }
        Ok(())
    }

    /// Mean teacher-forced loss over `pairs` in eval mode.
    pub fn eval_loss(&self, pairs: &[&SamplePair]) -> Result<f64> {
        let mut total = 0.0;
        let mut n = 0usize;
        for chunk in pairs.chunks(self.train_cfg.batch_size) {
            let before = stack::<T>(chunk, |p| &p.before)?;
            let after = stack::<T>(chunk, |p| &p.after)?;
            let caps: Vec<Vec<usize>> = chunk.iter().map(|p| self.vocab.encode(&p.captions[0])).collect();
            let cb = CaptionBatch::new(&caps, self.model_cfg.max_len)?;
            let mut cx = Ctx::new(&self.store, Mode::Eval);
            let b = cx.g.constant(before);
            let a = cx.g.constant(after);
            let loss = self.model.loss(&mut cx, b, a, &cb)?;
            total += cx.g.value(loss).item().to_f64().unwrap_or(f64::NAN) * chunk.len() as f64;
            n += chunk.len();
        }
        Ok(total / n.max(1) as f64)
    }
}

// ------------------------------------------------------------------ evaluation

/// Greedy captions for `pairs` in the metrics exchange format.
pub fn caption_records<T: Scalar>(
    model: &SatCap,
    store: &ParamStore<T>,
    vocab: &Vocab,
    pairs: &[&SamplePair],
    batch_size: usize,
) -> Result<Vec<EvalRecord>> {
    check_inputs(model, pairs)?;
    let mut out = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(batch_size.max(1)) {
        let before = stack::<T>(chunk, |p| &p.before)?;
        let after = stack::<T>(chunk, |p| &p.after)?;
        let decoded = model.greedy(store, &before, &after)?;
        for (p, d) in chunk.iter().zip(decoded) {
            out.push(EvalRecord {
                id: p.id.clone(),
                hypothesis: vocab.decode(&d.ids),
                references: p.captions.clone(),
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stratify {
    All,
    ChangeOnly,
    NochangeOnly,
    Each,
}

impl FromStr for Stratify {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Stratify::All),
            "change_only" => Ok(Stratify::ChangeOnly),
            "nochange_only" => Ok(Stratify::NochangeOnly),
            "each" => Ok(Stratify::Each),
            other => Err(Error::Config(format!(
                "unknown stratify `{other}` (expected all, change_only, nochange_only or each)"
            ))),
        }
    }
}

/// Metrics for one stratum; `report` is `None` when the stratum is empty.
#[derive(Clone, Debug, PartialEq)]
pub struct StratumReport {
    pub stratum: &'static str,
    pub pairs: usize,
    pub report: Option<MetricReport>,
}

impl StratumReport {
    pub fn to_json(&self) -> serde_json::Value {
        match &self.report {
            Some(r) => serde_json::json!({"stratum": self.stratum, "pairs": self.pairs, "metrics": r.to_json()}),
            None => serde_json::json!({"stratum": self.stratum, "pairs": 0, "metrics": null, "empty": true}),
        }
    }
}

/// Scores `records` (aligned with `changed`) per requested stratum.
pub fn stratified(records: &[EvalRecord], changed: &[bool], how: Stratify) -> Result<Vec<StratumReport>> {
    if records.len() != changed.len() {
        return Err(Error::Contract("records and change flags differ in length".into()));
    }
    let strata: &[(&'static str, Option<bool>)] = match how {
        Stratify::All => &[("all", None)],
        Stratify::ChangeOnly => &[("change_only", Some(true))],
        Stratify::NochangeOnly => &[("nochange_only", Some(false))],
        Stratify::Each => &[("change_only", Some(true)), ("nochange_only", Some(false)), ("all", None)],
    };
    strata
        .iter()
        .map(|&(name, want)| {
            let sel: Vec<EvalRecord> = records
                .iter()
                .zip(changed)
                .filter(|(_, &c)| want.is_none_or(|w| w == c))
                .map(|(r, _)| r.clone())
                .collect();
            Ok(StratumReport {
                stratum: name,
                pairs: sel.len(),
                report: if sel.is_empty() { None } else { Some(score(&sel)?) },
            })
        })
        .collect()
}

// ------------------------------------------------------------------ ablation

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationAxis {
    CosineAxis,
    FusionMethod,
    Depth,
    LocalEnhance,
    Ordering,
    LayernormSharing,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 6] = [
        AblationAxis::CosineAxis,
        AblationAxis::FusionMethod,
        AblationAxis::Depth,
        AblationAxis::LocalEnhance,
        AblationAxis::Ordering,
        AblationAxis::LayernormSharing,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AblationAxis::CosineAxis => "cosine_axis",
            AblationAxis::FusionMethod => "fusion_method",
            AblationAxis::Depth => "depth",
            AblationAxis::LocalEnhance => "local_enhance",
            AblationAxis::Ordering => "ordering",
            AblationAxis::LayernormSharing => "layernorm_sharing",
        }
    }

    /// Row labels and configurations, in table order.
    pub fn rows(self, base: &ModelConfig) -> Vec<(String, ModelConfig)> {
        let with = |f: &dyn Fn(&mut ModelConfig)| {
            let mut c = base.clone();
            f(&mut c);
            c
        };
        let mut rows: Vec<(&str, ModelConfig)> = Vec::new();
        match self {
            AblationAxis::CosineAxis => {
                for (label, axis) in [
                    ("w/o cosine similarity", CosineAxis::None),
                    ("height", CosineAxis::Height),
                    ("width", CosineAxis::Width),
                    ("height×width", CosineAxis::HeightXWidth),
                    ("height and width", CosineAxis::HeightAndWidth),
                    ("channel", CosineAxis::Channel),
                    ("channel, height×width", CosineAxis::ChannelHw),
                    ("channel, height, and width", CosineAxis::ChannelHW),
                ] {
                    rows.push((label, with(&|c| c.cosine_axis = axis)));
                }
            }
            AblationAxis::FusionMethod => {
                for (label, m) in [
                    ("Sub", FusionMethod::Sub),
                    ("Sum", FusionMethod::Sum),
                    ("Element-wise Product", FusionMethod::Product),
                    ("Concatenate", FusionMethod::Concat),
                ] {
                    rows.push((label, with(&|c| c.fusion_method = m)));
                }
            }
            AblationAxis::Depth => {
                for (label, e, d) in [("1/1", 1, 1), ("2/1", 2, 1), ("3/1", 3, 1), ("3/2", 3, 2), ("3/3", 3, 3)] {
                    rows.push((label, with(&|c| {
                        c.encoder_layers = e;
                        c.decoder_layers = d;
                    })));
                }
            }
            AblationAxis::LocalEnhance => {
                for (label, l) in [
                    ("1×1 Conv", LocalEnhance::Conv1x1),
                    ("3×3 Conv", LocalEnhance::Conv3x3),
                    ("DWConv", LocalEnhance::DwConv),
                ] {
                    rows.push((label, with(&|c| c.cam_local_enhance = l)));
                }
            }
            AblationAxis::Ordering => {
                for (label, o) in [
                    ("SAM", Ordering::SamOnly),
                    ("CAM", Ordering::CamOnly),
                    ("SAM → CAM", Ordering::SamThenCam),
                    ("CAM → SAM", Ordering::CamThenSam),
                    ("SAM + CAM", Ordering::Parallel),
                ] {
                    rows.push((label, with(&|c| c.ordering = o)));
                }
            }
            AblationAxis::LayernormSharing => {
                for (label, o, s) in [
                    ("CAM → SAM (w/o)", Ordering::CamThenSam, false),
                    ("CAM → SAM (w/)", Ordering::CamThenSam, true),
                    ("SAM → CAM (w/o)", Ordering::SamThenCam, false),
                    ("SAM → CAM (w/)", Ordering::SamThenCam, true),
                ] {
                    rows.push((label, with(&|c| {
                        c.ordering = o;
                        c.share_layernorm = s;
                    })));
                }
            }
        }
        rows.into_iter().map(|(l, c)| (l.to_string(), c)).collect()
    }
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationAxis::ALL
            .iter()
            .copied()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| {
                let valid: Vec<&str> = AblationAxis::ALL.iter().map(|a| a.as_str()).collect();
                Error::Config(format!("unknown ablation axis `{s}` (valid: {})", valid.join(", ")))
            })
    }
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub label: String,
    pub config: ModelConfig,
    pub params: usize,
    pub report: MetricReport,
}

/// Trains every row of `axis` with the same seed and scores it on the test
/// split (or the validation split when there is no test split).
pub fn run_ablation<T: Scalar>(
    axis: AblationAxis,
    base: &ModelConfig,
    train_cfg: &TrainConfig,
    data: &Dataset,
    out_dir: Option<&Path>,
    mut on_row: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    let train = data.split(Split::Train);
    let val = data.split(Split::Val);
    let mut held = data.split(Split::Test);
    if held.is_empty() {
        held = val.clone();
    }
    if held.is_empty() {
        return Err(Error::EmptyInput("ablation needs a test or validation split".into()));
    }
    let mut rows = Vec::new();
    for (i, (label, cfg)) in axis.rows(base).into_iter().enumerate() {
        let mut tr = Trainer::<T>::for_dataset(&cfg, train_cfg, &train)?;
        tr.fit(&train, &val, |_, log| {
            log::debug!("{axis} row {label}: epoch {} loss {:.4}", log.epoch, log.loss);
            Ok(())
        })?;
        if let Some(dir) = out_dir {
            tr.best_checkpoint().save(&dir.join(format!("{axis}_{i}.satc")))?;
        }
        let records = caption_records(&tr.model, tr.selected_store(), &tr.vocab, &held, 32)?;
        let row = AblationRow {
            label,
            params: tr.store.num_trainable(),
            config: cfg,
            report: score(&records)?,
        };
        on_row(&row);
        rows.push(row);
    }
    Ok(rows)
}

/// Markdown table with scores ×100.
pub fn ablation_markdown(axis: AblationAxis, rows: &[AblationRow]) -> String {
    let head = if axis == AblationAxis::Depth { "E/D" } else { axis.as_str() };
    let mut s = format!("| {head} | B1 | B2 | B3 | B4 | R | C | S | Param |\n|---|---|---|---|---|---|---|---|---|\n");
    for r in rows {
        let m = r.report.scaled();
        s.push_str(&format!(
            "| {} | {:.2} | {:.2} | {:.2} | {:.2} | {:.2} | {:.2} | {:.2} | {} |\n",
            r.label, m.bleu1, m.bleu2, m.bleu3, m.bleu4, m.rouge_l, m.cider_d, m.composite, r.params
        ));
    }
    s
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("label,bleu1,bleu2,bleu3,bleu4,rouge_l,cider_d,composite,params\n");
    for r in rows {
        let m = r.report.scaled();
        s.push_str(&format!(
            "\"{}\",{},{},{},{},{},{},{},{}\n",
            r.label, m.bleu1, m.bleu2, m.bleu3, m.bleu4, m.rouge_l, m.cider_d, m.composite, r.params
        ));
    }
    s
}
