use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Parser, Subcommand};
use serde_json::json;

use satcap::config::{parse_config, ModelConfig, Precision, TrainConfig};
use satcap::container::Container;
use satcap::data::{generate, load_array, load_manifest_with, write_dataset, Dataset, GenConfig, Split};
use satcap::gradsuite::{desk_check_config, full_model_check, layer_suite, DESK_VOCAB, LAYER_TOL, MODEL_TOL};
use satcap::metrics::{read_jsonl, score, write_jsonl};
use satcap::train::{
    ablation_csv, ablation_markdown, caption_records, run_ablation, stratified, AblationAxis, Checkpoint, Stratify,
    Trainer,
};
use satcap::{Scalar, Tensor};

const LAST: &str = "last.satc";
const BEST: &str = "best.satc";

#[derive(Parser)]
#[command(name = "satcap", version, about = "Remote-sensing change captioning at desk scale")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic bi-temporal dataset (PPM images + manifest.json).
    GenData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        pairs: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 0.5)]
        p_change: f64,
        #[arg(long, default_value_t = 0.1)]
        val_fraction: f64,
        #[arg(long, default_value_t = 0.1)]
        test_fraction: f64,
        #[arg(long, default_value_t = 0.02)]
        noise: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; prints one JSON object per epoch.
    Train {
        /// Dataset manifest.
        #[arg(long)]
        data: PathBuf,
        /// key=value config file (model and training keys).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Extra key=value overrides, applied after --config.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Output folder for last.satc and best.satc.
        #[arg(long)]
        out: PathBuf,
        /// Continue from <out>/last.satc.
        #[arg(long)]
        resume: bool,
        /// New total epoch count when resuming.
        #[arg(long)]
        epochs: Option<usize>,
        /// Feature container with `<id>/before` and `<id>/after` arrays of shape C_o×H×W.
        #[arg(long)]
        features_from: Option<PathBuf>,
    },
    /// Score a checkpoint on one split, optionally per change stratum.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        /// all, change_only, nochange_only or each.
        #[arg(long, default_value = "all")]
        stratify: Stratify,
        /// Write hypotheses and references as JSON lines.
        #[arg(long)]
        dump: Option<PathBuf>,
        #[arg(long)]
        features_from: Option<PathBuf>,
    },
    /// Caption one image pair.
    Caption {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        before: PathBuf,
        #[arg(long)]
        after: PathBuf,
        /// Beam width; 1 uses greedy decoding.
        #[arg(long, default_value_t = 1)]
        beam: usize,
        /// Write per-step cross-attention weights as JSON.
        #[arg(long)]
        export_attention: Option<PathBuf>,
    },
    /// Finite-difference gradient checks of every layer.
    GradCheck {
        /// Also check the full model loss.
        #[arg(long)]
        full_model: bool,
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        /// Elements perturbed per parameter in the full-model check.
        #[arg(long, default_value_t = 8)]
        per_param: usize,
    },
    /// Train every variant along one ablation axis and tabulate test scores.
    Ablate {
        #[arg(long)]
        axis: AblationAxis,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Score a JSON-lines file of hypotheses and references.
    Score {
        #[arg(long)]
        hyp_refs: PathBuf,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    match Cli::parse().cmd {
        Cmd::GenData {
            seed,
            pairs,
            size,
            p_change,
            val_fraction,
            test_fraction,
            noise,
            out,
        } => {
            let cfg = GenConfig {
                seed,
                pairs,
                image_size: size,
                p_change,
                val_fraction,
                test_fraction,
                noise,
            };
            let ds = generate(&cfg)?;
            let manifest = write_dataset(&ds, &out)?;
            println!("{}", json!({"manifest": manifest, "pairs": ds.pairs.len()}));
        }
        Cmd::Train {
            data,
            config,
            overrides,
            out,
            resume,
            epochs,
            features_from,
        } => {
            let (model, train) = if resume {
                // configs come from the checkpoint
                let ck = Checkpoint::<f64>::load(&out.join(LAST)).context("loading resume checkpoint")?;
                (ck.1.model_cfg, ck.1.train_cfg)
            } else {
                load_configs(config.as_deref(), &overrides)?
            };
            let (ds, model) = load_data(&data, features_from.as_deref(), model)?;
            match train.precision {
                Precision::F32 => train_cmd::<f32>(&ds, model, train, &out, resume, epochs)?,
                Precision::F64 => train_cmd::<f64>(&ds, model, train, &out, resume, epochs)?,
            }
        }
        Cmd::Eval {
            ckpt,
            data,
            split,
            stratify,
            dump,
            features_from,
        } => {
            let (model, ck) = Checkpoint::<f32>::load(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
            let (ds, _) = load_data(&data, features_from.as_deref(), ck.model_cfg.clone())?;
            let pairs = ds.split(split);
            ensure!(!pairs.is_empty(), "split `{split}` of {} is empty", data.display());
            let records = caption_records(&model, &ck.store, &ck.vocab, &pairs, 32)?;
            if let Some(path) = dump {
                fs::write(&path, write_jsonl(&records)).with_context(|| format!("writing {}", path.display()))?;
            }
            let changed: Vec<bool> = pairs.iter().map(|p| p.changed).collect();
            for r in stratified(&records, &changed, stratify)? {
                println!("{}", r.to_json());
            }
        }
        Cmd::Caption {
            ckpt,
            before,
            after,
            beam,
            export_attention,
        } => {
            let (model, ck) = Checkpoint::<f32>::load(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
            let shape = model.input_shape(1);
            let read = |p: &Path| -> Result<Tensor<f32>> {
                let t = load_array(p).with_context(|| format!("reading {}", p.display()))?;
                ensure!(
                    t.shape() == &shape[1..],
                    "{} has shape {:?}, the model expects {:?}",
                    p.display(),
                    t.shape(),
                    &shape[1..]
                );
                Ok(t.reshape(&shape)?)
            };
            let (b, a) = (read(&before)?, read(&after)?);
            let decoded = model.greedy(&ck.store, &b, &a)?.remove(0);
            let ids = if beam > 1 {
                model.beam(&ck.store, &b, &a, beam)?.remove(0)
            } else {
                decoded.ids.clone()
            };
            let caption = ck.vocab.decode(&ids);
            println!("{}", json!({"caption": caption}));
            if let Some(path) = export_attention {
                let s = decoded.attention.shape().to_vec();
                let hw = model.cfg.feature_hw;
                let steps: Vec<Vec<&[f64]>> = decoded
                    .attention
                    .data()
                    .chunks(s[1] * s[2])
                    .map(|step| step.chunks(s[2]).collect())
                    .collect();
                let mut tokens: Vec<String> = decoded.ids.iter().map(|&i| ck.vocab.token(i).unwrap_or("<unk>").to_string()).collect();
                if tokens.len() < s[0] {
                    tokens.push("<end>".into());
                }
                let doc = json!({
                    "caption": ck.vocab.decode(&decoded.ids),
                    "tokens": tokens,
                    "heads": s[1],
                    "height": hw,
                    "width": hw,
                    "attention": steps,
                });
                fs::write(&path, serde_json::to_string(&doc)?).with_context(|| format!("writing {}", path.display()))?;
            }
        }
        Cmd::GradCheck {
            full_model,
            seeds,
            per_param,
        } => {
            let mut failed = 0;
            for seed in 0..seeds {
                for (name, r) in layer_suite(seed)? {
                    let ok = r.passes(LAYER_TOL);
                    failed += usize::from(!ok);
                    println!(
                        "{}",
                        json!({"seed": seed, "layer": name, "max_rel_err": r.max_rel_err, "checked": r.checked, "pass": ok})
                    );
                }
                if full_model {
                    let r = full_model_check(&desk_check_config(), DESK_VOCAB, seed, per_param)?;
                    let ok = r.passes(MODEL_TOL);
                    failed += usize::from(!ok);
                    let worst = r.worst.as_ref().map(|w| w.input.clone());
                    println!(
                        "{}",
                        json!({"seed": seed, "layer": "full_model", "max_rel_err": r.max_rel_err, "checked": r.checked, "worst": worst, "pass": ok})
                    );
                }
            }
            if failed > 0 {
                bail!("{failed} gradient checks exceeded tolerance");
            }
        }
        Cmd::Ablate {
            axis,
            data,
            out,
            config,
            overrides,
        } => {
            let (model, train) = load_configs(config.as_deref(), &overrides)?;
            let ds = load_manifest_with(&data, None)?;
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let rows = match train.precision {
                Precision::F32 => run_ablation::<f32>(axis, &model, &train, &ds, Some(&out), log_row)?,
                Precision::F64 => run_ablation::<f64>(axis, &model, &train, &ds, Some(&out), log_row)?,
            };
            let md = ablation_markdown(axis, &rows);
            fs::write(out.join(format!("{axis}.md")), &md)?;
            fs::write(out.join(format!("{axis}.csv")), ablation_csv(&rows))?;
            print!("{md}");
        }
        Cmd::Score { hyp_refs } => {
            let text = fs::read_to_string(&hyp_refs).with_context(|| format!("reading {}", hyp_refs.display()))?;
            let report = score(&read_jsonl(&text)?)?;
            println!("{}", report.to_json());
        }
    }
    Ok(())
}

fn log_row(r: &satcap::train::AblationRow) {
    let m = r.report.scaled();
    log::info!("{}: composite {:.2}, CIDEr-D {:.2}", r.label, m.composite, m.cider_d);
}

fn load_configs(path: Option<&Path>, overrides: &[String]) -> Result<(ModelConfig, TrainConfig)> {
    let mut text = match path {
        Some(p) => fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        None => String::new(),
    };
    for o in overrides {
        ensure!(o.contains('='), "override `{o}` is not KEY=VALUE");
        text.push('\n');
        text.push_str(o);
    }
    let (m, t) = parse_config(&text)?;
    m.validate()?;
    t.validate()?;
    Ok((m, t))
}

/// Loads the manifest; with a feature container the backbone is bypassed
/// and the model input follows the stored C_o×H×W arrays.
fn load_data(manifest: &Path, features: Option<&Path>, mut model: ModelConfig) -> Result<(Dataset, ModelConfig)> {
    let container = match features {
        Some(p) => Some(Container::load(p).with_context(|| format!("reading features {}", p.display()))?),
        None => None,
    };
    let ds = load_manifest_with(manifest, container.as_ref())?;
    if container.is_some() {
        let first = ds.pairs.first().context("manifest is empty")?;
        let s = first.before.shape();
        ensure!(s.len() == 3 && s[1] == s[2], "features must be C_o×H×W with H = W, got {s:?}");
        if model.use_backbone || model.backbone_dim != s[0] || model.feature_hw != s[1] {
            log::info!("using precomputed features: backbone_dim={} feature_hw={}", s[0], s[1]);
        }
        model.use_backbone = false;
        model.backbone_dim = s[0];
        model.feature_hw = s[1];
        model.validate()?;
    }
    Ok((ds, model))
}

fn train_cmd<T: Scalar>(
    ds: &Dataset,
    model: ModelConfig,
    train: TrainConfig,
    out: &Path,
    resume: bool,
    epochs: Option<usize>,
) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let train_pairs = ds.split(Split::Train);
    let val_pairs = ds.split(Split::Val);
    ensure!(!train_pairs.is_empty(), "the dataset has no training pairs");
    let mut trainer = if resume {
        let (m, last) = Checkpoint::<T>::load(&out.join(LAST))?;
        let best_path = out.join(BEST);
        let best = if best_path.exists() { Some(Checkpoint::<T>::load(&best_path)?.1) } else { None };
        log::info!("resuming after epoch {}", last.epoch);
        Trainer::from_checkpoint(last, m, best)
    } else {
        Trainer::<T>::for_dataset(&model, &train, &train_pairs)?
    };
    if let Some(e) = epochs {
        trainer.train_cfg.epochs = e;
    }
    log::info!(
        "{} trainable parameters, vocabulary of {} tokens",
        trainer.store.num_trainable(),
        trainer.vocab.len()
    );
    trainer.fit(&train_pairs, &val_pairs, |t, log| {
        println!("{}", serde_json::to_string(log)?);
        t.checkpoint().save(&out.join(LAST))?;
        t.best_checkpoint().save(&out.join(BEST))?;
        Ok(())
    })?;
    Ok(())
}
