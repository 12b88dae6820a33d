//! Command-line front end: `synth`, `pretrain`, `finetune`, `eval`, `attn`.
//!
//! Every command resolves its configuration (file, then `SBSSL_SEED`, then
//! flags), validates it, and writes it as `config.json` beside its outputs.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::attention::{attention_map, default_layer, render_overlay};
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::synth::{generate_synthetic, write_synthetic};
use crate::data::{check_slice_size, load_split, Volume};
use crate::error::{Error, Result};
use crate::finetune::{
    ensemble_predict, evaluate, init_classifier, member_seed, metrics_log_csv, predictions_csv, FinetuneMode, Finetuner,
    Pooling,
};
use crate::metrics::{roc_auc, threshold_metrics};
use crate::model::ModelState;
use crate::pretrain::{loss_log_csv, training_slices, triptych_png, Pretrainer};
use crate::rng::{derive, stream};

#[derive(Debug, Parser)]
#[command(name = "sbssl", version, about = "Self-supervised ViT pretraining and volume classification")]
pub struct Cli {
    /// JSON run configuration; defaults apply to omitted fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed and `SBSSL_SEED`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides `output` (for `synth`, the dataset root).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overrides `data.root`.
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,
    /// Worker threads; results do not depend on this value.
    #[arg(long, global = true, default_value_t = 1)]
    pub workers: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic dataset.
    Synth {
        /// Write into a non-empty directory.
        #[arg(long)]
        force: bool,
    },
    /// Self-supervised reconstruction pretraining.
    Pretrain {
        /// Continue from a pretraining checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Overrides `pretrain.epochs`.
        #[arg(long)]
        epochs: Option<usize>,
        /// Stop after this epoch without changing the schedules.
        #[arg(long)]
        until: Option<usize>,
    },
    /// Train classifiers from a pretrained encoder or from scratch.
    Finetune {
        /// Pretraining checkpoint whose encoder initialises every member.
        #[arg(long, required_unless_present = "scratch", conflicts_with = "scratch")]
        checkpoint: Option<PathBuf>,
        /// Random initialisation instead of a checkpoint.
        #[arg(long)]
        scratch: bool,
        /// Number of ensemble members.
        #[arg(long)]
        ensemble: Option<usize>,
        /// Overrides `finetune.epochs`.
        #[arg(long)]
        epochs: Option<usize>,
        /// Train only the classification head.
        #[arg(long)]
        linear_probe: bool,
    },
    /// Score member checkpoints or an ensemble manifest on a split.
    Eval {
        /// Member checkpoints and/or `ensemble.json` manifests.
        #[arg(required = true)]
        models: Vec<PathBuf>,
        /// Overrides `eval.split`.
        #[arg(long)]
        split: Option<String>,
    },
    /// Class-token attention overlays.
    Attn {
        /// Finetuned member or pretraining checkpoint.
        #[arg(long)]
        model: PathBuf,
        /// Exam id; without it `attn.count` exams are drawn at random.
        #[arg(long)]
        exam: Option<String>,
        /// 0-based slice index.
        #[arg(long, conflicts_with = "mid")]
        slice: Option<usize>,
        /// Use slice floor(f/2) (the default).
        #[arg(long)]
        mid: bool,
        /// 1-based block; defaults to `attn.layer` or the model default.
        #[arg(long)]
        layer: Option<usize>,
    },
}

/// Ensemble manifest written by `finetune`; member paths are relative to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleManifest {
    pub scratch: bool,
    pub checkpoint: Option<PathBuf>,
    pub pooling: Pooling,
    pub members: Vec<MemberEntry>,
    pub ensemble_val_auc: f64,
    pub ensemble_val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberEntry {
    pub file: PathBuf,
    pub seed: u64,
    pub val_auc: f64,
    pub val_accuracy: f64,
}

pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_env()?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(d) = &cli.data {
        cfg.data.root = d.clone();
    }
    if let Some(o) = &cli.out {
        cfg.output = o.clone();
    }
    match &cli.command {
        Command::Pretrain { epochs: Some(e), .. } => cfg.pretrain.epochs = *e,
        Command::Finetune {
            epochs,
            ensemble,
            linear_probe,
            ..
        } => {
            if let Some(e) = epochs {
                cfg.finetune.epochs = *e;
            }
            if let Some(n) = ensemble {
                cfg.finetune.ensemble = *n;
            }
            if *linear_probe {
                cfg.finetune.mode = FinetuneMode::LinearProbe;
            }
        }
        Command::Attn { layer: Some(l), .. } => cfg.attn.layer = Some(*l),
        _ => {}
    }
    // One seed governs every stream, dataset generation included.
    cfg.data.synth.seed = cfg.seed;
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = resolve_config(&cli)?;
    match cli.command {
        Command::Synth { force } => {
            let out = cli.out.clone().unwrap_or_else(|| cfg.data.root.clone());
            cmd_synth(&cfg, &out, force)
        }
        Command::Pretrain { resume, until, .. } => cmd_pretrain(&cfg, resume.as_deref(), until, cli.workers),
        Command::Finetune { checkpoint, .. } => cmd_finetune(&cfg, checkpoint.as_deref(), cli.workers),
        Command::Eval { models, split } => {
            let split = split.unwrap_or_else(|| cfg.eval.split.clone());
            cmd_eval(&cfg, &models, &split)
        }
        Command::Attn { model, exam, slice, .. } => cmd_attn(&cfg, &model, exam.as_deref(), slice),
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Like `Checkpoint::load`, but i/o failures name the file.
fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).map_err(|e| match e {
        crate::checkpoint::CheckpointError::Io(source) => Error::io(path, source),
        other => other.into(),
    })
}

fn load_checked(cfg: &RunConfig, split: &str) -> Result<Vec<Volume>> {
    let volumes = load_split(&cfg.data.root, split, &cfg.data.plane)?;
    check_slice_size(&volumes, cfg.model.image_size)?;
    Ok(volumes)
}

pub fn cmd_synth(cfg: &RunConfig, out: &Path, force: bool) -> Result<()> {
    let non_empty = fs::read_dir(out).map(|mut d| d.next().is_some()).unwrap_or(false);
    if non_empty && !force {
        return Err(Error::Config(format!(
            "{} is not empty; pass --force to write into it",
            out.display()
        )));
    }
    let exams = generate_synthetic(&cfg.data.synth);
    write_synthetic(out, &exams)?;
    let manifest: Vec<serde_json::Value> = exams
        .iter()
        .map(|e| {
            serde_json::json!({
                "exam_id": e.volume.exam_id,
                "split": e.split,
                "label": e.volume.label,
                "slices": e.volume.num_slices(),
                "band": e.band,
            })
        })
        .collect();
    let manifest = serde_json::json!({ "spec": cfg.data.synth, "exams": manifest });
    write(&out.join("manifest.json"), serde_json::to_string_pretty(&manifest).expect("manifest serialises"))?;
    cfg.write_resolved(out)?;
    for split in ["train", "valid"] {
        let n = exams.iter().filter(|e| e.split == split).count();
        let pos = exams.iter().filter(|e| e.split == split && e.volume.label == 1).count();
        println!("{split}: {n} exams, {pos} positive");
    }
    println!("wrote {} exams to {}", exams.len(), out.display());
    Ok(())
}

pub fn cmd_pretrain(cfg: &RunConfig, resume: Option<&Path>, until: Option<usize>, workers: usize) -> Result<()> {
    let train = load_checked(cfg, &cfg.data.train_split)?;
    let slices = training_slices(&train);
    let out = cfg.output.join("pretrain");
    cfg.write_resolved(&out)?;
    let mut trainer = match resume {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            ck.check_architecture(&cfg.model)?;
            if ck.meta.kind != "pretrain" {
                return Err(Error::Config(format!("{} is not a pretraining checkpoint", path.display())));
            }
            Pretrainer::resume(&ck, slices, cfg.pretrain.clone())?
        }
        None => Pretrainer::init(cfg.model.clone(), slices, cfg.pretrain.clone(), cfg.seed)?,
    };
    trainer.workers = workers.max(1);
    let stop = until.unwrap_or(cfg.pretrain.epochs).min(cfg.pretrain.epochs);
    let run_config = cfg.to_value();
    while trainer.epoch < stop {
        let row = trainer.run_epoch()?;
        eprintln!("epoch {:>4}  loss {:.6}  lr {:.3e}  wd {:.4}", row.epoch, row.mean_loss, row.lr, row.wd);
        write(&out.join("loss.csv"), loss_log_csv(&trainer.log))?;
        let e = trainer.epoch;
        if cfg.pretrain.checkpoint_every > 0 && e % cfg.pretrain.checkpoint_every == 0 {
            trainer.checkpoint(run_config.clone()).save(&out.join(format!("checkpoint_epoch{e:04}.bin")))?;
        }
        if cfg.pretrain.preview_every > 0 && e % cfg.pretrain.preview_every == 0 {
            let png = triptych_png(&trainer.preview(4)?).map_err(|e| Error::io(&out, e))?;
            write(&out.join("previews").join(format!("epoch{e:04}.png")), png)?;
        }
    }
    write(&out.join("loss.csv"), loss_log_csv(&trainer.log))?;
    trainer.checkpoint(run_config).save(&out.join("checkpoint.bin"))?;
    println!("pretrained to epoch {}; outputs in {}", trainer.epoch, out.display());
    Ok(())
}

pub fn cmd_finetune(cfg: &RunConfig, checkpoint: Option<&Path>, workers: usize) -> Result<()> {
    let train = load_checked(cfg, &cfg.data.train_split)?;
    let valid = load_checked(cfg, &cfg.data.valid_split)?;
    let pretrained = checkpoint.map(load_checkpoint).transpose()?;
    let out = cfg.output.join(if pretrained.is_some() { "finetune" } else { "finetune_scratch" });
    cfg.write_resolved(&out)?;
    let run_config = cfg.to_value();
    let mut members = Vec::new();
    let mut models = Vec::new();
    for m in 0..cfg.finetune.ensemble {
        let seed = member_seed(cfg.seed, m);
        let state = init_classifier(&cfg.model, pretrained.as_ref(), seed)?;
        let mut t = Finetuner::new(state, &train, &valid, cfg.finetune.clone(), seed)?;
        t.workers = workers.max(1);
        t.run(|_, row| {
            eprintln!(
                "member {m}  epoch {:>4}  loss {:.6}  val acc {:.4}  val auc {:.4}",
                row.epoch, row.train_loss, row.val_accuracy, row.val_auc
            );
            Ok(())
        })?;
        let file = PathBuf::from(format!("member_{m}.bin"));
        t.checkpoint(run_config.clone()).save(&out.join(&file))?;
        write(&out.join(format!("metrics_{m}.csv")), metrics_log_csv(&t.log))?;
        let last = t.log.last().copied();
        members.push(MemberEntry {
            file,
            seed,
            val_auc: last.map_or(f64::NAN, |r| r.val_auc),
            val_accuracy: last.map_or(f64::NAN, |r| r.val_accuracy),
        });
        models.push(t.model);
    }
    let probs = ensemble_predict(&models, &valid, cfg.finetune.pooling)?;
    let (acc, auc) = evaluate(&probs, &valid, cfg.finetune.threshold);
    let manifest = EnsembleManifest {
        scratch: pretrained.is_none(),
        checkpoint: checkpoint.map(Path::to_path_buf),
        pooling: cfg.finetune.pooling,
        members,
        ensemble_val_auc: auc,
        ensemble_val_accuracy: acc,
    };
    write(
        &out.join("ensemble.json"),
        serde_json::to_string_pretty(&manifest).expect("manifest serialises"),
    )?;
    println!(
        "{} member(s); ensemble val accuracy {acc:.4}, AUC {auc:.4}; outputs in {}",
        models.len(),
        out.display()
    );
    Ok(())
}

fn load_classifier(path: &Path) -> Result<ModelState> {
    let model = load_checkpoint(path)?.model()?;
    if model.head.is_none() {
        return Err(Error::Config(format!("{} has no classification head", path.display())));
    }
    Ok(model)
}

/// Expand manifests into member checkpoints; returns the models and the
/// pooling of the last manifest seen, if any.
fn load_members(models: &[PathBuf]) -> Result<(Vec<ModelState>, Option<Pooling>)> {
    let mut out = Vec::new();
    let mut pooling = None;
    for path in models {
        if path.extension().is_some_and(|e| e == "json") {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let manifest: EnsembleManifest = serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: invalid ensemble manifest: {e}", path.display())))?;
            let dir = path.parent().unwrap_or(Path::new("."));
            for m in &manifest.members {
                out.push(load_classifier(&dir.join(&m.file))?);
            }
            pooling = Some(manifest.pooling);
        } else {
            out.push(load_classifier(path)?);
        }
    }
    Ok((out, pooling))
}

pub fn cmd_eval(cfg: &RunConfig, models: &[PathBuf], split: &str) -> Result<()> {
    let (members, pooling) = load_members(models)?;
    for m in &members {
        if !crate::checkpoint::same_architecture(&m.config, &cfg.model) {
            return Err(crate::checkpoint::CheckpointError::Architecture {
                expected: format!("{:?}", cfg.model),
                found: format!("{:?}", m.config),
            }
            .into());
        }
    }
    let volumes = load_checked(cfg, split)?;
    let probs = ensemble_predict(&members, &volumes, pooling.unwrap_or(cfg.finetune.pooling))?;
    let labels: Vec<u8> = volumes.iter().map(|v| v.label).collect();
    let thr = cfg.eval.threshold;
    let t = threshold_metrics(&probs, &labels, thr).map_err(|e| Error::Config(e.to_string()))?;
    let roc = roc_auc(&probs, &labels).map_err(|e| Error::Config(e.to_string()))?;
    let out = cfg.output.join("eval");
    cfg.write_resolved(&out)?;
    let csv = format!(
        "models,split,exams,threshold,accuracy,auc,sensitivity,specificity\n{},{split},{},{thr},{},{},{},{}\n",
        members.len(),
        volumes.len(),
        t.accuracy,
        roc.auc,
        t.sensitivity,
        t.specificity
    );
    write(&out.join("metrics.csv"), csv)?;
    write(&out.join("roc.csv"), roc.to_csv())?;
    write(&out.join("predictions.csv"), predictions_csv(&volumes, &probs))?;
    println!(
        "{split}: {} exams, {} model(s): accuracy {:.4}, AUC {:.4}, sensitivity {:.4}, specificity {:.4}",
        volumes.len(),
        members.len(),
        t.accuracy,
        roc.auc,
        t.sensitivity,
        t.specificity
    );
    Ok(())
}

pub fn cmd_attn(cfg: &RunConfig, model_path: &Path, exam: Option<&str>, slice: Option<usize>) -> Result<()> {
    let ck = load_checkpoint(model_path)?;
    ck.check_architecture(&cfg.model)?;
    let model = ck.model()?;
    let layer = cfg.attn.layer.unwrap_or_else(|| default_layer(&model.config));
    let volumes = load_checked(cfg, &cfg.attn.split)?;
    let chosen: Vec<&Volume> = match exam {
        Some(id) => vec![volumes
            .iter()
            .find(|v| v.exam_id == id)
            .ok_or_else(|| Error::Config(format!("exam {id} not in split {}", cfg.attn.split)))?],
        None => {
            let mut rng = derive(cfg.seed, &[stream::ATTN]);
            let mut idx = rand::seq::index::sample(&mut rng, volumes.len(), cfg.attn.count.min(volumes.len())).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| &volumes[i]).collect()
        }
    };
    let out = cfg.output.join("attn");
    cfg.write_resolved(&out)?;
    for v in chosen {
        let k = slice.unwrap_or_else(|| v.mid_slice());
        if k >= v.num_slices() {
            return Err(Error::Config(format!(
                "slice {k} out of range for exam {} with {} slices",
                v.exam_id,
                v.num_slices()
            )));
        }
        let img = v.slice(k);
        let map = attention_map(&model, &img, layer)?;
        let stem = format!("{}_slice{k}_layer{layer}", v.exam_id);
        let png = out.join(format!("{stem}.png"));
        let pgm = out.join(format!("{stem}.pgm"));
        render_overlay(&map, &img, cfg.attn.alpha, &png, Some(&pgm)).map_err(|e| Error::io(&png, e))?;
        println!("{}: raw attention [{:.4e}, {:.4e}] -> {}", v.exam_id, map.raw_min, map.raw_max, png.display());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> std::result::Result<Cli, clap::Error> {
        Cli::try_parse_from(std::iter::once("sbssl").chain(args.iter().copied()))
    }

    #[test]
    fn finetune_needs_checkpoint_or_scratch() {
        assert!(parse(&["finetune"]).is_err());
        assert!(parse(&["finetune", "--scratch"]).is_ok());
        assert!(parse(&["finetune", "--scratch", "--checkpoint", "x.bin"]).is_err());
    }

    #[test]
    fn flags_override_config() {
        let cli = parse(&["--seed", "9", "finetune", "--scratch", "--ensemble", "2", "--epochs", "3"]).unwrap();
        let cfg = resolve_config(&cli).unwrap();
        assert_eq!((cfg.seed, cfg.finetune.ensemble, cfg.finetune.epochs), (9, 2, 3));
        assert_eq!(cfg.data.synth.seed, 9);
    }

    #[test]
    fn slice_and_mid_conflict() {
        assert!(parse(&["attn", "--model", "m", "--slice", "1", "--mid"]).is_err());
    }
}
