//! Exam classification: slices are encoded independently, their class tokens
//! pass through a per-slice FC + GeLU, are pooled over the exam, and a linear
//! layer produces two logits.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::data::augment::{AugmentConfig, AugmentParams};
use crate::data::Volume;
use crate::encoder::{class_tokens, embed, encode, linear, ForwardOptions};
use crate::error::{Error, Result};
use crate::metrics::{roc_auc, threshold_metrics};
use crate::model::{EncoderConfig, ModelState};
use crate::optim::{adam_step_where, AdamConfig, AdamState};
use crate::params::BoundParams;
use crate::pretrain::parallel_map;
use crate::rng::{derive, stream};
use crate::schedule::{LrSchedule, WeightDecaySchedule};
use crate::tensor::{Scalar, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Mean,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneMode {
    /// Encoder and head are trained.
    Full,
    /// Only the head is trained.
    LinearProbe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub epochs: usize,
    /// Exams per optimiser step.
    pub batch_size: usize,
    pub lr: LrSchedule,
    pub adam: AdamConfig,
    pub weight_decay: WeightDecaySchedule,
    pub augment: AugmentConfig,
    pub pooling: Pooling,
    pub mode: FinetuneMode,
    pub oversample: bool,
    pub ensemble: usize,
    pub threshold: Scalar,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 8,
            lr: LrSchedule::default(),
            adam: AdamConfig::default(),
            weight_decay: WeightDecaySchedule::default(),
            augment: AugmentConfig::default(),
            pooling: Pooling::Mean,
            mode: FinetuneMode::Full,
            oversample: true,
            ensemble: 5,
            threshold: 0.5,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.batch_size == 0 {
            return Err("finetune batch_size must be positive".into());
        }
        if self.ensemble == 0 {
            return Err("ensemble size must be positive".into());
        }
        self.lr.validate()?;
        self.augment.validate()
    }
}

/// Class tokens `[f, K]` of a `[f, H, W]` (or `[f, C, H, W]`) slice stack.
pub fn encode_volume(
    tape: &mut Tape,
    state: &ModelState,
    bound: &BoundParams,
    slices: &Tensor,
    opts: &mut ForwardOptions<'_>,
) -> std::result::Result<Var, TensorError> {
    let cfg = &state.config;
    let f = slices.shape().first().copied().unwrap_or(0);
    if f == 0 || slices.numel() == 0 {
        return Err(TensorError::Invalid {
            op: "encode_volume",
            msg: "volume has no slices".into(),
        });
    }
    let images = tape.constant(slices.clone().reshape(&[f, cfg.channels, cfg.image_size, cfg.image_size])?);
    let seq = embed(tape, images, state, bound)?;
    let outputs = encode(tape, seq, state, bound, opts)?;
    class_tokens(tape, &outputs, state, bound)
}

/// Logits `[V, 2]` for `V` exams whose class tokens are stacked in `features`
/// (`lengths[v]` consecutive rows per exam).
pub fn classify(
    tape: &mut Tape,
    state: &ModelState,
    bound: &BoundParams,
    features: Var,
    lengths: &[usize],
    pooling: Pooling,
) -> std::result::Result<Var, TensorError> {
    let head = state.head.as_ref().ok_or_else(|| TensorError::Invalid {
        op: "classify",
        msg: "model has no classification head".into(),
    })?;
    let h = linear(tape, features, &head.fc, bound)?;
    let h = tape.gelu(h);
    let pooled = match pooling {
        Pooling::Mean => tape.segment_mean(h, lengths)?,
        Pooling::Max => tape.segment_max(h, lengths)?,
    };
    linear(tape, pooled, &head.out, bound)
}

/// Positive-class probability of a 2-logit row.
pub fn positive_probability(logits: &[Scalar]) -> Scalar {
    1.0 / (1.0 + (logits[0] - logits[1]).exp())
}

/// Minority indices drawn uniformly with replacement until both classes have
/// the majority count; every original index appears at least once and every
/// majority index exactly once. Output is sorted.
pub fn oversample_indices<R: Rng + ?Sized>(labels: &[u8], rng: &mut R) -> std::result::Result<Vec<usize>, String> {
    let pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] != 0).collect();
    let neg: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 0).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(format!(
            "oversampling needs both classes ({} positive, {} negative)",
            pos.len(),
            neg.len()
        ));
    }
    let (minority, majority) = if pos.len() < neg.len() { (&pos, &neg) } else { (&neg, &pos) };
    let mut out: Vec<usize> = (0..labels.len()).collect();
    for _ in minority.len()..majority.len() {
        out.push(minority[rng.gen_range(0..minority.len())]);
    }
    out.sort_unstable();
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinetuneRow {
    pub epoch: usize,
    pub train_loss: Scalar,
    /// Validation accuracy at the configured threshold; NaN without a
    /// validation split.
    pub val_accuracy: Scalar,
    /// NaN when the validation split lacks one of the classes.
    pub val_auc: Scalar,
    pub lr: Scalar,
    pub wd: Scalar,
}

pub fn metrics_log_csv(rows: &[FinetuneRow]) -> String {
    let mut out = String::from("epoch,train_loss,val_accuracy,val_auc,lr,wd\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.epoch, r.train_loss, r.val_accuracy, r.val_auc, r.lr, r.wd
        ));
    }
    out
}

/// Seed of ensemble member `m`; member 0 uses the run seed itself.
pub fn member_seed(seed: u64, m: usize) -> u64 {
    if m == 0 {
        seed
    } else {
        derive(seed, &[stream::ENSEMBLE, m as u64]).gen()
    }
}

/// Model with a fresh head, its encoder copied from `pretrained` when given.
pub fn init_classifier(config: &EncoderConfig, pretrained: Option<&Checkpoint>, seed: u64) -> Result<ModelState> {
    config.validate().map_err(Error::Config)?;
    let mut model = ModelState::new(config.clone(), false, true, &mut derive(seed, &[stream::INIT]));
    if let Some(ck) = pretrained {
        ck.check_architecture(config)?;
        let copied = model.load_matching(&ck.params);
        let expected = model.params.iter().filter(|p| p.name.starts_with("encoder.")).count();
        if copied < expected {
            return Err(Error::Config(format!(
                "checkpoint supplies {copied} of {expected} encoder tensors"
            )));
        }
    }
    Ok(model)
}

/// Positive-class probabilities for `volumes`, evaluated without
/// augmentation in chunks of `chunk` exams.
pub fn predict(model: &ModelState, volumes: &[Volume], pooling: Pooling, chunk: usize) -> Result<Vec<Scalar>> {
    let mut out = Vec::with_capacity(volumes.len());
    for part in volumes.chunks(chunk.max(1)) {
        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape, false);
        let stacked = stack_slices(part.iter().map(|v| v.slices.clone()).collect())?;
        let lengths: Vec<usize> = part.iter().map(|v| v.num_slices()).collect();
        let feats = encode_volume(&mut tape, model, &bound, &stacked, &mut ForwardOptions::default())?;
        let logits = classify(&mut tape, model, &bound, feats, &lengths, pooling)?;
        out.extend(tape.value(logits).data().chunks(2).map(positive_probability));
    }
    Ok(out)
}

fn stack_slices(volumes: Vec<Tensor>) -> std::result::Result<Tensor, TensorError> {
    let mut shape = volumes.first().map(|t| t.shape().to_vec()).unwrap_or_default();
    let mut data = Vec::new();
    let mut f = 0;
    for v in volumes {
        if v.shape()[1..] != shape[1..] {
            return Err(TensorError::ShapeMismatch {
                op: "stack_slices",
                lhs: shape,
                rhs: v.shape().to_vec(),
            });
        }
        f += v.shape()[0];
        data.extend(v.into_data());
    }
    shape[0] = f;
    Tensor::new(shape, data)
}

/// Accuracy and AUC of `probs` on `volumes`; AUC is NaN for single-class sets.
pub fn evaluate(probs: &[Scalar], volumes: &[Volume], threshold: Scalar) -> (Scalar, Scalar) {
    if volumes.is_empty() {
        return (Scalar::NAN, Scalar::NAN);
    }
    let labels: Vec<u8> = volumes.iter().map(|v| v.label).collect();
    let acc = threshold_metrics(probs, &labels, threshold).map_or(Scalar::NAN, |m| m.accuracy);
    let auc = roc_auc(probs, &labels).map_or(Scalar::NAN, |r| r.auc);
    (acc, auc)
}

fn trainable(mode: FinetuneMode, name: &str) -> bool {
    match mode {
        FinetuneMode::Full => true,
        FinetuneMode::LinearProbe => name.starts_with("head."),
    }
}

pub struct Finetuner<'d> {
    pub model: ModelState,
    pub adam: AdamState,
    pub config: FinetuneConfig,
    pub seed: u64,
    pub epoch: usize,
    pub log: Vec<FinetuneRow>,
    pub workers: usize,
    train: &'d [Volume],
    valid: &'d [Volume],
}

impl<'d> Finetuner<'d> {
    pub fn new(model: ModelState, train: &'d [Volume], valid: &'d [Volume], config: FinetuneConfig, seed: u64) -> Result<Self> {
        config.validate().map_err(Error::Config)?;
        if train.is_empty() {
            return Err(Error::Config("finetuning dataset is empty".into()));
        }
        if model.head.is_none() {
            return Err(Error::Config("finetuning requires a classification head".into()));
        }
        let size = model.config.image_size;
        crate::data::check_slice_size(train, size)?;
        crate::data::check_slice_size(valid, size)?;
        if config.oversample {
            let labels: Vec<u8> = train.iter().map(|v| v.label).collect();
            oversample_indices(&labels, &mut derive(0, &[])).map_err(Error::Config)?;
        }
        Ok(Self {
            adam: AdamState::new(&model.params),
            model,
            config,
            seed,
            epoch: 0,
            log: Vec::new(),
            workers: 1,
            train,
            valid,
        })
    }

    fn augmented(&self, epoch: usize, position: usize, index: usize) -> Tensor {
        let v = &self.train[index];
        let mut rng = derive(self.seed, &[stream::SAMPLE, epoch as u64, position as u64]);
        let params = AugmentParams::sample(&self.config.augment, v.height(), &mut rng);
        let slices: Vec<Tensor> = (0..v.num_slices()).map(|i| params.apply(&v.slice(i))).collect();
        Tensor::stack(&slices).expect("uniform slice shapes")
    }

    pub fn run_epoch(&mut self) -> Result<FinetuneRow> {
        let epoch = self.epoch;
        let total = self.config.epochs;
        let lr = self.config.lr.at(epoch, total);
        let wd = self.config.weight_decay.at(epoch, total);
        let mut order = if self.config.oversample {
            let labels: Vec<u8> = self.train.iter().map(|v| v.label).collect();
            oversample_indices(&labels, &mut derive(self.seed, &[stream::OVERSAMPLE, epoch as u64])).map_err(Error::Config)?
        } else {
            (0..self.train.len()).collect()
        };
        order.shuffle(&mut derive(self.seed, &[stream::SHUFFLE, epoch as u64]));

        let mut weighted = 0.0;
        let positions: Vec<(usize, usize)> = order.iter().copied().enumerate().collect();
        for (b, chunk) in positions.chunks(self.config.batch_size).enumerate() {
            let stacks = parallel_map(chunk, self.workers, |&(pos, idx)| self.augmented(epoch, pos, idx));
            let lengths: Vec<usize> = stacks.iter().map(|s| s.shape()[0]).collect();
            let labels: Vec<usize> = chunk.iter().map(|&(_, i)| self.train[i].label as usize).collect();
            let stacked = stack_slices(stacks)?;

            let mut tape = Tape::new();
            let mode = self.config.mode;
            let bound = self
                .model
                .params
                .bind_with(&mut tape, |p| trainable(mode, &p.name));
            let mut dropout = derive(self.seed, &[stream::DROPOUT, epoch as u64, b as u64]);
            let mut opts = ForwardOptions {
                record_attention: false,
                dropout_rng: Some(&mut dropout),
            };
            let feats = encode_volume(&mut tape, &self.model, &bound, &stacked, &mut opts)?;
            let logits = classify(&mut tape, &self.model, &bound, feats, &lengths, self.config.pooling)?;
            let loss = tape.cross_entropy(logits, &labels)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch: epoch + 1,
                    batch: b,
                    value,
                });
            }
            tape.backward(loss)?;
            let grads = bound.grads(&tape);
            adam_step_where(&mut self.model.params, &grads, &mut self.adam, &self.config.adam, lr, wd, |p| {
                trainable(mode, &p.name)
            })?;
            weighted += value * chunk.len() as Scalar;
        }
        let probs = predict(&self.model, self.valid, self.config.pooling, 16)?;
        let (val_accuracy, val_auc) = evaluate(&probs, self.valid, self.config.threshold);
        let row = FinetuneRow {
            epoch: epoch + 1,
            train_loss: weighted / order.len() as Scalar,
            val_accuracy,
            val_auc,
            lr,
            wd,
        };
        self.log.push(row);
        self.epoch += 1;
        Ok(row)
    }

    pub fn run(&mut self, mut after: impl FnMut(&Self, &FinetuneRow) -> Result<()>) -> Result<()> {
        while self.epoch < self.config.epochs {
            let row = self.run_epoch()?;
            after(self, &row)?;
        }
        Ok(())
    }

    pub fn checkpoint(&self, run_config: serde_json::Value) -> Checkpoint {
        Checkpoint::new(
            "finetune",
            self.epoch,
            self.seed,
            &self.model,
            None,
            run_config,
            serde_json::to_value(&self.log).expect("log serialises"),
        )
    }
}

/// Finetune one model from `pretrained` (or from scratch).
pub fn finetune(
    train: &[Volume],
    valid: &[Volume],
    model: &EncoderConfig,
    pretrained: Option<&Checkpoint>,
    config: &FinetuneConfig,
    seed: u64,
) -> Result<(ModelState, Vec<FinetuneRow>)> {
    let state = init_classifier(model, pretrained, seed)?;
    let mut t = Finetuner::new(state, train, valid, config.clone(), seed)?;
    t.run(|_, _| Ok(()))?;
    Ok((t.model, t.log))
}

/// Mean of member positive-class probabilities.
pub fn ensemble_mean(member_probs: &[Scalar]) -> Result<Scalar> {
    if member_probs.is_empty() {
        return Err(Error::Config("ensemble is empty".into()));
    }
    Ok(member_probs.iter().sum::<Scalar>() / member_probs.len() as Scalar)
}

/// Ensemble probability for every volume.
pub fn ensemble_predict(members: &[ModelState], volumes: &[Volume], pooling: Pooling) -> Result<Vec<Scalar>> {
    if members.is_empty() {
        return Err(Error::Config("ensemble is empty".into()));
    }
    let per_member = members
        .iter()
        .map(|m| predict(m, volumes, pooling, 16))
        .collect::<Result<Vec<_>>>()?;
    (0..volumes.len())
        .map(|i| ensemble_mean(&per_member.iter().map(|p| p[i]).collect::<Vec<_>>()))
        .collect()
}

pub fn predictions_csv(volumes: &[Volume], probs: &[Scalar]) -> String {
    let mut out = String::from("exam_id,probability,label\n");
    for (v, p) in volumes.iter().zip(probs) {
        out.push_str(&format!("{},{},{}\n", v.exam_id, p, v.label));
    }
    out
}
