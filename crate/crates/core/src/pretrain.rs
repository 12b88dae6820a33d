//! Masked-reconstruction pretraining: a light decoder over the sum of selected
//! intermediate block outputs, a masked ℓ1 objective and the training loop.

use rand::seq::SliceRandom;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::corruption::{apply_corruption, sample_mask, CorruptionMask, CorruptionSpec};
use crate::data::augment::{AugmentConfig, AugmentParams};
use crate::data::Volume;
use crate::encoder::{embed, encode, linear, BlockOutputs, ForwardOptions};
use crate::error::{Error, Result};
use crate::imageio;
use crate::model::{EncoderConfig, ModelState};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::params::BoundParams;
use crate::patch_embed::PatchGeometry;
use crate::rng::{derive, stream};
use crate::schedule::{LrSchedule, WeightDecaySchedule};
use crate::tensor::{Scalar, Tensor, TensorError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    /// 1-indexed blocks whose outputs are summed for decoding; `None` selects
    /// the rounded fractions {L/2, 2L/3, 5L/6, L}.
    pub skip_blocks: Option<Vec<usize>>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: LrSchedule,
    pub adam: AdamConfig,
    pub weight_decay: WeightDecaySchedule,
    pub corruption: CorruptionSpec,
    pub augment: AugmentConfig,
    /// Write a checkpoint every k epochs (0: final only).
    pub checkpoint_every: usize,
    /// Export a reconstruction preview every k epochs (0: never).
    pub preview_every: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            skip_blocks: None,
            epochs: 100,
            batch_size: 64,
            lr: LrSchedule::default(),
            adam: AdamConfig::default(),
            weight_decay: WeightDecaySchedule::default(),
            corruption: CorruptionSpec::default(),
            augment: AugmentConfig::default(),
            checkpoint_every: 0,
            preview_every: 0,
        }
    }
}

impl PretrainConfig {
    pub fn resolved_skip_blocks(&self, model: &EncoderConfig) -> Vec<usize> {
        self.skip_blocks.clone().unwrap_or_else(|| model.default_skip_blocks())
    }

    pub fn validate(&self, model: &EncoderConfig) -> std::result::Result<(), String> {
        validate_skip_blocks(&self.resolved_skip_blocks(model), model.depth)?;
        if self.batch_size == 0 {
            return Err("batch_size must be positive".into());
        }
        self.lr.validate()?;
        self.corruption.validate()?;
        self.augment.validate()
    }
}

pub fn validate_skip_blocks(skip: &[usize], depth: usize) -> std::result::Result<(), String> {
    if skip.is_empty() {
        return Err("skip block set is empty".into());
    }
    if let Some(&b) = skip.iter().find(|&&b| b == 0 || b > depth) {
        return Err(format!("skip block {b} outside 1..={depth}"));
    }
    Ok(())
}

/// Reconstruct `[S, C, H, W]` images from `Σ_{i∈skip} E_i`, using patch tokens
/// only (the class token is dropped before decoding).
pub fn decode(
    tape: &mut Tape,
    outputs: &BlockOutputs,
    skip: &[usize],
    state: &ModelState,
    bound: &BoundParams,
) -> std::result::Result<Var, TensorError> {
    let cfg = &state.config;
    validate_skip_blocks(skip, outputs.blocks.len()).map_err(|msg| TensorError::Invalid { op: "decode", msg })?;
    let dec = state.decoder.as_ref().ok_or_else(|| TensorError::Invalid {
        op: "decode",
        msg: "model has no decoder".into(),
    })?;
    let mut sum = outputs.blocks[skip[0] - 1];
    for &b in &skip[1..] {
        sum = tape.add(sum, outputs.blocks[b - 1])?;
    }
    let (s, t, k) = {
        let sh = tape.shape(sum);
        (sh[0], sh[1], sh[2])
    };
    let n = t - 1;
    let idx: Vec<usize> = (0..s)
        .flat_map(|si| (si * t * k + k)..((si + 1) * t * k))
        .collect();
    let patches = tape.gather(sum, idx, &[s * n, k])?;
    let h = linear(tape, patches, &dec.pointwise1, bound)?;
    let h = tape.gelu(h);
    let h = linear(tape, h, &dec.pointwise2, bound)?;
    let pix = tape.matmul(h, bound.var(dec.deconv_weight))?;

    let geom = PatchGeometry::new(cfg.image_size, cfg.patch_size, cfg.channels)?;
    let (c, hw) = (cfg.channels, cfg.image_size);
    let images = tape.gather(pix, geom.unpatch_index(s), &[s, c, hw, hw])?;
    let bias_idx: Vec<usize> = (0..c).flat_map(|ch| std::iter::repeat(ch).take(hw * hw)).collect();
    let bias = tape.gather(bound.var(dec.deconv_bias), bias_idx, &[c, hw, hw])?;
    tape.add_broadcast(images, bias)
}

/// `Σ M·|x − x̄| / max(ΣM, 1)`. `x` and `mask` are treated as constants.
pub fn masked_l1_loss(tape: &mut Tape, x: Var, recon: Var, mask: Var) -> std::result::Result<Var, TensorError> {
    let diff = tape.sub(recon, x)?;
    let abs = tape.abs(diff);
    let masked = tape.mul(abs, mask)?;
    let total = tape.sum(masked);
    let count: Scalar = tape.value(mask).data().iter().sum();
    Ok(tape.scale(total, 1.0 / count.max(1.0)))
}

/// One augmented, corrupted training slice.
#[derive(Debug, Clone, PartialEq)]
pub struct CorruptedSample {
    pub original: Tensor,
    pub corrupted: Tensor,
    pub mask: CorruptionMask,
}

/// Augment a `[H, W]` slice, then sample and apply a corruption mask.
pub fn prepare_sample<R: RngCore + ?Sized>(
    slice: &Tensor,
    config: &PretrainConfig,
    model: &EncoderConfig,
    rng: &mut R,
) -> std::result::Result<CorruptedSample, TensorError> {
    let size = model.image_size;
    let augmented = AugmentParams::sample(&config.augment, size, rng).apply(slice);
    let grid = model.grid();
    let mask = sample_mask(grid, grid, model.patch_size, &config.corruption, rng);
    let corrupted = apply_corruption(&augmented, &mask, config.corruption.mode, rng)?;
    Ok(CorruptedSample {
        original: augmented,
        corrupted,
        mask,
    })
}

/// Stacked `[S, C, H, W]` inputs, targets and pixel masks of a batch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: Tensor,
    pub targets: Tensor,
    pub masks: Tensor,
}

impl Batch {
    pub fn from_samples(samples: &[CorruptedSample]) -> std::result::Result<Self, TensorError> {
        let with_channel = |t: &Tensor| {
            let mut shape = vec![1];
            shape.extend_from_slice(t.shape());
            t.clone().reshape(&shape)
        };
        let collect = |f: &dyn Fn(&CorruptedSample) -> Tensor| -> std::result::Result<Tensor, TensorError> {
            let items = samples.iter().map(|s| with_channel(&f(s))).collect::<std::result::Result<Vec<_>, _>>()?;
            Tensor::stack(&items)
        };
        Ok(Self {
            inputs: collect(&|s| s.corrupted.clone())?,
            targets: collect(&|s| s.original.clone())?,
            masks: collect(&|s| s.mask.pixel_mask())?,
        })
    }
}

/// Record the full forward pass for a batch; returns `(loss, reconstruction)`.
pub fn reconstruction_loss(
    tape: &mut Tape,
    state: &ModelState,
    bound: &BoundParams,
    batch: &Batch,
    skip: &[usize],
    opts: &mut ForwardOptions<'_>,
) -> std::result::Result<(Var, Var), TensorError> {
    let inputs = tape.constant(batch.inputs.clone());
    let targets = tape.constant(batch.targets.clone());
    let masks = tape.constant(batch.masks.clone());
    let seq = embed(tape, inputs, state, bound)?;
    let outputs = encode(tape, seq, state, bound, opts)?;
    let recon = decode(tape, &outputs, skip, state, bound)?;
    let loss = masked_l1_loss(tape, targets, recon, masks)?;
    Ok((loss, recon))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub epoch: usize,
    pub mean_loss: Scalar,
    pub wd: Scalar,
    pub lr: Scalar,
}

pub fn loss_log_csv(rows: &[LossRow]) -> String {
    let mut out = String::from("epoch,mean_loss,wd,lr\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.epoch, r.mean_loss, r.wd, r.lr));
    }
    out
}

/// Every slice of every volume, in volume order.
pub fn training_slices(volumes: &[Volume]) -> Vec<Tensor> {
    volumes
        .iter()
        .flat_map(|v| (0..v.num_slices()).map(|i| v.slice(i)))
        .collect()
}

/// Run `f` over `items` on up to `workers` threads, preserving order.
pub(crate) fn parallel_map<T: Sync, U: Send>(items: &[T], workers: usize, f: impl Fn(&T) -> U + Sync) -> Vec<U> {
    if workers <= 1 || items.len() <= 1 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    std::thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| scope.spawn(|| part.iter().map(&f).collect::<Vec<U>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}

/// Training state for masked-reconstruction pretraining. Every random draw is
/// keyed by (seed, epoch, sample), so runs are reproducible regardless of the
/// worker count and a resumed run matches an uninterrupted one.
pub struct Pretrainer {
    pub model: ModelState,
    pub adam: AdamState,
    pub config: PretrainConfig,
    pub seed: u64,
    /// Completed epochs.
    pub epoch: usize,
    pub log: Vec<LossRow>,
    pub workers: usize,
    slices: Vec<Tensor>,
    skip: Vec<usize>,
}

impl Pretrainer {
    pub fn new(model: ModelState, slices: Vec<Tensor>, config: PretrainConfig, seed: u64) -> Result<Self> {
        if slices.is_empty() {
            return Err(Error::Config("pretraining dataset is empty".into()));
        }
        config.validate(&model.config).map_err(Error::Config)?;
        if model.decoder.is_none() {
            return Err(Error::Config("pretraining requires a model with a decoder".into()));
        }
        let size = model.config.image_size;
        if let Some(bad) = slices.iter().find(|s| s.shape() != [size, size]) {
            return Err(Error::Config(format!(
                "slice shape {:?} does not match model input {size}×{size}",
                bad.shape()
            )));
        }
        let skip = config.resolved_skip_blocks(&model.config);
        Ok(Self {
            adam: AdamState::new(&model.params),
            model,
            config,
            seed,
            epoch: 0,
            log: Vec::new(),
            workers: 1,
            slices,
            skip,
        })
    }

    /// Fresh model initialised from the run seed.
    pub fn init(model: EncoderConfig, slices: Vec<Tensor>, config: PretrainConfig, seed: u64) -> Result<Self> {
        model.validate().map_err(Error::Config)?;
        let state = ModelState::new(model, true, false, &mut derive(seed, &[stream::INIT]));
        Self::new(state, slices, config, seed)
    }

    /// Continue from a pretraining checkpoint.
    pub fn resume(ck: &Checkpoint, slices: Vec<Tensor>, config: PretrainConfig) -> Result<Self> {
        let model = ck.model()?;
        let mut t = Self::new(model, slices, config, ck.meta.seed)?;
        if let Some(adam) = &ck.adam {
            t.adam = adam.clone();
        }
        t.epoch = ck.meta.epoch;
        t.log = serde_json::from_value(ck.meta.log.clone())
            .map_err(|e| Error::Config(format!("checkpoint loss log unreadable: {e}")))?;
        Ok(t)
    }

    pub fn skip_blocks(&self) -> &[usize] {
        &self.skip
    }

    pub fn checkpoint(&self, run_config: serde_json::Value) -> Checkpoint {
        Checkpoint::new(
            "pretrain",
            self.epoch,
            self.seed,
            &self.model,
            Some(&self.adam),
            run_config,
            serde_json::to_value(&self.log).expect("log serialises"),
        )
    }

    fn sample(&self, epoch: usize, index: usize) -> std::result::Result<CorruptedSample, TensorError> {
        let mut rng = derive(self.seed, &[stream::SAMPLE, epoch as u64, index as u64]);
        prepare_sample(&self.slices[index], &self.config, &self.model.config, &mut rng)
    }

    /// Train one epoch and append its log row.
    pub fn run_epoch(&mut self) -> Result<LossRow> {
        let epoch = self.epoch;
        let total = self.config.epochs;
        let lr = self.config.lr.at(epoch, total);
        let wd = self.config.weight_decay.at(epoch, total);
        let mut order: Vec<usize> = (0..self.slices.len()).collect();
        order.shuffle(&mut derive(self.seed, &[stream::SHUFFLE, epoch as u64]));

        let mut weighted = 0.0;
        for (b, chunk) in order.chunks(self.config.batch_size).enumerate() {
            let samples = parallel_map(chunk, self.workers, |&i| self.sample(epoch, i))
                .into_iter()
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let batch = Batch::from_samples(&samples)?;
            let mut tape = Tape::new();
            let bound = self.model.params.bind(&mut tape, true);
            let mut dropout = derive(self.seed, &[stream::DROPOUT, epoch as u64, b as u64]);
            let mut opts = ForwardOptions {
                record_attention: false,
                dropout_rng: Some(&mut dropout),
            };
            let (loss, _) = reconstruction_loss(&mut tape, &self.model, &bound, &batch, &self.skip, &mut opts)?;
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
            adam_step(&mut self.model.params, &grads, &mut self.adam, &self.config.adam, lr, wd)?;
            weighted += value * chunk.len() as Scalar;
        }
        let row = LossRow {
            epoch: epoch + 1,
            mean_loss: weighted / self.slices.len() as Scalar,
            wd,
            lr,
        };
        self.log.push(row);
        self.epoch += 1;
        Ok(row)
    }

    /// Train until `config.epochs` epochs have completed, calling `after`
    /// with each new row.
    pub fn run(&mut self, mut after: impl FnMut(&Self, &LossRow) -> Result<()>) -> Result<()> {
        while self.epoch < self.config.epochs {
            let row = self.run_epoch()?;
            after(self, &row)?;
        }
        Ok(())
    }

    /// Original, corrupted and reconstructed versions of the first `count`
    /// training slices under the corruption draws of the current epoch.
    pub fn preview(&self, count: usize) -> Result<Vec<[Tensor; 3]>> {
        let count = count.min(self.slices.len());
        let samples = (0..count)
            .map(|i| {
                let mut rng = derive(self.seed, &[stream::PREVIEW, self.epoch as u64, i as u64]);
                prepare_sample(&self.slices[i], &self.config, &self.model.config, &mut rng)
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let batch = Batch::from_samples(&samples)?;
        let mut tape = Tape::new();
        let bound = self.model.params.bind(&mut tape, false);
        let (_, recon) = reconstruction_loss(
            &mut tape,
            &self.model,
            &bound,
            &batch,
            &self.skip,
            &mut ForwardOptions::default(),
        )?;
        let size = self.model.config.image_size;
        let recon = tape.value(recon);
        Ok(samples
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let r = recon.index_outer(i).index_outer(0);
                let r = Tensor::new(vec![size, size], r.data().iter().map(|x| x.clamp(0.0, 1.0)).collect())
                    .expect("slice shape");
                [s.original.clone(), s.corrupted.clone(), r]
            })
            .collect())
    }
}

/// Grayscale PNG with one column per sample and rows original, corrupted,
/// reconstructed.
pub fn triptych_png(items: &[[Tensor; 3]]) -> std::io::Result<Vec<u8>> {
    let Some(first) = items.first() else {
        return imageio::encode_png_gray(1, 1, &[0]);
    };
    let (h, w) = (first[0].shape()[0], first[0].shape()[1]);
    let width = w * items.len();
    let mut pixels = vec![0u8; width * 3 * h];
    for (col, item) in items.iter().enumerate() {
        for (row, img) in item.iter().enumerate() {
            for y in 0..h {
                for x in 0..w {
                    pixels[(row * h + y) * width + col * w + x] = imageio::to_byte(img.data()[y * w + x]);
                }
            }
        }
    }
    imageio::encode_png_gray(width, 3 * h, &pixels)
}

/// Pretrain a fresh model on every slice of `volumes`.
pub fn pretrain(
    volumes: &[Volume],
    model: EncoderConfig,
    config: PretrainConfig,
    seed: u64,
) -> Result<(ModelState, Vec<LossRow>)> {
    let mut t = Pretrainer::init(model, training_slices(volumes), config, seed)?;
    t.run(|_, _| Ok(()))?;
    Ok((t.model, t.log))
}
