use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::strategy::{sample_reference_indices, RefIndices, RefStrategy};
use crate::audiofeat::{group_features, RECEPTIVE_RADIUS};
use crate::diffcore::{ldm_loss, DenoiserModel, DiffusionSchedule, ModelConfig};
use crate::error::{Error, Result};
use crate::latentcodec::Codec;
use crate::numcore::{cosine_lr, seeded_rng, AdamConfig, AdamState, Checkpoint, Graph, Tensor};
use crate::spriteworld::{mask_lower_half, Clip, SAMPLES_PER_FRAME};

pub const BEST_CHECKPOINT: &str = "best.ckpt";
const STRATEGY_META: &str = "strategy";
const CONFIG_META: &str = "train_config";
/// Frames encoded per codec call while precomputing latents.
const ENCODE_CHUNK: usize = 64;
/// Final learning rate as a fraction of the initial one.
pub const LR_FLOOR: f64 = 0.05;

/// Codec latents of one clip, computed once so the codec stays frozen.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentClip {
    /// `[n, 3, h, w]`.
    pub latents: Tensor,
    /// Latents of the lower-half-masked frames, `[n, 3, h, w]`.
    pub masked: Tensor,
    /// Grouped driving features, `[4, 1, n]`.
    pub grouped: Tensor,
}

impl LatentClip {
    pub fn len(&self) -> usize {
        self.latents.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn latent_len(&self) -> usize {
        self.latents.numel() / self.len()
    }

    fn row<'a>(&self, t: &'a Tensor, i: usize) -> &'a [f64] {
        let k = self.latent_len();
        &t.data()[i * k..(i + 1) * k]
    }
}

fn encode_frames(codec: &Codec, frames: &[crate::spriteworld::Image]) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut shape = Vec::new();
    for chunk in frames.chunks(ENCODE_CHUNK) {
        let z = codec.encode_batch(chunk)?;
        shape = z.shape().to_vec();
        data.extend_from_slice(z.data());
    }
    shape[0] = frames.len();
    Tensor::new(&shape, data)
}

pub fn encode_clip(codec: &Codec, clip: &Clip) -> Result<LatentClip> {
    if clip.len() < 2 {
        return Err(Error::InvalidArgument("clips need at least 2 frames".into()));
    }
    let masked: Vec<_> = clip.frames.iter().map(mask_lower_half).collect();
    Ok(LatentClip {
        latents: encode_frames(codec, &clip.frames)?,
        masked: encode_frames(codec, &masked)?,
        grouped: group_features(&clip.driving_signal)?.to_channels(),
    })
}

pub fn encode_clips(codec: &Codec, clips: &[Clip]) -> Result<Vec<LatentClip>> {
    clips.iter().map(|c| encode_clip(codec, c)).collect()
}

/// Audio crop `[lo, lo + len)` around target `t` wide enough that the encoder
/// output over the attention window equals the full-clip output exactly.
pub fn audio_crop(n: usize, t: usize, window: usize) -> (usize, usize) {
    let len = (2 * (window + RECEPTIVE_RADIUS) + 1).min(n);
    let lo = t.saturating_sub(window + RECEPTIVE_RADIUS).min(n - len);
    (lo, len)
}

/// One assembled training batch.
#[derive(Clone, Debug)]
pub struct Batch {
    pub z0: Tensor,
    pub e_m: Tensor,
    pub e_i: Tensor,
    /// One `[B, 3, h, w]` tensor per pose slot.
    pub e_p: Vec<Tensor>,
    /// Cropped grouped features `[B, 4, 1, L]`.
    pub grouped: Tensor,
    /// Target index inside each crop.
    pub local_t: Vec<usize>,
}

/// Stacks latents and audio crops for `(clip, t)` targets with given references.
/// Crops share the shortest clip's length, so they are exact when every clip in
/// the batch has at least `2(window + RECEPTIVE_RADIUS) + 1` frames or all share a length.
pub fn assemble_batch(
    data: &[LatentClip],
    targets: &[(usize, usize)],
    refs: &[RefIndices],
    window: usize,
) -> Result<Batch> {
    let Some(&(c0, _)) = targets.first() else {
        return Err(Error::InvalidArgument("empty batch".into()));
    };
    let first = data.get(c0).ok_or_else(|| Error::InvalidArgument(format!("clip {c0} out of range")))?;
    let mut lat_shape = first.latents.shape().to_vec();
    lat_shape[0] = targets.len();
    let np = refs[0].poses.len();
    let n_min = targets.iter().map(|&(c, _)| data[c].len()).min().unwrap_or(0);
    let crop = (2 * (window + RECEPTIVE_RADIUS) + 1).min(n_min);
    let (mut z0, mut e_m, mut e_i) = (Vec::new(), Vec::new(), Vec::new());
    let mut e_p = vec![Vec::new(); np];
    let mut grouped = Vec::new();
    let mut local_t = Vec::new();
    for (&(c, t), r) in targets.iter().zip(refs) {
        let clip = data.get(c).ok_or_else(|| Error::InvalidArgument(format!("clip {c} out of range")))?;
        z0.extend_from_slice(clip.row(&clip.latents, t));
        e_m.extend_from_slice(clip.row(&clip.masked, t));
        match r.identity {
            Some(i) => e_i.extend_from_slice(clip.row(&clip.latents, i)),
            None => e_i.extend(std::iter::repeat_n(0.0, clip.latent_len())),
        }
        for (slot, &p) in e_p.iter_mut().zip(&r.poses) {
            slot.extend_from_slice(clip.row(&clip.latents, p));
        }
        let n = clip.len();
        let lo = t.saturating_sub(window + RECEPTIVE_RADIUS).min(n - crop);
        let g = clip.grouped.data();
        for ch in 0..SAMPLES_PER_FRAME {
            grouped.extend_from_slice(&g[ch * n + lo..ch * n + lo + crop]);
        }
        local_t.push(t - lo);
    }
    let b = targets.len();
    Ok(Batch {
        z0: Tensor::new(&lat_shape, z0)?,
        e_m: Tensor::new(&lat_shape, e_m)?,
        e_i: Tensor::new(&lat_shape, e_i)?,
        e_p: e_p.into_iter().map(|v| Tensor::new(&lat_shape, v)).collect::<Result<_>>()?,
        grouped: Tensor::new(&[b, SAMPLES_PER_FRAME, 1, crop], grouped)?,
        local_t,
    })
}

/// Denoiser, optimizer and sampling state of one training run.
pub struct Trainer {
    pub model: DenoiserModel,
    adam: AdamState,
    schedule: DiffusionSchedule,
    strategy: RefStrategy,
    rng: ChaCha8Rng,
    base_lr: f64,
    decay_steps: Option<u64>,
}

impl Trainer {
    pub fn new(cfg: &TrainConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let strategy = cfg.ref_strategy()?;
        let mc = ModelConfig {
            layout: strategy.layout(),
            base_channels: cfg.base_channels,
            low_channels: cfg.low_channels,
            ..ModelConfig::new(strategy.layout())
        };
        let mut model = DenoiserModel::new(mc, seed)?;
        model.set_frozen_audio_layers(cfg.freeze_k)?;
        let adam = AdamState::new(model.params(), AdamConfig { lr: cfg.lr, ..AdamConfig::default() });
        Ok(Self {
            model,
            adam,
            schedule: DiffusionSchedule::from_config(&cfg.schedule)?,
            strategy,
            rng: seeded_rng(seed, 0x7a1),
            base_lr: cfg.lr,
            decay_steps: None,
        })
    }

    /// Cosine-decays the learning rate to `LR_FLOOR · lr` over `steps` updates;
    /// without this the rate stays constant.
    pub fn set_decay(&mut self, steps: u64) {
        self.decay_steps = Some(steps.max(1));
    }

    pub fn strategy(&self) -> RefStrategy {
        self.strategy
    }

    pub fn schedule(&self) -> &DiffusionSchedule {
        &self.schedule
    }

    pub fn steps_taken(&self) -> u64 {
        self.adam.steps_taken()
    }

    /// Draws references for each target with the trainer's generator.
    pub fn references(&mut self, data: &[LatentClip], targets: &[(usize, usize)]) -> Result<Vec<RefIndices>> {
        targets
            .iter()
            .map(|&(c, t)| sample_reference_indices(&self.strategy, data[c].len(), t, &mut self.rng))
            .collect()
    }

    fn loss_graph(
        model: &DenoiserModel,
        schedule: &DiffusionSchedule,
        batch: &Batch,
        train: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<(f64, Option<crate::numcore::ParamGrads>)> {
        let mut g = if train { Graph::train(model.params()) } else { Graph::inference(model.params()) };
        let m = g.constant(batch.e_m.clone());
        let i = g.constant(batch.e_i.clone());
        let p: Vec<_> = batch.e_p.iter().map(|t| g.constant(t.clone())).collect();
        let e_v = model.assemble_prior(&mut g, m, i, &p)?;
        let gv = g.constant(batch.grouped.clone());
        let e_a = model.audio_windows(&mut g, gv, &batch.local_t)?;
        let loss = ldm_loss(schedule, model, &mut g, &batch.z0, e_v, e_a, rng)?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Divergence(format!("diffusion loss {value}")));
        }
        let grads = if train { Some(g.backward(loss)?) } else { None };
        Ok((value, grads))
    }

    /// One Adam update on the bottleneck, audio encoder and UNet; returns the loss.
    pub fn train_step(&mut self, data: &[LatentClip], targets: &[(usize, usize)]) -> Result<f64> {
        let refs = self.references(data, targets)?;
        let batch = assemble_batch(data, targets, &refs, self.model.config().window)?;
        let (loss, grads) = Self::loss_graph(&self.model, &self.schedule, &batch, true, &mut self.rng)?;
        if let Some(total) = self.decay_steps {
            self.adam.config.lr = cosine_lr(self.base_lr, LR_FLOOR, self.adam.steps_taken() as f64 / total as f64);
        }
        self.adam.step(self.model.params_mut(), &grads.expect("training graph"))?;
        Ok(loss)
    }

    /// Loss without an update, with noise and references drawn from `seed`.
    pub fn eval_loss(&self, data: &[LatentClip], targets: &[(usize, usize)], seed: u64) -> Result<f64> {
        let mut rng = seeded_rng(seed, 0xe7a1);
        let refs: Vec<RefIndices> = targets
            .iter()
            .map(|&(c, t)| sample_reference_indices(&self.strategy, data[c].len(), t, &mut rng))
            .collect::<Result<_>>()?;
        let batch = assemble_batch(data, targets, &refs, self.model.config().window)?;
        Ok(Self::loss_graph(&self.model, &self.schedule, &batch, false, &mut rng)?.0)
    }
}

/// Eligible `(clip, t)` training targets, skipping `t < np`.
pub fn eligible_targets(data: &[LatentClip], strategy: &RefStrategy) -> Vec<(usize, usize)> {
    data.iter().enumerate().flat_map(|(c, clip)| (strategy.first_target()..clip.len()).map(move |t| (c, t))).collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub step_loss: Vec<f64>,
    pub epoch_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub best_epoch: usize,
}

/// Per-epoch progress passed to the training callback.
#[derive(Clone, Copy, Debug)]
pub struct EpochReport {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub steps: u64,
}

pub fn model_checkpoint(model: &DenoiserModel, strategy: &RefStrategy, cfg: &TrainConfig) -> Result<Checkpoint> {
    let mut ck = model.to_checkpoint()?;
    ck.set_meta(STRATEGY_META, strategy)?;
    ck.set_meta(CONFIG_META, cfg)?;
    Ok(ck)
}

/// Model and strategy from a checkpoint written by [`train_diffusion`].
pub fn load_model(ck: &Checkpoint) -> Result<(DenoiserModel, RefStrategy)> {
    let strategy: RefStrategy = ck.meta(STRATEGY_META)?;
    let model = DenoiserModel::from_checkpoint(ck)?;
    if model.layout() != strategy.layout() {
        return Err(Error::Checkpoint(format!("strategy {strategy} does not match the stored model layout")));
    }
    Ok((model, strategy))
}

/// Trains one denoiser on precomputed latents. The last sixteenth of the clips
/// (at least one, when there are two or more) is held out for validation; the
/// returned model carries the parameters of the best validation epoch. With `out`,
/// `best.ckpt` and periodic `epochNNN.ckpt` files are written there.
pub fn train_diffusion(
    cfg: &TrainConfig,
    seed: u64,
    data: &[LatentClip],
    out: Option<&Path>,
    mut on_epoch: impl FnMut(EpochReport),
) -> Result<(DenoiserModel, TrainHistory)> {
    let mut trainer = Trainer::new(cfg, seed)?;
    let strategy = trainer.strategy();
    let n_val = if data.len() >= 2 { (data.len() / 16).max(1) } else { 0 };
    let (train, val) = data.split_at(data.len() - n_val);
    let mut pool = eligible_targets(train, &strategy);
    if pool.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no training targets with at least {} previous frames",
            strategy.np
        )));
    }
    let mut val_targets =
        if val.is_empty() { eligible_targets(train, &strategy) } else { eligible_targets(val, &strategy) };
    let val_data = if val.is_empty() { train } else { val };
    val_targets.shuffle(&mut seeded_rng(seed, 0x7a2));
    val_targets.truncate(cfg.val_samples);

    let per_epoch = if cfg.samples_per_epoch == 0 { pool.len() } else { cfg.samples_per_epoch.min(pool.len()) };
    trainer.set_decay((cfg.epochs * per_epoch.div_ceil(cfg.batch_size)) as u64);
    let mut order_rng = seeded_rng(seed, 0x7a3);
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, DenoiserModel)> = None;
    for epoch in 0..cfg.epochs {
        pool.shuffle(&mut order_rng);
        let (mut total, mut batches) = (0.0, 0usize);
        for batch in pool[..per_epoch].chunks(cfg.batch_size) {
            let loss = trainer.train_step(train, batch)?;
            history.step_loss.push(loss);
            total += loss;
            batches += 1;
        }
        let train_loss = total / batches as f64;
        let val_loss = val_targets
            .chunks(cfg.batch_size.max(16))
            .enumerate()
            .map(|(i, chunk)| Ok(trainer.eval_loss(val_data, chunk, seed ^ i as u64)? * chunk.len() as f64))
            .sum::<Result<f64>>()?
            / val_targets.len() as f64;
        history.epoch_loss.push(train_loss);
        history.val_loss.push(val_loss);
        on_epoch(EpochReport { epoch, train_loss, val_loss, steps: trainer.steps_taken() });
        let improved = best.as_ref().is_none_or(|(b, _)| val_loss < *b);
        if improved {
            best = Some((val_loss, trainer.model.clone()));
            history.best_epoch = epoch;
        }
        if let Some(dir) = out {
            if improved {
                model_checkpoint(&trainer.model, &strategy, cfg)?.save(&dir.join(BEST_CHECKPOINT))?;
            }
            if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
                model_checkpoint(&trainer.model, &strategy, cfg)?
                    .save(&dir.join(format!("epoch{:03}.ckpt", epoch + 1)))?;
            }
        }
    }
    let model = best.map(|(_, m)| m).unwrap_or(trainer.model);
    Ok((model, history))
}
