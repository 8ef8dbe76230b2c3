use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::schedule::{forward_diffuse_batch, DiffusionSchedule};
use super::unet::{UNet, UNetConfig};
use crate::audiofeat::{window_indices, AudioEncoder, GroupedFeatures, AUDIO_DIM, DEFAULT_WINDOW};
use crate::error::{Error, Result};
use crate::latentcodec::{Codec, LATENT_CHANNELS};
use crate::numcore::layers::Conv2d;
use crate::numcore::{seeded_rng, Checkpoint, Graph, ParamId, ParamSet, Tensor, Var};
use crate::spriteworld::{Image, SAMPLES_PER_FRAME};

/// Channel layout of the visual prior `E_v = [E_m, E_i, pose slots]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PriorLayout {
    /// Number of pose latents.
    pub np: usize,
    /// Pose latents pass through the shared 3→1 bottleneck; otherwise they enter raw.
    pub bottleneck: bool,
}

impl PriorLayout {
    pub fn pose_channels(&self) -> usize {
        self.np * if self.bottleneck { 1 } else { LATENT_CHANNELS }
    }

    pub fn prior_channels(&self) -> usize {
        2 * LATENT_CHANNELS + self.pose_channels()
    }

    /// UNet input: the prior followed by the noisy latent.
    pub fn unet_in_channels(&self) -> usize {
        self.prior_channels() + LATENT_CHANNELS
    }
}

/// Architecture hyperparameters of the denoiser.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layout: PriorLayout,
    pub base_channels: usize,
    pub low_channels: usize,
    pub window: usize,
}

impl ModelConfig {
    pub fn new(layout: PriorLayout) -> Self {
        Self { layout, base_channels: 32, low_channels: 64, window: DEFAULT_WINDOW }
    }
}

/// Bottleneck, audio encoder and UNet trained together. Parameters are named
/// `diff.*` and `audio.*`.
#[derive(Clone, Debug)]
pub struct DenoiserModel {
    params: ParamSet,
    config: ModelConfig,
    bn: Conv2d,
    audio: AudioEncoder,
    /// Learned embedding of each audio-window offset, `[2w+1, AUDIO_DIM]`; without
    /// it attention could not tell the target frame from its neighbours.
    audio_pos: ParamId,
    unet: UNet,
}

impl DenoiserModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        if config.layout.np == 0 {
            return Err(Error::InvalidArgument("at least one pose frame is required".into()));
        }
        let mut rng = seeded_rng(seed, 0xd1ff);
        let mut params = ParamSet::new();
        let bn = Conv2d::new(&mut params, "diff.bn", LATENT_CHANNELS, 1, 1, 1, &mut rng);
        let audio = AudioEncoder::new(&mut params, &mut rng);
        let unet_cfg = UNetConfig {
            in_channels: config.layout.unet_in_channels(),
            out_channels: LATENT_CHANNELS,
            base_channels: config.base_channels,
            low_channels: config.low_channels,
            cond_dim: AUDIO_DIM,
        };
        let unet = UNet::new(&mut params, "diff.unet", unet_cfg, &mut rng)?;
        assert_eq!(unet.config().in_channels, 6 + config.layout.pose_channels() + 3);
        let audio_pos = params.insert_uniform("diff.audio_pos", &[2 * config.window + 1, AUDIO_DIM], 4, &mut rng);
        Ok(Self { params, config, bn, audio, audio_pos, unet })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> PriorLayout {
        self.config.layout
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn audio_encoder(&self) -> &AudioEncoder {
        &self.audio
    }

    pub fn bn(&self) -> &Conv2d {
        &self.bn
    }

    pub fn unet_in_channels(&self) -> usize {
        self.unet.config().in_channels
    }

    pub fn set_frozen_audio_layers(&mut self, k: usize) -> Result<()> {
        self.audio.set_frozen_layers(&mut self.params, k)
    }

    /// Shared 3→1 bottleneck applied to one pose latent `[B, 3, h, w]`.
    pub fn bottleneck(&self, g: &mut Graph, e_p: Var) -> Result<Var> {
        self.bn.forward(g, e_p)
    }

    /// `E_v = concat(E_m, E_i, slot(E_p1), …, slot(E_pNP))` along channels.
    pub fn assemble_prior(&self, g: &mut Graph, e_m: Var, e_i: Var, e_p: &[Var]) -> Result<Var> {
        if e_p.is_empty() {
            return Err(Error::InvalidArgument("empty pose list".into()));
        }
        if e_p.len() != self.config.layout.np {
            return Err(Error::InvalidArgument(format!(
                "model expects {} pose latents, got {}",
                self.config.layout.np,
                e_p.len()
            )));
        }
        let mut parts = vec![e_m, e_i];
        for &p in e_p {
            parts.push(if self.config.layout.bottleneck { self.bottleneck(g, p)? } else { p });
        }
        g.concat(&parts, 1)
    }

    /// Audio windows `[B, 2w+1, AUDIO_DIM]` for `targets[b]` of clip `b`,
    /// from grouped features stacked as `[B, 4, 1, n]`.
    pub fn audio_windows(&self, g: &mut Graph, grouped: Var, targets: &[usize]) -> Result<Var> {
        let s = g.shape(grouped).to_vec();
        if s.len() != 4 || s[0] != targets.len() || s[1] != SAMPLES_PER_FRAME || s[2] != 1 {
            return Err(Error::shape("audio_windows", format!("{s:?} for {} targets", targets.len())));
        }
        let (b, n) = (s[0], s[3]);
        if let Some(&t) = targets.iter().find(|&&t| t >= n) {
            return Err(Error::InvalidArgument(format!("target frame {t} outside {n}-frame clip")));
        }
        let ea = self.audio.forward(g, grouped)?;
        let ea = g.reshape(ea, &[b, AUDIO_DIM, n])?;
        let ea = g.permute(ea, &[0, 2, 1])?;
        let ea = g.reshape(ea, &[b * n, AUDIO_DIM])?;
        let w = self.config.window;
        let idx: Vec<usize> = targets
            .iter()
            .enumerate()
            .flat_map(|(i, &t)| window_indices(n, t, w).into_iter().map(move |j| i * n + j))
            .collect();
        let win = g.gather_rows(ea, &idx)?;
        g.reshape(win, &[b, 2 * w + 1, AUDIO_DIM])
    }

    /// Full-clip `E_a` for inference, `[n, AUDIO_DIM]`.
    pub fn encode_audio(&self, grouped: &GroupedFeatures) -> Result<Tensor> {
        self.audio.encode_audio(&self.params, grouped)
    }

    /// `ε̂ = M(z_d, d, E_v, E_a)` together with the mid-block activation.
    pub fn forward(&self, g: &mut Graph, z_d: Var, ds: &[usize], e_v: Var, e_a: Var) -> Result<(Var, Var)> {
        let zs = g.shape(z_d).to_vec();
        let vs = g.shape(e_v).to_vec();
        if vs.len() != 4 || vs[1] != self.config.layout.prior_channels() {
            return Err(Error::shape(
                "predict_eps",
                format!("prior {vs:?}, expected {} channels", self.config.layout.prior_channels()),
            ));
        }
        if zs.len() != 4 || zs[1] != LATENT_CHANNELS || zs[0] != vs[0] || zs[2..] != vs[2..] {
            return Err(Error::shape("predict_eps", format!("noisy latent {zs:?} vs prior {vs:?}")));
        }
        let len = 2 * self.config.window + 1;
        let es = g.shape(e_a).to_vec();
        if es.len() != 3 || es[0] != zs[0] || es[1] != len || es[2] != AUDIO_DIM {
            return Err(Error::shape(
                "predict_eps",
                format!("audio window {es:?}, expected [{}, {len}, {AUDIO_DIM}]", zs[0]),
            ));
        }
        let flat = g.reshape(e_a, &[es[0], len * AUDIO_DIM])?;
        let pos = g.param(self.audio_pos);
        let flat = g.add_channel_bias(flat, pos)?;
        let e_a = g.reshape(flat, &es)?;
        let x = g.concat(&[e_v, z_d], 1)?;
        let out = self.unet.forward(g, x, ds, e_a)?;
        Ok((out.eps, out.mid))
    }

    fn check_steps(schedule: &DiffusionSchedule, ds: &[usize]) -> Result<()> {
        ds.iter().try_for_each(|&d| schedule.check_step(d))
    }

    /// Inference-mode ε̂ for a batch with one shared step `d`.
    pub fn predict_eps(&self, z_d: &Tensor, d: usize, e_v: &Tensor, e_a: &Tensor) -> Result<Tensor> {
        let b = z_d.shape().first().copied().unwrap_or(0);
        let mut g = Graph::inference(&self.params);
        let (z, v, a) = (g.constant(z_d.clone()), g.constant(e_v.clone()), g.constant(e_a.clone()));
        let (eps, _) = self.forward(&mut g, z, &vec![d; b], v, a)?;
        Ok(g.value(eps).clone())
    }

    /// Mid-block activation `[B, C, h/2, w/2]` for a batch at step `d`.
    pub fn mid_activation(&self, z_d: &Tensor, d: usize, e_v: &Tensor, e_a: &Tensor) -> Result<Tensor> {
        let b = z_d.shape().first().copied().unwrap_or(0);
        let mut g = Graph::inference(&self.params);
        let (z, v, a) = (g.constant(z_d.clone()), g.constant(e_v.clone()), g.constant(e_a.clone()));
        let (_, mid) = self.forward(&mut g, z, &vec![d; b], v, a)?;
        Ok(g.value(mid).clone())
    }

    /// Inference-mode prior from latents `[B, 3, h, w]`.
    pub fn prior_from_latents(&self, e_m: &Tensor, e_i: &Tensor, e_p: &[Tensor]) -> Result<Tensor> {
        let mut g = Graph::inference(&self.params);
        let m = g.constant(e_m.clone());
        let i = g.constant(e_i.clone());
        let p: Vec<Var> = e_p.iter().map(|t| g.constant(t.clone())).collect();
        let v = self.assemble_prior(&mut g, m, i, &p)?;
        Ok(g.value(v).clone())
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new();
        ck.insert_params(&self.params);
        ck.set_meta("model", self.config)?;
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config: ModelConfig = ck.meta("model")?;
        let mut model = Self::new(config, 0)?;
        ck.restore(&mut model.params)?;
        Ok(model)
    }
}

/// Encodes images into latents and assembles `E_v` for a single sample, `[1, 6+NP', h, w]`.
pub fn assemble_visual_prior(
    model: &DenoiserModel,
    codec: &Codec,
    masked: &Image,
    identity: &Image,
    poses: &[Image],
) -> Result<Tensor> {
    if poses.is_empty() {
        return Err(Error::InvalidArgument("empty pose list".into()));
    }
    let e_m = codec.encode_batch(std::slice::from_ref(masked))?;
    let e_i = codec.encode_batch(std::slice::from_ref(identity))?;
    let e_p: Vec<Tensor> = poses.iter().map(|p| codec.encode_batch(std::slice::from_ref(p))).collect::<Result<_>>()?;
    model.prior_from_latents(&e_m, &e_i, &e_p)
}

/// Draws `d ~ U[1, T]` and `ε ~ N(0, I)` per sample, returning `(d, ε, z_d)`.
pub fn sample_noising(
    schedule: &DiffusionSchedule,
    z0: &Tensor,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<usize>, Tensor, Tensor)> {
    let b = z0.shape()[0];
    let ds: Vec<usize> = (0..b).map(|_| rng.random_range(1..=schedule.steps())).collect();
    let eps = Tensor::from_fn(z0.shape(), |_| StandardNormal.sample(rng));
    let z_d = forward_diffuse_batch(schedule, z0, &ds, &eps)?;
    Ok((ds, eps, z_d))
}

/// `mean((ε − M(z_d, d, E_v, E_a))²)` with fresh `d` and `ε`; `z0` is a constant batch.
pub fn ldm_loss(
    schedule: &DiffusionSchedule,
    model: &DenoiserModel,
    g: &mut Graph,
    z0: &Tensor,
    e_v: Var,
    e_a: Var,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    let (ds, eps, z_d) = sample_noising(schedule, z0, rng)?;
    DenoiserModel::check_steps(schedule, &ds)?;
    let z = g.constant(z_d);
    let target = g.constant(eps);
    let (pred, _) = model.forward(g, z, &ds, e_v, e_a)?;
    g.mse(pred, target)
}
