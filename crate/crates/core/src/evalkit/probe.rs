use serde::{Deserialize, Serialize};

use crate::audiofeat::{audio_window, group_features, GroupedFeatures};
use crate::diffcore::{forward_diffuse, DenoiserModel, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::latentcodec::Codec;
use crate::numcore::{normal_tensor, seeded_rng, Tensor};
use crate::spriteworld::{mask_lower_half, pose_walk, render_clip, Clip, Image};

pub const PROBE_STEP: usize = 500;
pub const MIN_IDENT_ITEMS: usize = 10;
pub const MIN_POSE_ITEMS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ProbeSetting {
    /// Only the identity frame varies.
    Ident,
    /// Only the head pose varies; the mouth opening is shared.
    Pose,
}

impl ProbeSetting {
    pub fn min_items(self) -> usize {
        match self {
            Self::Ident => MIN_IDENT_ITEMS,
            Self::Pose => MIN_POSE_ITEMS,
        }
    }
}

impl std::fmt::Display for ProbeSetting {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Ident => "Ident",
            Self::Pose => "Pose",
        })
    }
}

/// One denoiser input. `identity: None` feeds a zero identity latent.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeItem {
    pub target: Image,
    pub masked: Image,
    pub identity: Option<Image>,
    pub poses: Vec<Image>,
    pub grouped: GroupedFeatures,
    pub t: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeSpec {
    pub setting: ProbeSetting,
    pub items: Vec<ProbeItem>,
    pub d: usize,
    pub noise_seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceProbeResult {
    pub setting: ProbeSetting,
    /// Per-dimension population variance across items, averaged over dimensions.
    pub variance: f64,
    pub d: usize,
    pub items: usize,
}

/// Population variance of each column of `rows`, averaged over columns.
pub fn mean_dimension_variance(rows: &[Vec<f64>]) -> f64 {
    let Some(first) = rows.first() else {
        return 0.0;
    };
    let (n, dims) = (rows.len() as f64, first.len());
    if dims == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for j in 0..dims {
        // Offsets from the first row keep identical rows at exactly zero.
        let dev: Vec<f64> = rows.iter().map(|r| r[j] - first[j]).collect();
        let m = dev.iter().sum::<f64>() / n;
        total += dev.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
    }
    total / dims as f64
}

fn frame_at(clip: &Clip, t: usize) -> Result<&Image> {
    clip.frames.get(t).ok_or_else(|| Error::InvalidArgument(format!("frame {t} outside {}-frame clip", clip.len())))
}

/// Ident items: target `t`, its pose frames `t-np..t` and the masked frame are
/// fixed; the identity frame walks over `identity_frames` of the same clip.
pub fn ident_items(clip: &Clip, t: usize, np: usize, identity_frames: &[usize]) -> Result<Vec<ProbeItem>> {
    if np == 0 || t < np {
        return Err(Error::InvalidArgument(format!("target {t} has fewer than {np} previous frames")));
    }
    let target = frame_at(clip, t)?.clone();
    let poses: Vec<Image> = (t - np..t).map(|i| frame_at(clip, i).cloned()).collect::<Result<_>>()?;
    let grouped = group_features(&clip.driving_signal)?;
    identity_frames
        .iter()
        .map(|&i| {
            Ok(ProbeItem {
                target: target.clone(),
                masked: mask_lower_half(&target),
                identity: Some(frame_at(clip, i)?.clone()),
                poses: poses.clone(),
                grouped: grouped.clone(),
                t,
            })
        })
        .collect()
}

/// Pose items: the base clip's identity and aperture trace are re-rendered under
/// `n_items` independent head-pose walks; identity frame and audio stay fixed.
pub fn pose_items(
    base: &Clip,
    t: usize,
    np: usize,
    identity_frame: usize,
    n_items: usize,
    seed: u64,
) -> Result<Vec<ProbeItem>> {
    if np == 0 || t < np {
        return Err(Error::InvalidArgument(format!("target {t} has fewer than {np} previous frames")));
    }
    let identity = frame_at(base, identity_frame)?.clone();
    let grouped = group_features(&base.driving_signal)?;
    (0..n_items)
        .map(|k| {
            let poses = pose_walk(&mut seeded_rng(seed, 0x9000 + k as u64), base.len());
            let clip = render_clip(base.seed, base.identity, poses, base.driving_signal.clone())?;
            let target = frame_at(&clip, t)?.clone();
            Ok(ProbeItem {
                masked: mask_lower_half(&target),
                identity: Some(identity.clone()),
                poses: (t - np..t).map(|i| frame_at(&clip, i).cloned()).collect::<Result<_>>()?,
                target,
                grouped: grouped.clone(),
                t,
            })
        })
        .collect()
}

/// Mid-block activation variance of the denoiser across probe items. Every item
/// is noised to step `d` with the same noise draw, so only the probed input varies.
pub fn variance_probe(
    model: &DenoiserModel,
    codec: &Codec,
    schedule: &DiffusionSchedule,
    spec: &ProbeSpec,
) -> Result<VarianceProbeResult> {
    let need = spec.setting.min_items();
    if spec.items.len() < need {
        return Err(Error::InvalidArgument(format!(
            "{} probe needs at least {need} items, got {}",
            spec.setting,
            spec.items.len()
        )));
    }
    let mut rng = seeded_rng(spec.noise_seed, 0x9b0e);
    let mut noise: Option<Tensor> = None;
    let mut rows = Vec::with_capacity(spec.items.len());
    for item in &spec.items {
        let z0 = codec.encode_batch(std::slice::from_ref(&item.target))?;
        let eps = noise.get_or_insert_with(|| normal_tensor(z0.shape(), &mut rng));
        let z_d = forward_diffuse(schedule, &z0, spec.d, eps)?;
        let e_m = codec.encode_batch(std::slice::from_ref(&item.masked))?;
        let e_i = match &item.identity {
            Some(img) => codec.encode_batch(std::slice::from_ref(img))?,
            None => Tensor::zeros(e_m.shape()),
        };
        let e_p: Vec<Tensor> =
            item.poses.iter().map(|p| codec.encode_batch(std::slice::from_ref(p))).collect::<Result<_>>()?;
        let e_v = model.prior_from_latents(&e_m, &e_i, &e_p)?;
        let audio = model.encode_audio(&item.grouped)?;
        let window = audio_window(&audio, item.t, model.config().window)?;
        let mut shape = vec![1];
        shape.extend_from_slice(window.shape());
        let e_a = window.reshape(&shape)?;
        rows.push(model.mid_activation(&z_d, spec.d, &e_v, &e_a)?.data().to_vec());
    }
    Ok(VarianceProbeResult {
        setting: spec.setting,
        variance: mean_dimension_variance(&rows),
        d: spec.d,
        items: spec.items.len(),
    })
}
