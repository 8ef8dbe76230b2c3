use rand_chacha::ChaCha8Rng;

use super::strategy::{inference_references, RefSource, RefStrategy};
use crate::audiofeat::{audio_window, group_features};
use crate::diffcore::{ddim_sample_from, Conditioned, DenoiserModel, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::evalkit::psnr;
use crate::latentcodec::Codec;
use crate::numcore::{normal_tensor, seeded_rng, Tensor};
use crate::spriteworld::{mask_lower_half, Clip, Image};

/// Frozen pieces needed to generate frames.
pub struct Synthesizer<'a> {
    pub model: &'a DenoiserModel,
    pub codec: &'a Codec,
    pub schedule: &'a DiffusionSchedule,
    pub strategy: RefStrategy,
    pub ddim_steps: usize,
}

/// Per-clip generation state; references only ever read generated frames.
struct Track {
    audio: Tensor,
    masked: Tensor,
    seed_latent: Tensor,
    generated: Vec<Image>,
    latents: Vec<Tensor>,
    rng: ChaCha8Rng,
}

impl Synthesizer<'_> {
    fn slot(&self, track: &Track, src: RefSource) -> Tensor {
        match src {
            RefSource::Seed => track.seed_latent.clone(),
            RefSource::Generated(i) => track.latents[i].clone(),
            RefSource::Zero => Tensor::zeros(track.seed_latent.shape()),
        }
    }

    /// Generates every clip autoregressively, all clips advancing one frame per
    /// DDIM run. Clips must share a length of at least 2; frame 0 of each output
    /// is the clip's own frame 0. Noise for a clip depends only on `seed` and the
    /// clip's seed, so results do not depend on how clips are batched.
    pub fn synthesize_clips(&self, clips: &[Clip], seed: u64) -> Result<Vec<Vec<Image>>> {
        let Some(first) = clips.first() else {
            return Ok(Vec::new());
        };
        let n = first.len();
        if n < 2 {
            return Err(Error::InvalidArgument(format!("conditioning needs at least 2 frames, got {n}")));
        }
        if let Some(c) = clips.iter().find(|c| c.len() != n) {
            return Err(Error::InvalidArgument(format!("clips of {} and {n} frames in one batch", c.len())));
        }
        let expected = self.model.layout();
        if expected != self.strategy.layout() {
            return Err(Error::InvalidArgument(format!(
                "strategy {} does not match the model's prior layout",
                self.strategy
            )));
        }
        let w = self.model.config().window;
        let mut tracks: Vec<Track> = clips
            .iter()
            .map(|clip| {
                let masked: Vec<Image> = clip.frames.iter().map(mask_lower_half).collect();
                let seed_latent = self.codec.encode(&clip.frames[0])?;
                Ok(Track {
                    audio: self.model.encode_audio(&group_features(&clip.driving_signal)?)?,
                    masked: self.codec.encode_batch(&masked)?,
                    latents: vec![seed_latent.clone()],
                    seed_latent,
                    generated: vec![clip.frames[0].clone()],
                    rng: seeded_rng(seed, clip.seed),
                })
            })
            .collect::<Result<_>>()?;
        for t in 1..n {
            let (id_src, pose_src) = inference_references(&self.strategy, t)?;
            let e_m: Vec<Tensor> = tracks.iter().map(|tr| tr.masked.select0(t)).collect();
            let e_i: Vec<Tensor> = tracks.iter().map(|tr| self.slot(tr, id_src)).collect();
            let e_p: Vec<Tensor> = pose_src
                .iter()
                .map(|&src| {
                    let parts: Vec<Tensor> = tracks.iter().map(|tr| self.slot(tr, src)).collect();
                    Tensor::stack(&parts.iter().collect::<Vec<_>>())
                })
                .collect::<Result<_>>()?;
            let stack = |v: &[Tensor]| Tensor::stack(&v.iter().collect::<Vec<_>>());
            let e_v = self.model.prior_from_latents(&stack(&e_m)?, &stack(&e_i)?, &e_p)?;
            let windows: Vec<Tensor> = tracks.iter().map(|tr| audio_window(&tr.audio, t, w)).collect::<Result<_>>()?;
            let e_a = stack(&windows)?;
            let shape = e_m[0].shape().to_vec();
            let noise: Vec<Tensor> = tracks.iter_mut().map(|tr| normal_tensor(&shape, &mut tr.rng)).collect();
            let pred = Conditioned { model: self.model, e_v: &e_v, e_a: &e_a };
            let z = ddim_sample_from(self.schedule, &pred, stack(&noise)?, self.ddim_steps, |_, _| {})?;
            let frames = self.codec.decode_batch(&z)?;
            let reencoded = self.codec.encode_batch(&frames)?;
            for (i, (tr, frame)) in tracks.iter_mut().zip(frames).enumerate() {
                tr.latents.push(reencoded.select0(i));
                tr.generated.push(frame);
            }
        }
        Ok(tracks.into_iter().map(|t| t.generated).collect())
    }

    pub fn synthesize_clip(&self, clip: &Clip, seed: u64) -> Result<Vec<Image>> {
        Ok(self.synthesize_clips(std::slice::from_ref(clip), seed)?.remove(0))
    }
}

/// Frame each generated frame could have copied: its predecessor in the output.
pub fn pose_priors(generated: &[Image]) -> Vec<Image> {
    let mut out = Vec::with_capacity(generated.len());
    if let Some(first) = generated.first() {
        out.push(first.clone());
        out.extend(generated[..generated.len() - 1].iter().cloned());
    }
    out
}

/// PSNR of the unmasked upper halves of frames `1..` against the originals,
/// pooling all pixels.
pub fn upper_half_psnr(generated: &[Image], truth: &[Image]) -> Result<f64> {
    if generated.len() != truth.len() || generated.len() < 2 {
        return Err(Error::InvalidArgument("upper-half PSNR needs matching clips of at least 2 frames".into()));
    }
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for (g, t) in generated.iter().zip(truth).skip(1) {
        let half = t.height() / 2 * t.width() * 3;
        a.extend_from_slice(&g.data()[..half]);
        b.extend_from_slice(&t.data()[..half]);
    }
    psnr(&a, &b)
}
