use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::image::Image;
use super::render::{render_frame, IdentityParams, PoseParams};
use crate::error::{Error, Result};
use crate::numcore::seeded_rng;

/// Driving-signal samples per video frame.
pub const SAMPLES_PER_FRAME: usize = 4;

/// Largest change of consecutive raw samples; bounds frame-to-frame aperture
/// change by `SAMPLES_PER_FRAME * MAX_SAMPLE_STEP = 0.15`.
const MAX_SAMPLE_STEP: f64 = 0.0375;
const MAX_POSE_SHIFT_STEP: f64 = 0.5;
const MAX_POSE_ROT_STEP: f64 = 0.02;

/// One synthetic talking-sprite sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    pub frames: Vec<Image>,
    pub driving_signal: Vec<f64>,
    pub identity: IdentityParams,
    pub poses: Vec<PoseParams>,
    pub seed: u64,
}

/// The serializable generation parameters of a clip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipParams {
    pub seed: u64,
    pub identity: IdentityParams,
    pub poses: Vec<PoseParams>,
}

impl Clip {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Per-frame aperture: the mean of the frame's group of raw samples.
    pub fn frame_apertures(&self) -> Vec<f64> {
        group_means(&self.driving_signal)
    }

    pub fn params(&self) -> ClipParams {
        ClipParams { seed: self.seed, identity: self.identity, poses: self.poses.clone() }
    }

    /// First `n` frames with their signal samples.
    pub fn truncated(&self, n: usize) -> Clip {
        let n = n.min(self.len());
        Clip {
            frames: self.frames[..n].to_vec(),
            driving_signal: self.driving_signal[..n * SAMPLES_PER_FRAME].to_vec(),
            identity: self.identity,
            poses: self.poses[..n].to_vec(),
            seed: self.seed,
        }
    }
}

pub fn group_means(signal: &[f64]) -> Vec<f64> {
    signal.chunks(SAMPLES_PER_FRAME).map(|g| g.iter().sum::<f64>() / g.len() as f64).collect()
}

/// Smooth mouth-opening trace at `SAMPLES_PER_FRAME` × frame rate.
///
/// A damped, mean-reverting velocity walk reflected at `[0, 1]` with the
/// per-sample step clamped to `MAX_SAMPLE_STEP`.
pub fn aperture_trace(rng: &mut ChaCha8Rng, n_samples: usize) -> Vec<f64> {
    let mut s: f64 = rng.random_range(0.1..0.9);
    let mut vel: f64 = 0.0;
    let mut out = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let kick: f64 = StandardNormal.sample(rng);
        vel = 0.92 * vel + 0.012 * kick + 0.002 * (0.5 - s);
        vel = vel.clamp(-MAX_SAMPLE_STEP, MAX_SAMPLE_STEP);
        s += vel;
        if s < 0.0 {
            s = -s;
            vel = -vel;
        } else if s > 1.0 {
            s = 2.0 - s;
            vel = -vel;
        }
        out.push(s.clamp(0.0, 1.0));
    }
    out
}

/// Bounded smooth random walk of head placement, one pose per frame.
pub fn pose_walk(rng: &mut ChaCha8Rng, n_frames: usize) -> Vec<PoseParams> {
    let mut p = PoseParams {
        dx: rng.random_range(-1.5..1.5),
        dy: rng.random_range(-1.5..1.5),
        rot: rng.random_range(-0.07..0.07),
    };
    let mut v = PoseParams::default();
    let mut out = Vec::with_capacity(n_frames);
    for _ in 0..n_frames {
        out.push(p);
        let mut step = |pos: f64, vel: f64, scale: f64, limit: f64, bound: f64| {
            let kick: f64 = StandardNormal.sample(rng);
            let mut vel = (0.8 * vel + scale * kick - 0.05 * pos / bound * limit).clamp(-limit, limit);
            if (pos + vel).abs() > bound {
                vel = -vel;
            }
            (pos + vel, vel)
        };
        (p.dx, v.dx) = step(p.dx, v.dx, 0.15, MAX_POSE_SHIFT_STEP, PoseParams::MAX_SHIFT);
        (p.dy, v.dy) = step(p.dy, v.dy, 0.15, MAX_POSE_SHIFT_STEP, PoseParams::MAX_SHIFT);
        (p.rot, v.rot) = step(p.rot, v.rot, 0.006, MAX_POSE_ROT_STEP, PoseParams::MAX_ROT);
    }
    out
}

/// Renders a clip for explicit factors. Frames are stored exactly on the 8-bit grid.
pub fn render_clip(
    seed: u64,
    identity: IdentityParams,
    poses: Vec<PoseParams>,
    driving_signal: Vec<f64>,
) -> Result<Clip> {
    if poses.len() * SAMPLES_PER_FRAME != driving_signal.len() {
        return Err(Error::InvalidArgument(format!(
            "{} poses need {} signal samples, got {}",
            poses.len(),
            poses.len() * SAMPLES_PER_FRAME,
            driving_signal.len()
        )));
    }
    let frames = group_means(&driving_signal)
        .iter()
        .zip(&poses)
        .map(|(&a, pose)| render_frame(&identity, pose, a).map(|f| f.quantized()))
        .collect::<Result<Vec<_>>>()?;
    Ok(Clip { frames, driving_signal, identity, poses, seed })
}

/// Deterministic clip from a seed.
pub fn generate_clip(seed: u64, n_frames: usize) -> Result<Clip> {
    if n_frames < 2 {
        return Err(Error::InvalidArgument(format!("a clip needs at least 2 frames, got {n_frames}")));
    }
    let identity = IdentityParams::from_seed(seed);
    let trace = aperture_trace(&mut seeded_rng(seed, 0x51), n_frames * SAMPLES_PER_FRAME);
    let poses = pose_walk(&mut seeded_rng(seed, 0x9e), n_frames);
    render_clip(seed, identity, poses, trace)
}

/// Clip whose aperture trace is supplied by the caller; identity and pose come from `seed`.
pub fn generate_clip_with_trace(seed: u64, trace: Vec<f64>) -> Result<Clip> {
    let n_frames = trace.len() / SAMPLES_PER_FRAME;
    if n_frames < 2 || !trace.len().is_multiple_of(SAMPLES_PER_FRAME) {
        return Err(Error::InvalidArgument("trace must cover at least 2 whole frames".into()));
    }
    let identity = IdentityParams::from_seed(seed);
    let poses = pose_walk(&mut seeded_rng(seed, 0x9e), n_frames);
    render_clip(seed, identity, poses, trace)
}
