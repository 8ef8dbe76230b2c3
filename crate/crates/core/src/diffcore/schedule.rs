use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Tensor;

pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;
pub const DEFAULT_DDIM_STEPS: usize = 200;

/// Serializable schedule parameters; the tables are always regenerated.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub ddim_steps: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: DEFAULT_STEPS,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
            ddim_steps: DEFAULT_DDIM_STEPS,
        }
    }
}

/// Linear-β noise schedule; step `d ∈ [1, T]`, with `ᾱ_0 = 1` for the clean end.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
    ddim_steps: usize,
}

pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<DiffusionSchedule> {
    if steps == 0 || !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "schedule needs T >= 1 and 0 < beta_start <= beta_end < 1, got T={steps}, [{beta_start}, {beta_end}]"
        )));
    }
    let betas: Vec<f64> = (0..steps)
        .map(|i| {
            let frac = if steps == 1 { 0.0 } else { i as f64 / (steps - 1) as f64 };
            beta_start + frac * (beta_end - beta_start)
        })
        .collect();
    let mut alpha_bars = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for b in &betas {
        acc *= 1.0 - b;
        alpha_bars.push(acc);
    }
    Ok(DiffusionSchedule { betas, alpha_bars, ddim_steps: DEFAULT_DDIM_STEPS.min(steps) })
}

impl DiffusionSchedule {
    pub fn from_config(cfg: &ScheduleConfig) -> Result<Self> {
        let mut s = make_schedule(cfg.steps, cfg.beta_start, cfg.beta_end)?;
        s.ddim_steps = cfg.ddim_steps.clamp(1, cfg.steps);
        Ok(s)
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn ddim_steps(&self) -> usize {
        self.ddim_steps
    }

    pub fn beta(&self, d: usize) -> f64 {
        self.betas[d - 1]
    }

    pub fn alpha(&self, d: usize) -> f64 {
        1.0 - self.beta(d)
    }

    /// `ᾱ_d`; `d = 0` gives 1.
    pub fn alpha_bar(&self, d: usize) -> f64 {
        if d == 0 {
            1.0
        } else {
            self.alpha_bars[d - 1]
        }
    }

    pub(crate) fn check_step(&self, d: usize) -> Result<()> {
        if d == 0 || d > self.steps() {
            return Err(Error::InvalidArgument(format!("diffusion step {d} outside [1, {}]", self.steps())));
        }
        Ok(())
    }

    /// Evenly spaced descending sub-sequence `d_n = T > … > d_1 ≥ 1` of length `n`.
    pub fn ddim_timesteps(&self, n: usize) -> Result<Vec<usize>> {
        let t = self.steps();
        if n == 0 || n > t {
            return Err(Error::InvalidArgument(format!("DDIM needs 1..={t} steps, got {n}")));
        }
        Ok((1..=n).rev().map(|k| (k * t).div_ceil(n)).collect())
    }
}

/// `z_d = √ᾱ_d · z0 + √(1 − ᾱ_d) · ε`.
pub fn forward_diffuse(schedule: &DiffusionSchedule, z0: &Tensor, d: usize, eps: &Tensor) -> Result<Tensor> {
    schedule.check_step(d)?;
    if z0.shape() != eps.shape() {
        return Err(Error::shape("forward_diffuse", format!("{:?} vs {:?}", z0.shape(), eps.shape())));
    }
    let ab = schedule.alpha_bar(d);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Tensor::new(z0.shape(), z0.data().iter().zip(eps.data()).map(|(z, e)| a * z + b * e).collect())
}

/// Per-sample forward diffusion of a batch `[B, ...]` at steps `ds[b]`.
pub fn forward_diffuse_batch(schedule: &DiffusionSchedule, z0: &Tensor, ds: &[usize], eps: &Tensor) -> Result<Tensor> {
    if z0.shape() != eps.shape() || z0.shape().first() != Some(&ds.len()) {
        return Err(Error::shape(
            "forward_diffuse",
            format!("{:?}, {:?}, {} steps", z0.shape(), eps.shape(), ds.len()),
        ));
    }
    let inner = z0.numel() / ds.len();
    let mut out = Vec::with_capacity(z0.numel());
    for (b, &d) in ds.iter().enumerate() {
        schedule.check_step(d)?;
        let ab = schedule.alpha_bar(d);
        let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
        let range = b * inner..(b + 1) * inner;
        out.extend(z0.data()[range.clone()].iter().zip(&eps.data()[range]).map(|(z, e)| a * z + s * e));
    }
    Tensor::new(z0.shape(), out)
}
