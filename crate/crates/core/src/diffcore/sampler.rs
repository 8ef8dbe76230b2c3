use rand_chacha::ChaCha8Rng;

use super::model::DenoiserModel;
use super::schedule::DiffusionSchedule;
use crate::error::{Error, Result};
use crate::numcore::{normal_tensor, Tensor};

/// Anything that predicts the noise in `z_d` at step `d` (batch-wide).
pub trait EpsPredictor {
    fn predict(&self, z_d: &Tensor, d: usize) -> Result<Tensor>;
}

/// A denoiser bound to fixed conditioning.
pub struct Conditioned<'a> {
    pub model: &'a DenoiserModel,
    pub e_v: &'a Tensor,
    pub e_a: &'a Tensor,
}

impl EpsPredictor for Conditioned<'_> {
    fn predict(&self, z_d: &Tensor, d: usize) -> Result<Tensor> {
        self.model.predict_eps(z_d, d, self.e_v, self.e_a)
    }
}

/// One deterministic DDIM transition, returning `(x̂0, z_{d'})`.
pub fn ddim_step(
    schedule: &DiffusionSchedule,
    z_d: &Tensor,
    eps: &Tensor,
    d: usize,
    d_next: usize,
) -> Result<(Tensor, Tensor)> {
    if z_d.shape() != eps.shape() {
        return Err(Error::shape("ddim", format!("{:?} vs {:?}", z_d.shape(), eps.shape())));
    }
    let (ab, ab_next) = (schedule.alpha_bar(d), schedule.alpha_bar(d_next));
    let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
    let (na, nb) = (ab_next.sqrt(), (1.0 - ab_next).sqrt());
    let x0: Vec<f64> = z_d.data().iter().zip(eps.data()).map(|(z, e)| (z - sb * e) / sa).collect();
    let next: Vec<f64> = x0.iter().zip(eps.data()).map(|(x, e)| na * x + nb * e).collect();
    Ok((Tensor::new(z_d.shape(), x0)?, Tensor::new(z_d.shape(), next)?))
}

/// η = 0 DDIM from a given start `z_T`; `on_step(d, x̂0)` observes each prediction.
pub fn ddim_sample_from(
    schedule: &DiffusionSchedule,
    model: &impl EpsPredictor,
    z_t: Tensor,
    n_steps: usize,
    mut on_step: impl FnMut(usize, &Tensor),
) -> Result<Tensor> {
    let steps = schedule.ddim_timesteps(n_steps)?;
    let mut z = z_t;
    for (i, &d) in steps.iter().enumerate() {
        let d_next = steps.get(i + 1).copied().unwrap_or(0);
        let eps = model.predict(&z, d)?;
        let (x0, next) = ddim_step(schedule, &z, &eps, d, d_next)?;
        on_step(d, &x0);
        z = next;
    }
    Ok(z)
}

/// η = 0 DDIM from `z_T ~ N(0, I)` of the given shape.
pub fn ddim_sample(
    schedule: &DiffusionSchedule,
    model: &impl EpsPredictor,
    shape: &[usize],
    rng: &mut ChaCha8Rng,
    n_steps: usize,
) -> Result<Tensor> {
    if n_steps < 1 {
        return Err(Error::InvalidArgument("DDIM needs at least one step".into()));
    }
    ddim_sample_from(schedule, model, normal_tensor(shape, rng), n_steps, |_, _| {})
}
