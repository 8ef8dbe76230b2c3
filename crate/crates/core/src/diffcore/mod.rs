//! Noise schedule, forward process, visual-prior assembly with the pose
//! bottleneck, the conditional UNet noise predictor and the DDIM sampler.

mod model;
mod sampler;
mod schedule;
#[cfg(test)]
mod tests;
mod unet;

pub use model::{assemble_visual_prior, ldm_loss, sample_noising, DenoiserModel, ModelConfig, PriorLayout};
pub use sampler::{ddim_sample, ddim_sample_from, ddim_step, Conditioned, EpsPredictor};
pub use schedule::{
    forward_diffuse, forward_diffuse_batch, make_schedule, DiffusionSchedule, ScheduleConfig, DEFAULT_BETA_END,
    DEFAULT_BETA_START, DEFAULT_DDIM_STEPS, DEFAULT_STEPS,
};
pub use unet::{timestep_embedding, UNet, UNetConfig, UNetOutput, TIME_EMBED_DIM};
