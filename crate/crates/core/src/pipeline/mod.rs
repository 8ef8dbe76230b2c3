//! Reference-frame strategies, the diffusion training loop, autoregressive
//! synthesis and the strategy ablation harness.

mod ablation;
mod config;
mod strategy;
mod synth;
#[cfg(test)]
mod tests;
mod train;

pub use ablation::*;
pub use config::TrainConfig;
pub use strategy::*;
pub use synth::*;
pub use train::*;
