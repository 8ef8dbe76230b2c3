//! Audio-driven talking-sprite synthesis with a conditional latent diffusion
//! model whose temporal pose prior passes through a one-channel bottleneck.
//!
//! The crate is organized bottom-up:
//!
//! - [`numcore`]: tensors, reverse-mode tape, Adam, checkpoint container
//! - [`spriteworld`]: procedural talking-sprite clips, aperture oracle, lip masking
//! - [`audiofeat`]: 4:1 grouping of the driving signal and the temporal audio encoder
//! - [`latentcodec`]: factor-4 image autoencoder
//! - [`diffcore`]: noise schedule, visual-prior assembly, conditional UNet, DDIM
//! - [`pipeline`]: reference-frame strategies, training, autoregressive synthesis, ablations
//! - [`evalkit`]: PSNR/SSIM, sync and shortcut scores, latent variance probe
//! - [`cli`]: the `talkdiff` command-line front end

pub mod audiofeat;
pub mod cli;
pub mod diffcore;
mod error;
pub mod evalkit;
pub mod latentcodec;
pub mod numcore;
pub mod pipeline;
pub mod spriteworld;

pub use error::{Error, Result};
