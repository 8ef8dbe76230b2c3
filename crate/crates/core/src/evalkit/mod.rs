//! Image-quality metrics, the aperture-correlation sync score, shortcut
//! diagnostics and the latent variance probe.

mod metrics;
mod probe;
mod report;
#[cfg(test)]
mod tests;

pub use metrics::*;
pub use probe::*;
pub use report::*;
