//! Dense `f64` tensors, a reverse-mode tape, Adam, and the checkpoint container.

mod adam;
mod checkpoint;
pub mod gradcheck;
pub(crate) mod kernels;
pub mod layers;
mod params;
mod tape;
mod tensor;

pub use adam::{cosine_lr, AdamConfig, AdamState};
pub use checkpoint::Checkpoint;
pub use params::{Graph, ParamGrads, ParamId, ParamSet};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Deterministic RNG for an independent `(seed, stream)` pair.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn normal_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| StandardNormal.sample(rng))
}
