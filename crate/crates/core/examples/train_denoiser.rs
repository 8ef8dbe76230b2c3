//! Trains a small denoiser on latents of an untrained codec and prints the
//! per-epoch training and validation loss.

use talkdiff::latentcodec::Codec;
use talkdiff::pipeline::{encode_clips, train_diffusion, StrategyKind, TrainConfig};
use talkdiff::spriteworld::generate_dataset;

fn main() -> talkdiff::Result<()> {
    let codec = Codec::new(0);
    let latents = encode_clips(&codec, &generate_dataset(1, 16, 30)?)?;
    let cfg = TrainConfig {
        strategy: StrategyKind::RndPlusPrvBN,
        epochs: 4,
        samples_per_epoch: 128,
        base_channels: 16,
        low_channels: 32,
        ..TrainConfig::default()
    };
    let (model, history) = train_diffusion(&cfg, 0, &latents, None, |r| {
        println!("epoch {}: train {:.4}, val {:.4}, {} steps", r.epoch, r.train_loss, r.val_loss, r.steps)
    })?;
    println!("best epoch {}; {} parameters", history.best_epoch, model.params().numel());
    Ok(())
}
