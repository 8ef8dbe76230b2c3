//! Autoregressive generation: frame 0 seeds the clip and every later frame is
//! denoised from the masked original, the seed identity and the previous output.

use talkdiff::diffcore::{DiffusionSchedule, ScheduleConfig};
use talkdiff::evalkit::{psnr_video, sync_score};
use talkdiff::latentcodec::Codec;
use talkdiff::pipeline::{encode_clips, train_diffusion, upper_half_psnr, Synthesizer, TrainConfig};
use talkdiff::spriteworld::generate_dataset;

fn main() -> talkdiff::Result<()> {
    let codec = Codec::new(0);
    let cfg =
        TrainConfig { epochs: 1, samples_per_epoch: 64, base_channels: 16, low_channels: 32, ..TrainConfig::default() };
    let (model, _) = train_diffusion(&cfg, 0, &encode_clips(&codec, &generate_dataset(1, 8, 20)?)?, None, |_| {})?;
    let schedule = DiffusionSchedule::from_config(&ScheduleConfig::default())?;
    let synth = Synthesizer {
        model: &model,
        codec: &codec,
        schedule: &schedule,
        strategy: cfg.ref_strategy()?,
        ddim_steps: 10,
    };
    let clip = generate_dataset(2, 1, 14)?.remove(0);
    let frames = synth.synthesize_clip(&clip, 0)?;
    assert_eq!(frames[0], clip.frames[0]);
    println!("generated {} frames", frames.len());
    println!(
        "PSNR {:.2} dB, upper half {:.2} dB",
        psnr_video(&frames, &clip.frames)?,
        upper_half_psnr(&frames, &clip.frames)?
    );
    println!("sync {:?}", sync_score(&frames, &clip.driving_signal)?);
    Ok(())
}
