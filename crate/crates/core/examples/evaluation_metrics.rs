//! Scores ground-truth, time-shuffled and frozen clips with the quality, sync,
//! copy and grey-out metrics.

use rand::seq::SliceRandom;
use talkdiff::evalkit::{copy_score, greyout_score, is_greyed_out, psnr_video, ssim_video, sync_score};
use talkdiff::numcore::seeded_rng;
use talkdiff::pipeline::pose_priors;
use talkdiff::spriteworld::{generate_clip, Image};

fn report(name: &str, frames: &[Image], truth: &[Image], signal: &[f64]) -> talkdiff::Result<()> {
    let sync = sync_score(frames, signal)?;
    println!(
        "{name:>9}: PSNR {:6.2}  SSIM {:.3}  rho {:+.3} (lag {:+})  copy {:+.3}  grey-out {:.3}{}",
        psnr_video(frames, truth)?,
        ssim_video(frames, truth)?,
        sync.rho,
        sync.lag,
        copy_score(frames, &pose_priors(frames), signal)?,
        greyout_score(frames),
        if is_greyed_out(greyout_score(frames)) { " (greyed out)" } else { "" }
    );
    Ok(())
}

fn main() -> talkdiff::Result<()> {
    let clip = generate_clip(5, 60)?;
    let mut shuffled = clip.frames.clone();
    shuffled.shuffle(&mut seeded_rng(0, 0));
    let frozen = vec![clip.frames[0].clone(); clip.len()];
    report("truth", &clip.frames, &clip.frames, &clip.driving_signal)?;
    report("shuffled", &shuffled, &clip.frames, &clip.driving_signal)?;
    report("frozen", &frozen, &clip.frames, &clip.driving_signal)?;
    Ok(())
}
