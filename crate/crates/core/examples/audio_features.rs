//! Groups a driving signal 4:1 per frame and runs the temporal audio encoder,
//! printing the attention window that conditions one frame.

use talkdiff::audiofeat::{audio_window, group_features, AudioEncoder, DEFAULT_WINDOW, RECEPTIVE_RADIUS};
use talkdiff::numcore::{seeded_rng, ParamSet};
use talkdiff::spriteworld::generate_clip;

fn main() -> talkdiff::Result<()> {
    let clip = generate_clip(3, 30)?;
    let grouped = group_features(&clip.driving_signal)?;
    let mut params = ParamSet::new();
    let encoder = AudioEncoder::new(&mut params, &mut seeded_rng(0, 0));
    let ea = encoder.encode_audio(&params, &grouped)?;
    println!("signal: {} samples -> {} frames; E_a {:?}", clip.driving_signal.len(), grouped.len(), ea.shape());
    println!("encoder receptive radius: {RECEPTIVE_RADIUS} frames");
    let w = audio_window(&ea, 0, DEFAULT_WINDOW)?;
    println!("window for frame 0 (edge padded): {:?}", w.shape());
    Ok(())
}
