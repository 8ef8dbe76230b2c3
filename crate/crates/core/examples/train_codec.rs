//! Trains the factor-4 autoencoder briefly and reports held-out round-trip quality.
//! Pass an epoch count as the first argument for a longer run.

use talkdiff::evalkit::ssim;
use talkdiff::latentcodec::{train_codec_with, CodecTrainConfig};
use talkdiff::spriteworld::{generate_dataset, Image};

fn frames(seed: u64, clips: usize, stride: usize) -> talkdiff::Result<Vec<Image>> {
    Ok(generate_dataset(seed, clips, 50)?.iter().flat_map(|c| c.frames.iter().step_by(stride).cloned()).collect())
}

fn main() -> talkdiff::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(2);
    let train = frames(1, 8, 4)?;
    let val = frames(2, 2, 5)?;
    let cfg = CodecTrainConfig { epochs, ..CodecTrainConfig::default() };
    let (codec, _) = train_codec_with(&train, &val, &cfg, |e, loss, psnr| {
        println!("epoch {e}: loss {loss:.5}, held-out {psnr:.2} dB")
    })?;
    let rec = codec.decode_batch(&codec.encode_batch(&val)?)?;
    let s = val.iter().zip(&rec).map(|(a, b)| ssim(a, b)).sum::<talkdiff::Result<f64>>()? / val.len() as f64;
    println!(
        "latent {:?} per frame; held-out PSNR {:.2} dB, SSIM {s:.4}",
        codec.encode(&val[0])?.shape(),
        codec.round_trip_psnr(&val)?
    );
    Ok(())
}
