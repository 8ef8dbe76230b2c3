//! Renders a small sprite dataset, writes it to a temporary directory and
//! reads it back with checksum verification.

use talkdiff::spriteworld::{generate_dataset, measure_aperture, read_dataset, write_dataset};

fn main() -> talkdiff::Result<()> {
    let clips = generate_dataset(7, 4, 24)?;
    let dir = std::env::temp_dir().join("talkdiff-example-dataset");
    let _ = std::fs::remove_dir_all(&dir);
    let manifest = write_dataset(&clips, &dir, Some(7))?;
    let (_, back) = read_dataset(&dir)?;
    assert_eq!(back, clips);
    println!("wrote {} clips x {} frames to {}", manifest.clip_count, manifest.frame_count, dir.display());
    for (i, clip) in clips.iter().enumerate() {
        let ap: Vec<f64> = clip.frames.iter().map(measure_aperture).collect();
        let (lo, hi) = ap.iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
        println!("clip {i}: seed {:#018x}, measured aperture {lo:.2}..{hi:.2}", clip.seed);
    }
    Ok(())
}
