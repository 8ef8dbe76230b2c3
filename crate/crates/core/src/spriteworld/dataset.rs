use std::collections::BTreeMap;
use std::fs;
use std::io::BufWriter;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::clip::{generate_clip, Clip, ClipParams, SAMPLES_PER_FRAME};
use super::image::{Image, IMAGE_SIZE};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
const SIGNAL_FILE: &str = "signal.f64";
const PARAMS_FILE: &str = "params.json";

/// Index of a dataset directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    /// `None` when the clips were not produced by [`generate_dataset`].
    pub dataset_seed: Option<u64>,
    pub clip_count: usize,
    pub frame_count: usize,
    pub image_size: usize,
    pub clip_seeds: Vec<u64>,
    /// Relative path to lowercase hex SHA-256 of the file bytes.
    pub checksums: BTreeMap<String, String>,
    /// Set for clips produced by a synthesizer rather than the renderer.
    #[serde(default)]
    pub generated: bool,
}

/// Seed of clip `index` in a dataset; a splitmix64 step keeps neighbours decorrelated.
pub fn clip_seed(dataset_seed: u64, index: usize) -> u64 {
    let mut z = dataset_seed ^ (index as u64).wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Generates `n_clips` clips in parallel; output is independent of thread count.
pub fn generate_dataset(dataset_seed: u64, n_clips: usize, n_frames: usize) -> Result<Vec<Clip>> {
    (0..n_clips).into_par_iter().map(|i| generate_clip(clip_seed(dataset_seed, i), n_frames)).collect()
}

fn clip_dir(index: usize) -> String {
    format!("clip{index:04}")
}

fn frame_file(index: usize) -> String {
    format!("f{index:04}.png")
}

fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

/// 8-bit RGB PNG bytes of `frame`.
pub fn encode_png(frame: &Image) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    {
        let mut enc = png::Encoder::new(BufWriter::new(&mut bytes), frame.width() as u32, frame.height() as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::Png(e.to_string()))?;
        writer.write_image_data(&frame.to_rgb8()).map_err(|e| Error::Png(e.to_string()))?;
    }
    Ok(bytes)
}

fn decode_png(bytes: &[u8]) -> Result<Image> {
    let decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    let mut reader = decoder.read_info().map_err(|e| Error::Png(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| Error::Png("image too large".into()))?];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Png(e.to_string()))?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Png(format!("expected 8-bit RGB, got {:?} {:?}", info.color_type, info.bit_depth)));
    }
    Image::from_rgb8(info.height as usize, info.width as usize, &buf[..info.buffer_size()])
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Writes clips and a checksummed manifest into `dir`, creating it if needed.
pub fn write_dataset(clips: &[Clip], dir: &Path, dataset_seed: Option<u64>) -> Result<Manifest> {
    write_clips(clips, dir, dataset_seed, false)
}

/// [`write_dataset`] for synthesized clips; the manifest carries `generated: true`.
pub fn write_generated_dataset(clips: &[Clip], dir: &Path) -> Result<Manifest> {
    write_clips(clips, dir, None, true)
}

fn write_clips(clips: &[Clip], dir: &Path, dataset_seed: Option<u64>, generated: bool) -> Result<Manifest> {
    let frame_count = clips.first().map_or(0, Clip::len);
    if clips.iter().any(|c| c.len() != frame_count) {
        return Err(Error::InvalidArgument("all clips in a dataset must have the same length".into()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut checksums = BTreeMap::new();
    for (ci, clip) in clips.iter().enumerate() {
        let rel_dir = clip_dir(ci);
        let abs_dir = dir.join(&rel_dir);
        fs::create_dir_all(&abs_dir).map_err(|e| Error::io(&abs_dir, e))?;
        let mut files: Vec<(String, Vec<u8>)> = Vec::with_capacity(clip.len() + 2);
        for (fi, frame) in clip.frames.iter().enumerate() {
            files.push((frame_file(fi), encode_png(frame)?));
        }
        files.push((SIGNAL_FILE.into(), clip.driving_signal.iter().flat_map(|v| v.to_le_bytes()).collect()));
        files.push((PARAMS_FILE.into(), serde_json::to_vec_pretty(&clip.params())?));
        for (name, bytes) in files {
            write_file(&abs_dir.join(&name), &bytes)?;
            checksums.insert(format!("{rel_dir}/{name}"), sha256_hex(&bytes));
        }
    }
    let manifest = Manifest {
        dataset_seed,
        clip_count: clips.len(),
        frame_count,
        image_size: IMAGE_SIZE,
        clip_seeds: clips.iter().map(|c| c.seed).collect(),
        checksums,
        generated,
    };
    write_file(&dir.join(MANIFEST_FILE), &serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Reads and verifies a dataset written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<(Manifest, Vec<Clip>)> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let raw = read_file(&manifest_path)?;
    let manifest: Manifest =
        serde_json::from_slice(&raw).map_err(|e| Error::Manifest(format!("{}: {e}", manifest_path.display())))?;
    if manifest.clip_seeds.len() != manifest.clip_count {
        return Err(Error::Manifest(format!(
            "clip_count {} but {} seeds listed",
            manifest.clip_count,
            manifest.clip_seeds.len()
        )));
    }
    let clips =
        (0..manifest.clip_count).into_par_iter().map(|ci| read_clip(dir, &manifest, ci)).collect::<Result<Vec<_>>>()?;
    Ok((manifest, clips))
}

/// Reads one `clipNNNN` directory, verified against its parent dataset's manifest.
pub fn read_clip_dir(path: &Path) -> Result<Clip> {
    let bad = || Error::Manifest(format!("{} is not a clipNNNN directory of a dataset", path.display()));
    let name = path.file_name().and_then(|n| n.to_str()).ok_or_else(bad)?;
    let ci: usize = name.strip_prefix("clip").and_then(|n| n.parse().ok()).ok_or_else(bad)?;
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest: Manifest = serde_json::from_slice(&read_file(&manifest_path)?)
        .map_err(|e| Error::Manifest(format!("{}: {e}", manifest_path.display())))?;
    if ci >= manifest.clip_count || manifest.clip_seeds.len() != manifest.clip_count {
        return Err(bad());
    }
    read_clip(dir, &manifest, ci)
}

fn read_clip(dir: &Path, manifest: &Manifest, ci: usize) -> Result<Clip> {
    let rel_dir = clip_dir(ci);
    let verified = |name: &str| -> Result<Vec<u8>> {
        let rel = format!("{rel_dir}/{name}");
        let expected =
            manifest.checksums.get(&rel).ok_or_else(|| Error::Manifest(format!("no checksum recorded for {rel}")))?;
        let bytes = read_file(&dir.join(&rel))?;
        if &sha256_hex(&bytes) != expected {
            return Err(Error::Checksum { clip: ci, file: rel });
        }
        Ok(bytes)
    };
    let frames =
        (0..manifest.frame_count).map(|fi| decode_png(&verified(&frame_file(fi))?)).collect::<Result<Vec<_>>>()?;
    let signal_bytes = verified(SIGNAL_FILE)?;
    if signal_bytes.len() != manifest.frame_count * SAMPLES_PER_FRAME * 8 {
        return Err(Error::Manifest(format!("{rel_dir}/{SIGNAL_FILE} has {} bytes", signal_bytes.len())));
    }
    let driving_signal =
        signal_bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8"))).collect();
    let params: ClipParams = serde_json::from_slice(&verified(PARAMS_FILE)?)?;
    if params.seed != manifest.clip_seeds[ci] || params.poses.len() != manifest.frame_count {
        return Err(Error::Manifest(format!("{rel_dir}/{PARAMS_FILE} disagrees with the manifest")));
    }
    Ok(Clip { frames, driving_signal, identity: params.identity, poses: params.poses, seed: params.seed })
}
