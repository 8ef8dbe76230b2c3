use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spriteworld::{group_means, measure_aperture, Image};

/// PSNR reported for identical inputs.
pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 8;
pub const SSIM_C1: f64 = 1e-4;
pub const SSIM_C2: f64 = 9e-4;
pub const MAX_LAG: i64 = 5;
pub const MIN_SYNC_FRAMES: usize = 12;

/// Rows and columns of the lip region used by [`greyout_score`].
pub const LIP_ROWS: std::ops::Range<usize> = 19..29;
pub const LIP_COLS: std::ops::Range<usize> = 9..23;

/// Mean ground-truth [`greyout_score`] over the calibration set.
pub const GREYOUT_REFERENCE: f64 = 0.241_219_185_612_443_35;
pub const GREYOUT_FRACTION: f64 = 0.3;

/// `10·log10(1 / MSE)` over flat value slices, capped at [`PSNR_CAP`].
pub fn psnr(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::shape("psnr", format!("{} vs {} values", a.len(), b.len())));
    }
    let mse = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

fn same_dims(op: &'static str, a: &Image, b: &Image) -> Result<()> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(Error::shape(op, format!("{}x{} vs {}x{}", a.height(), a.width(), b.height(), b.width())));
    }
    Ok(())
}

pub fn psnr_images(a: &Image, b: &Image) -> Result<f64> {
    same_dims("psnr", a, b)?;
    psnr(a.data(), b.data())
}

/// PSNR over a whole sequence, pooling the squared error of all frames.
pub fn psnr_video(a: &[Image], b: &[Image]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("psnr", format!("{} vs {} frames", a.len(), b.len())));
    }
    for (x, y) in a.iter().zip(b) {
        same_dims("psnr", x, y)?;
    }
    let flat = |v: &[Image]| v.iter().flat_map(|f| f.data().iter().copied()).collect::<Vec<_>>();
    psnr(&flat(a), &flat(b))
}

fn luma_plane(img: &Image) -> Vec<f64> {
    (0..img.height()).flat_map(|y| (0..img.width()).map(move |x| img.luma(y, x))).collect()
}

/// Luma SSIM averaged over every `8×8` window (stride 1, uniform weights,
/// population moments). Images smaller than a window use one window.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    same_dims("ssim", a, b)?;
    let (h, w) = (a.height(), a.width());
    let (la, lb) = (luma_plane(a), luma_plane(b));
    let (wh, ww) = (SSIM_WINDOW.min(h), SSIM_WINDOW.min(w));
    let n = (wh * ww) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=h - wh {
        for x0 in 0..=w - ww {
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for y in y0..y0 + wh {
                for x in x0..x0 + ww {
                    let (p, q) = (la[y * w + x], lb[y * w + x]);
                    sa += p;
                    sb += q;
                    saa += p * p;
                    sbb += q * q;
                    sab += p * q;
                }
            }
            let (ma, mb) = (sa / n, sb / n);
            let va = saa / n - ma * ma;
            let vb = sbb / n - mb * mb;
            let cov = sab / n - ma * mb;
            total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

pub fn ssim_video(a: &[Image], b: &[Image]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::shape("ssim", format!("{} vs {} frames", a.len(), b.len())));
    }
    let mut total = 0.0;
    for (x, y) in a.iter().zip(b) {
        total += ssim(x, y)?;
    }
    Ok(total / a.len() as f64)
}

/// Pearson correlation; `None` when either side has zero variance or fewer than 2 points.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx <= 1e-18 || syy <= 1e-18 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Peak lagged correlation between measured mouth opening and the driving signal.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyncScore {
    pub rho: f64,
    /// Positive when the frames trail the signal.
    pub lag: i64,
    pub degenerate: bool,
}

/// Correlation of `a[t + lag]` with `b[t]` over the overlap.
pub fn lagged_pearson(a: &[f64], b: &[f64], lag: i64) -> Option<f64> {
    let n = a.len().min(b.len()) as i64;
    let lo = 0.max(-lag);
    let hi = n.min(n - lag);
    if hi - lo < 2 {
        return None;
    }
    let xs: Vec<f64> = (lo..hi).map(|t| a[(t + lag) as usize]).collect();
    let ys: Vec<f64> = (lo..hi).map(|t| b[t as usize]).collect();
    pearson(&xs, &ys)
}

pub fn apertures(frames: &[Image]) -> Vec<f64> {
    frames.iter().map(measure_aperture).collect()
}

/// Sync score of frames against their raw (4×-rate) driving signal.
pub fn sync_score(frames: &[Image], driving_signal: &[f64]) -> Result<SyncScore> {
    if frames.len() < MIN_SYNC_FRAMES {
        return Err(Error::InvalidArgument(format!(
            "sync score needs at least {MIN_SYNC_FRAMES} frames, got {}",
            frames.len()
        )));
    }
    let target = group_means(driving_signal);
    if target.len() != frames.len() {
        return Err(Error::shape("sync_score", format!("{} frames vs {} signal groups", frames.len(), target.len())));
    }
    Ok(sync_from_apertures(&apertures(frames), &target))
}

/// [`sync_score`] on already measured per-frame apertures.
pub fn sync_from_apertures(measured: &[f64], target: &[f64]) -> SyncScore {
    let degenerate = SyncScore { rho: 0.0, lag: 0, degenerate: true };
    if pearson(measured, measured).is_none() {
        return degenerate;
    }
    let mut best: Option<SyncScore> = None;
    for lag in -MAX_LAG..=MAX_LAG {
        let rho = lagged_pearson(measured, target, lag).unwrap_or(0.0);
        // Ties favour the smallest offset.
        let better = best.is_none_or(|b| rho > b.rho || (rho == b.rho && lag.abs() < b.lag.abs()));
        if better {
            best = Some(SyncScore { rho, lag, degenerate: false });
        }
    }
    best.unwrap_or(degenerate)
}

/// `corr(generated, pose prior) − corr(generated, driving signal)` on apertures;
/// positive when the output follows what it could copy rather than the signal.
pub fn copy_score(generated: &[Image], pose_priors: &[Image], driving_signal: &[f64]) -> Result<f64> {
    let target = group_means(driving_signal);
    if generated.len() != pose_priors.len() || generated.len() != target.len() {
        return Err(Error::shape(
            "copy_score",
            format!("{} generated, {} priors, {} signal groups", generated.len(), pose_priors.len(), target.len()),
        ));
    }
    Ok(copy_from_apertures(&apertures(generated), &apertures(pose_priors), &target))
}

pub fn copy_from_apertures(generated: &[f64], priors: &[f64], target: &[f64]) -> f64 {
    if pearson(generated, generated).is_none() {
        return 0.0;
    }
    pearson(generated, priors).unwrap_or(0.0) - pearson(generated, target).unwrap_or(0.0)
}

/// Standard deviation of luma over the lip region of one frame.
pub fn lip_contrast(frame: &Image) -> f64 {
    let vals: Vec<f64> = LIP_ROWS.flat_map(|y| LIP_COLS.map(move |x| (y, x))).map(|(y, x)| frame.luma(y, x)).collect();
    let n = vals.len() as f64;
    let m = vals.iter().sum::<f64>() / n;
    (vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).sqrt()
}

/// Mean per-frame lip-region contrast; 0 for an empty sequence.
pub fn greyout_score(frames: &[Image]) -> f64 {
    if frames.is_empty() {
        return 0.0;
    }
    frames.iter().map(lip_contrast).sum::<f64>() / frames.len() as f64
}

pub fn is_greyed_out(score: f64) -> bool {
    score < GREYOUT_FRACTION * GREYOUT_REFERENCE
}
