use rand::Rng;
use serde::{Deserialize, Serialize};

use super::image::{luma, Image, IMAGE_SIZE};
use crate::error::{Error, Result};
use crate::numcore::seeded_rng;

/// Appearance factors of one speaker.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityParams {
    pub hue: f64,
    pub face_aspect: f64,
    pub eye_spacing: f64,
    pub skin_luma: f64,
}

impl IdentityParams {
    pub fn from_seed(seed: u64) -> Self {
        let mut rng = seeded_rng(seed, 0x1d);
        Self {
            hue: rng.random_range(0.0..1.0),
            face_aspect: rng.random_range(0.8..=1.2),
            eye_spacing: rng.random_range(0.2..=0.4),
            skin_luma: rng.random_range(0.4..=0.9),
        }
    }

    pub fn is_valid(&self) -> bool {
        (0.0..1.0).contains(&self.hue)
            && (0.8..=1.2).contains(&self.face_aspect)
            && (0.2..=0.4).contains(&self.eye_spacing)
            && (0.4..=0.9).contains(&self.skin_luma)
    }

    /// Skin colour: a pale tint of `hue`, scaled to the requested luma.
    pub fn skin_rgb(&self) -> [f64; 3] {
        let tint = hsv_to_rgb(self.hue, 0.45, 1.0);
        let k = self.skin_luma / luma(tint);
        tint.map(|c| (c * k).min(1.0))
    }
}

/// Head placement of one frame.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PoseParams {
    pub dx: f64,
    pub dy: f64,
    pub rot: f64,
}

impl PoseParams {
    pub const MAX_SHIFT: f64 = 3.0;
    pub const MAX_ROT: f64 = 0.15;

    pub fn is_valid(&self) -> bool {
        self.dx.abs() <= Self::MAX_SHIFT && self.dy.abs() <= Self::MAX_SHIFT && self.rot.abs() <= Self::MAX_ROT
    }
}

pub const BACKGROUND: [f64; 3] = [0.95, 0.95, 0.95];
pub const EYE_COLOR: [f64; 3] = [0.08, 0.08, 0.12];
pub const MOUTH_COLOR: [f64; 3] = [0.30, 0.03, 0.06];

const HEAD_RY: f64 = 12.5;
const HEAD_RX: f64 = 10.5;
const EYE_Y: f64 = -5.0;
const EYE_R: f64 = 1.6;
pub(crate) const MOUTH_Y: f64 = 7.0;
pub(crate) const MOUTH_RX: f64 = 5.0;
pub(crate) const MOUTH_RY_MAX: f64 = 3.5;
/// Subsamples per pixel along each axis.
const SUPERSAMPLE: usize = 2;

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h * 6.0).rem_euclid(6.0);
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

fn inside_ellipse(u: f64, v: f64, cu: f64, cv: f64, ru: f64, rv: f64) -> bool {
    if ru <= 0.0 || rv <= 0.0 {
        return false;
    }
    let a = (u - cu) / ru;
    let b = (v - cv) / rv;
    a * a + b * b <= 1.0
}

/// Draws one sprite: head, two eyes and a mouth whose vertical radius is
/// proportional to `aperture`. The mouth always lies in rows `16..32`.
pub fn render_frame(identity: &IdentityParams, pose: &PoseParams, aperture: f64) -> Result<Image> {
    if !(0.0..=1.0).contains(&aperture) {
        return Err(Error::InvalidArgument(format!("aperture {aperture} outside [0, 1]")));
    }
    let n = IMAGE_SIZE;
    let skin = identity.skin_rgb();
    let center = n as f64 / 2.0;
    let (cy, cx) = (center + pose.dy, center + pose.dx);
    let (sin, cos) = pose.rot.sin_cos();
    let head_rx = HEAD_RX * identity.face_aspect;
    let eye_dx = identity.eye_spacing * n as f64 / 2.0;
    let mouth_ry = MOUTH_RY_MAX * aperture;
    let step = 1.0 / SUPERSAMPLE as f64;
    let weight = 1.0 / (SUPERSAMPLE * SUPERSAMPLE) as f64;

    let mut img = Image::filled(n, n, [0.0; 3]);
    for py in 0..n {
        for px in 0..n {
            let mut acc = [0.0; 3];
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let y = py as f64 + (sy as f64 + 0.5) * step - cy;
                    let x = px as f64 + (sx as f64 + 0.5) * step - cx;
                    // Head-local coordinates.
                    let u = cos * x + sin * y;
                    let v = -sin * x + cos * y;
                    let color = if !inside_ellipse(u, v, 0.0, 0.0, head_rx, HEAD_RY) {
                        BACKGROUND
                    } else if inside_ellipse(u, v, 0.0, MOUTH_Y, MOUTH_RX, mouth_ry) {
                        MOUTH_COLOR
                    } else if inside_ellipse(u, v, -eye_dx, EYE_Y, EYE_R, EYE_R)
                        || inside_ellipse(u, v, eye_dx, EYE_Y, EYE_R, EYE_R)
                    {
                        EYE_COLOR
                    } else {
                        skin
                    };
                    for c in 0..3 {
                        acc[c] += color[c] * weight;
                    }
                }
            }
            img.set_pixel(py, px, acc);
        }
    }
    Ok(img)
}

/// Rows and columns searched for mouth pixels.
pub(crate) const MOUTH_SEARCH_ROWS: std::ops::Range<usize> = 16..32;
pub(crate) const MOUTH_SEARCH_COLS: std::ops::Range<usize> = 4..28;
const MOUTH_LUMA: f64 = 0.299 * MOUTH_COLOR[0] + 0.587 * MOUTH_COLOR[1] + 0.114 * MOUTH_COLOR[2];
const BACKGROUND_LUMA_FLOOR: f64 = 0.93;

/// Estimates the mouth opening of a frame.
///
/// Skin brightness is the median luma of non-background pixels in the lower
/// half; each pixel darker than skin contributes its fractional mouth
/// coverage, and the summed area is inverted through the ellipse area law
/// `area = π · rx · ry_max · aperture`.
pub fn measure_aperture(frame: &Image) -> f64 {
    let mut lumas: Vec<f64> = Vec::new();
    for y in MOUTH_SEARCH_ROWS {
        for x in MOUTH_SEARCH_COLS {
            if y < frame.height() && x < frame.width() {
                lumas.push(frame.luma(y, x));
            }
        }
    }
    let mut skin_candidates: Vec<f64> = lumas.iter().copied().filter(|&l| l < BACKGROUND_LUMA_FLOOR).collect();
    if skin_candidates.is_empty() {
        return 0.0;
    }
    skin_candidates.sort_by(f64::total_cmp);
    let skin = skin_candidates[skin_candidates.len() / 2];
    let contrast = skin - MOUTH_LUMA;
    if contrast < 0.05 {
        return 0.0;
    }
    let area: f64 = lumas.iter().map(|&l| ((skin - l) / contrast).clamp(0.0, 1.0)).sum();
    (area / (std::f64::consts::PI * MOUTH_RX * MOUTH_RY_MAX)).clamp(0.0, 1.0)
}

/// Zeroes the lower half (rows `H/2..H`), the region that contains the lips.
pub fn mask_lower_half(frame: &Image) -> Image {
    let mut out = frame.clone();
    let start = frame.height() / 2 * frame.width() * 3;
    out.data_mut()[start..].fill(0.0);
    out
}
