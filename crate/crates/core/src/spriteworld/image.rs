use crate::error::{Error, Result};
use crate::numcore::Tensor;

pub const IMAGE_SIZE: usize = 32;
pub const CHANNELS: usize = 3;

/// RGB image in `[0, 1]`, stored row-major as `[height][width][channel]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * CHANNELS {
            return Err(Error::shape(
                "image",
                format!("{height}x{width}x3 needs {} values", height * width * CHANNELS),
            ));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * CHANNELS;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * CHANNELS;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// ITU-R 601 luma of one pixel.
    pub fn luma(&self, y: usize, x: usize) -> f64 {
        luma(self.pixel(y, x))
    }

    /// Rounds every value to the nearest multiple of 1/255.
    pub fn quantized(&self) -> Self {
        Self { data: self.data.iter().map(|&v| to_u8(v) as f64 / 255.0).collect(), ..self.clone() }
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| to_u8(v)).collect()
    }

    pub fn from_rgb8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(height, width, bytes.iter().map(|&b| b as f64 / 255.0).collect())
    }

    /// `[3, H, W]` planar tensor.
    pub fn to_chw(&self) -> Tensor {
        let (h, w) = (self.height, self.width);
        Tensor::from_fn(&[CHANNELS, h, w], |i| {
            let (c, rest) = (i / (h * w), i % (h * w));
            self.data[rest * CHANNELS + c]
        })
    }

    /// Inverse of [`Image::to_chw`]; values are clamped into `[0, 1]`.
    pub fn from_chw(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        if s.len() != 3 || s[0] != CHANNELS {
            return Err(Error::shape("image", format!("expected [3, H, W], got {s:?}")));
        }
        let (h, w) = (s[1], s[2]);
        let mut data = vec![0.0; h * w * CHANNELS];
        for c in 0..CHANNELS {
            for p in 0..h * w {
                data[p * CHANNELS + c] = t.data()[c * h * w + p].clamp(0.0, 1.0);
            }
        }
        Self::new(h, w, data)
    }
}

pub fn luma(rgb: [f64; 3]) -> f64 {
    0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}
