//! Factor-4 image autoencoder between pixels and the diffusion latent space.
//!
//! Latents are standardized per channel with constants measured on the
//! training set, so `encode` and `decode` speak unit-scale latents.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalkit::psnr_images;
use crate::numcore::layers::{Conv2d, GroupNorm};
use crate::numcore::{cosine_lr, seeded_rng, AdamConfig, AdamState, Checkpoint, Graph, ParamSet, Tensor, Var};
use crate::spriteworld::{Image, CHANNELS};

pub const LATENT_CHANNELS: usize = 3;
pub const FACTOR: usize = 4;
const WIDE: usize = 32;
const GROUPS: usize = 8;
const DEC_WIDE: usize = 32;
const DEC_LOW_BLOCKS: usize = 2;
const DEC_HIGH_BLOCKS: usize = 1;
const LR_FLOOR: f64 = 0.05;
const MAE_WEIGHT: f64 = 0.1;
const MEAN_KEY: &str = "codec.latent_mean";
const STD_KEY: &str = "codec.latent_std";

/// `x + conv_b(silu(conv_a(silu(x))))`.
#[derive(Clone, Debug)]
struct Residual {
    na: Option<GroupNorm>,
    a: Conv2d,
    nb: Option<GroupNorm>,
    b: Conv2d,
}

impl Residual {
    fn new(
        params: &mut ParamSet,
        name: &str,
        c: usize,
        (ka, kb): (usize, usize),
        norm: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let a = Conv2d::new(params, &format!("{name}.a"), c, c, ka, 1, rng);
        let b = Conv2d::new(params, &format!("{name}.b"), c, c, kb, 1, rng);
        params.get_mut(b.weight).data_mut().iter_mut().for_each(|w| *w *= 0.5);
        let na = norm.then(|| GroupNorm::new(params, &format!("{name}.na"), c, GROUPS));
        let nb = norm.then(|| GroupNorm::new(params, &format!("{name}.nb"), c, GROUPS));
        Self { na, a, nb, b }
    }

    fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = match &self.na {
            Some(n) => n.forward(g, x)?,
            None => x,
        };
        let h = g.silu(h)?;
        let h = self.a.forward(g, h)?;
        let h = match &self.nb {
            Some(n) => n.forward(g, h)?,
            None => h,
        };
        let h = g.silu(h)?;
        let h = self.b.forward(g, h)?;
        g.add(x, h)
    }
}

#[derive(Clone, Debug)]
struct Encoder {
    stem: Conv2d,
    res1: Residual,
    down: Conv2d,
    res2: Residual,
    head: Conv2d,
    /// Linear per-block path, `16·3 -> 3` on each 4×4 block.
    patch: Conv2d,
}

#[derive(Clone, Debug)]
struct Decoder {
    stem: Conv2d,
    low: Vec<Residual>,
    up: Conv2d,
    high: Vec<Residual>,
    head: Conv2d,
    /// Linear per-block path, `3 -> 16·3`.
    patch: Conv2d,
}

/// `x + c` elementwise; pixels are centred around mid-grey inside the network.
fn shift(g: &mut Graph, x: Var, c: f64) -> Result<Var> {
    let k = Tensor::full(g.shape(x), c);
    let k = g.constant(k);
    g.add(x, k)
}

/// `[N, C, 2h, 2w] -> [N, 4C, h, w]`; channel `c·4 + 2·dy + dx` holds offset `(dy, dx)`.
fn space_to_depth(g: &mut Graph, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (n, c, h, w) = (s[0], s[1], s[2] / 2, s[3] / 2);
    let y = g.reshape(x, &[n, c, h, 2, w, 2])?;
    let y = g.permute(y, &[0, 1, 3, 5, 2, 4])?;
    g.reshape(y, &[n, 4 * c, h, w])
}

/// Inverse of [`space_to_depth`].
fn depth_to_space(g: &mut Graph, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (n, c, h, w) = (s[0], s[1] / 4, s[2], s[3]);
    let y = g.reshape(x, &[n, c, 2, 2, h, w])?;
    let y = g.permute(y, &[0, 1, 4, 2, 5, 3])?;
    g.reshape(y, &[n, c, 2 * h, 2 * w])
}

/// Autoencoder `E: H×W×3 -> H/4×W/4×3` and its mirror `D`. Parameters are named `codec.*`.
#[derive(Clone, Debug)]
pub struct Codec {
    params: ParamSet,
    enc: Encoder,
    dec: Decoder,
    mean: [f64; LATENT_CHANNELS],
    std: [f64; LATENT_CHANNELS],
}

/// Codec training settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodecTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for CodecTrainConfig {
    fn default() -> Self {
        Self { epochs: 20, batch_size: 2, lr: 1.5e-3, seed: 0 }
    }
}

/// Per-epoch training trace.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CodecHistory {
    pub train_loss: Vec<f64>,
    pub val_psnr: Vec<f64>,
    pub best_epoch: usize,
}

impl Codec {
    pub fn new(seed: u64) -> Self {
        let mut rng = seeded_rng(seed, 0xc0de);
        let mut p = ParamSet::new();
        let enc = Encoder {
            stem: Conv2d::new(&mut p, "codec.enc.stem", 4 * CHANNELS, WIDE, 3, 1, &mut rng),
            res1: Residual::new(&mut p, "codec.enc.res1", WIDE, (3, 1), false, &mut rng),
            down: Conv2d::new(&mut p, "codec.enc.down", WIDE, WIDE, 3, 2, &mut rng),
            // Pointwise at the latent resolution, so lower-half content reaches at most one row above it.
            res2: Residual::new(&mut p, "codec.enc.res2", WIDE, (1, 1), false, &mut rng),
            head: Conv2d::new(&mut p, "codec.enc.head", WIDE, LATENT_CHANNELS, 1, 1, &mut rng),
            patch: Conv2d::new(&mut p, "codec.enc.patch", 16 * CHANNELS, LATENT_CHANNELS, 1, 1, &mut rng),
        };
        let dec = Decoder {
            stem: Conv2d::new(&mut p, "codec.dec.stem", LATENT_CHANNELS, DEC_WIDE, 3, 1, &mut rng),
            low: (0..DEC_LOW_BLOCKS)
                .map(|i| Residual::new(&mut p, &format!("codec.dec.low{i}"), DEC_WIDE, (3, 3), true, &mut rng))
                .collect(),
            up: Conv2d::new(&mut p, "codec.dec.up", DEC_WIDE, WIDE, 3, 1, &mut rng),
            high: (0..DEC_HIGH_BLOCKS)
                .map(|i| Residual::new(&mut p, &format!("codec.dec.high{i}"), WIDE, (3, 3), true, &mut rng))
                .collect(),
            head: Conv2d::new(&mut p, "codec.dec.head", WIDE, 4 * CHANNELS, 3, 1, &mut rng),
            patch: Conv2d::new(&mut p, "codec.dec.patch", LATENT_CHANNELS, 16 * CHANNELS, 1, 1, &mut rng),
        };
        Self { params: p, enc, dec, mean: [0.0; LATENT_CHANNELS], std: [1.0; LATENT_CHANNELS] }
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn latent_stats(&self) -> ([f64; LATENT_CHANNELS], [f64; LATENT_CHANNELS]) {
        (self.mean, self.std)
    }

    /// Raw (unstandardized) latent, `[N, 3, H, W] -> [N, 3, H/4, W/4]`.
    fn encode_raw(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let e = &self.enc;
        let x = shift(g, x, -0.5)?;
        let h = space_to_depth(g, x)?;
        let blocks = space_to_depth(g, h)?;
        let linear = e.patch.forward(g, blocks)?;
        let h = e.stem.forward(g, h)?;
        let h = e.res1.forward(g, h)?;
        let h = g.silu(h)?;
        let h = e.down.forward(g, h)?;
        let h = e.res2.forward(g, h)?;
        let h = g.silu(h)?;
        let h = e.head.forward(g, h)?;
        g.add(h, linear)
    }

    /// Unclamped reconstruction from a raw latent.
    fn decode_raw(&self, g: &mut Graph, z: Var) -> Result<Var> {
        let d = &self.dec;
        let mut h = d.stem.forward(g, z)?;
        for r in &d.low {
            h = r.forward(g, h)?;
        }
        let h = g.silu(h)?;
        let h = g.upsample2x(h)?;
        let mut h = d.up.forward(g, h)?;
        for r in &d.high {
            h = r.forward(g, h)?;
        }
        let h = g.silu(h)?;
        let h = d.head.forward(g, h)?;
        let h = depth_to_space(g, h)?;
        let linear = d.patch.forward(g, z)?;
        let linear = depth_to_space(g, linear)?;
        let linear = depth_to_space(g, linear)?;
        let h = g.add(h, linear)?;
        shift(g, h, 0.5)
    }

    fn check_images(images: &Tensor) -> Result<()> {
        let s = images.shape();
        if s.len() != 4 || s[1] != CHANNELS || !s[2].is_multiple_of(FACTOR) || !s[3].is_multiple_of(FACTOR) || s[2] == 0
        {
            return Err(Error::shape("codec.encode", format!("expected [N, 3, 4h, 4w], got {s:?}")));
        }
        Ok(())
    }

    /// Standardized latents for a planar image batch `[N, 3, H, W]`.
    pub fn encode_tensor(&self, images: &Tensor) -> Result<Tensor> {
        Self::check_images(images)?;
        let mut g = Graph::inference(&self.params);
        let x = g.constant(images.clone());
        let z = self.encode_raw(&mut g, x)?;
        let mut z = g.value(z).clone();
        self.standardize(&mut z, false);
        Ok(z)
    }

    /// Images `[N, 3, 4h, 4w]` clamped to `[0, 1]` from standardized latents `[N, 3, h, w]`.
    pub fn decode_tensor(&self, latents: &Tensor) -> Result<Tensor> {
        let s = latents.shape();
        if s.len() != 4 || s[1] != LATENT_CHANNELS {
            return Err(Error::shape("codec.decode", format!("expected [N, 3, h, w], got {s:?}")));
        }
        let mut z = latents.clone();
        self.standardize(&mut z, true);
        let mut g = Graph::inference(&self.params);
        let zv = g.constant(z);
        let y = self.decode_raw(&mut g, zv)?;
        Ok(g.value(y).map(|v| v.clamp(0.0, 1.0)))
    }

    pub fn encode(&self, image: &Image) -> Result<Tensor> {
        self.encode_batch(std::slice::from_ref(image)).map(|z| z.select0(0))
    }

    pub fn decode(&self, latent: &Tensor) -> Result<Image> {
        let mut shape = vec![1];
        shape.extend_from_slice(latent.shape());
        let batch = latent.clone().reshape(&shape)?;
        Image::from_chw(&self.decode_tensor(&batch)?.select0(0))
    }

    pub fn encode_batch(&self, images: &[Image]) -> Result<Tensor> {
        self.encode_tensor(&images_to_tensor(images)?)
    }

    pub fn decode_batch(&self, latents: &Tensor) -> Result<Vec<Image>> {
        let y = self.decode_tensor(latents)?;
        (0..y.shape()[0]).map(|i| Image::from_chw(&y.select0(i))).collect()
    }

    fn standardize(&self, z: &mut Tensor, inverse: bool) {
        let s = z.shape().to_vec();
        let inner = s[2] * s[3];
        for (i, v) in z.data_mut().iter_mut().enumerate() {
            let c = (i / inner) % s[1];
            *v = if inverse { *v * self.std[c] + self.mean[c] } else { (*v - self.mean[c]) / self.std[c] };
        }
    }

    /// Measures per-channel latent statistics over `images`.
    pub fn fit_standardization(&mut self, images: &[Image]) -> Result<()> {
        self.mean = [0.0; LATENT_CHANNELS];
        self.std = [1.0; LATENT_CHANNELS];
        let mut sum = [0.0; LATENT_CHANNELS];
        let mut sq = [0.0; LATENT_CHANNELS];
        let mut count = 0usize;
        for chunk in images.chunks(64) {
            let z = self.encode_batch(chunk)?;
            let s = z.shape();
            let inner = s[2] * s[3];
            for (i, v) in z.data().iter().enumerate() {
                let c = (i / inner) % s[1];
                sum[c] += v;
                sq[c] += v * v;
            }
            count += s[0] * inner;
        }
        for c in 0..LATENT_CHANNELS {
            let m = sum[c] / count as f64;
            self.mean[c] = m;
            self.std[c] = (sq[c] / count as f64 - m * m).max(1e-12).sqrt();
        }
        Ok(())
    }

    /// Reconstruction loss `MSE + 0.1 · MAE` on a batch.
    fn loss(&self, g: &mut Graph, images: &Tensor) -> Result<Var> {
        let x = g.constant(images.clone());
        let z = self.encode_raw(g, x)?;
        let y = self.decode_raw(g, z)?;
        let mse = g.mse(y, x)?;
        let mae = g.mean_abs(y, x)?;
        let mae = g.scale(mae, MAE_WEIGHT)?;
        g.add(mse, mae)
    }

    /// Mean round-trip PSNR over `images`.
    pub fn round_trip_psnr(&self, images: &[Image]) -> Result<f64> {
        let mut total = 0.0;
        for chunk in images.chunks(64) {
            let rec = self.decode_batch(&self.encode_batch(chunk)?)?;
            for (a, b) in chunk.iter().zip(&rec) {
                total += psnr_images(a, b)?;
            }
        }
        Ok(total / images.len() as f64)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.insert_params(&self.params);
        ck.insert(MEAN_KEY, Tensor::new(&[LATENT_CHANNELS], self.mean.to_vec()).expect("stats shape"));
        ck.insert(STD_KEY, Tensor::new(&[LATENT_CHANNELS], self.std.to_vec()).expect("stats shape"));
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut codec = Self::new(0);
        ck.restore(&mut codec.params)?;
        let read = |key: &str| -> Result<[f64; LATENT_CHANNELS]> {
            ck.require(key)?
                .data()
                .try_into()
                .map_err(|_| Error::Checkpoint(format!("{key} must have {LATENT_CHANNELS} entries")))
        };
        codec.mean = read(MEAN_KEY)?;
        codec.std = read(STD_KEY)?;
        if codec.std.iter().any(|&s| s <= 0.0 || !s.is_finite()) {
            return Err(Error::Checkpoint("latent std must be positive".into()));
        }
        Ok(codec)
    }
}

pub fn images_to_tensor(images: &[Image]) -> Result<Tensor> {
    let planes: Vec<Tensor> = images.iter().map(Image::to_chw).collect();
    Tensor::stack(&planes.iter().collect::<Vec<_>>())
}

/// Trains a codec; the returned model carries the parameters of the best
/// validation epoch and latent statistics measured on `train`.
pub fn train_codec(train: &[Image], val: &[Image], cfg: &CodecTrainConfig) -> Result<(Codec, CodecHistory)> {
    train_codec_with(train, val, cfg, |_, _, _| {})
}

/// [`train_codec`] with a per-epoch callback `(epoch, train_loss, val_psnr)`.
pub fn train_codec_with(
    train: &[Image],
    val: &[Image],
    cfg: &CodecTrainConfig,
    mut on_epoch: impl FnMut(usize, f64, f64),
) -> Result<(Codec, CodecHistory)> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::InvalidArgument("codec training needs nonempty training and validation sets".into()));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 || cfg.lr.is_nan() || cfg.lr <= 0.0 {
        return Err(Error::InvalidArgument(format!("invalid codec config {cfg:?}")));
    }
    let mut codec = Codec::new(cfg.seed);
    let mut adam = AdamState::new(&codec.params, AdamConfig { lr: cfg.lr, ..AdamConfig::default() });
    let mut rng = seeded_rng(cfg.seed, 0x5eed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = CodecHistory::default();
    let mut best: Option<(f64, ParamSet)> = None;
    let total_steps = (cfg.epochs * train.len().div_ceil(cfg.batch_size)) as f64;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut batches) = (0.0, 0usize);
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<Image> = idx.iter().map(|&i| train[i].clone()).collect();
            let x = images_to_tensor(&batch)?;
            let (loss, grads) = {
                let mut g = Graph::train(&codec.params);
                let l = codec.loss(&mut g, &x)?;
                (g.value(l).item(), g.backward(l)?)
            };
            if !loss.is_finite() {
                return Err(Error::Divergence(format!("codec loss {loss} at epoch {epoch}")));
            }
            adam.config.lr = cosine_lr(cfg.lr, LR_FLOOR, adam.steps_taken() as f64 / total_steps);
            adam.step(&mut codec.params, &grads)?;
            total += loss;
            batches += 1;
        }
        let train_loss = total / batches as f64;
        let val_psnr = codec.round_trip_psnr(val)?;
        history.train_loss.push(train_loss);
        history.val_psnr.push(val_psnr);
        on_epoch(epoch, train_loss, val_psnr);
        if best.as_ref().is_none_or(|(p, _)| val_psnr > *p) {
            best = Some((val_psnr, codec.params.clone()));
            history.best_epoch = epoch;
        }
    }
    if let Some((_, params)) = best {
        codec.params = params;
    }
    codec.fit_standardization(train)?;
    Ok((codec, history))
}

#[cfg(test)]
mod tests;
