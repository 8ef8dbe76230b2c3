//! Driving-signal features: 4:1 grouping and the temporal encoder producing `E_a`.
//!
//! The encoder is an input projection followed by `L` residual same-padded
//! 1-D convolutions (kernel 5), so each output frame sees ±`2L` frames.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numcore::{Graph, ParamId, ParamSet, Tensor, Var};
use crate::spriteworld::SAMPLES_PER_FRAME;

pub const AUDIO_DIM: usize = 64;
pub const AUDIO_LAYERS: usize = 4;
pub const KERNEL: usize = 5;
pub const DEFAULT_WINDOW: usize = 4;
/// One-sided temporal receptive field of the encoder, in frames.
pub const RECEPTIVE_RADIUS: usize = AUDIO_LAYERS * (KERNEL / 2);

/// Per-frame groups of raw samples, stored as `[n_frames, 4]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupedFeatures(Vec<f64>);

impl GroupedFeatures {
    pub fn len(&self) -> usize {
        self.0.len() / SAMPLES_PER_FRAME
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn frame(&self, i: usize) -> &[f64] {
        &self.0[i * SAMPLES_PER_FRAME..(i + 1) * SAMPLES_PER_FRAME]
    }

    /// Samples in frame-major order.
    pub fn samples(&self) -> &[f64] {
        &self.0
    }

    /// `[4, 1, n]` layout consumed by the encoder.
    pub fn to_channels(&self) -> Tensor {
        let n = self.len();
        Tensor::from_fn(&[SAMPLES_PER_FRAME, 1, n], |i| {
            let (c, t) = (i / n, i % n);
            self.0[t * SAMPLES_PER_FRAME + c]
        })
    }
}

pub fn group_features(raw: &[f64]) -> Result<GroupedFeatures> {
    if !raw.len().is_multiple_of(SAMPLES_PER_FRAME) {
        return Err(Error::InvalidArgument(format!(
            "signal length {} is not a multiple of {SAMPLES_PER_FRAME}",
            raw.len()
        )));
    }
    Ok(GroupedFeatures(raw.to_vec()))
}

#[derive(Clone, Debug)]
struct TemporalConv {
    weight: ParamId,
    bias: ParamId,
}

impl TemporalConv {
    fn new(params: &mut ParamSet, name: &str, cin: usize, cout: usize, k: usize, rng: &mut ChaCha8Rng) -> Self {
        let weight = params.insert_uniform(format!("{name}.w"), &[cout, cin, 1, k], cin * k, rng);
        let bias = params.insert(format!("{name}.b"), Tensor::zeros(&[cout]));
        Self { weight, bias }
    }

    fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let pad = g.shape(w)[3] / 2;
        let y = g.conv2d_hw(x, w, 1, 0, pad)?;
        g.add_channel_bias(y, b)
    }

    fn ids(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

/// Temporal context network over grouped features. Parameters are named `audio.*`.
#[derive(Clone, Debug)]
pub struct AudioEncoder {
    input: TemporalConv,
    layers: Vec<TemporalConv>,
    frozen_layers: usize,
}

impl AudioEncoder {
    pub fn new(params: &mut ParamSet, rng: &mut ChaCha8Rng) -> Self {
        let input = TemporalConv::new(params, "audio.input", SAMPLES_PER_FRAME, AUDIO_DIM, 1, rng);
        let layers = (0..AUDIO_LAYERS)
            .map(|l| {
                let conv = TemporalConv::new(params, &format!("audio.layer{l}"), AUDIO_DIM, AUDIO_DIM, KERNEL, rng);
                // Residual branches start small so the stack begins near the identity.
                params.get_mut(conv.weight).data_mut().iter_mut().for_each(|w| *w *= 0.5);
                conv
            })
            .collect();
        Self { input, layers, frozen_layers: 0 }
    }

    pub fn frozen_layers(&self) -> usize {
        self.frozen_layers
    }

    /// Freezes layers with index `< k`. The input projection belongs to layer 0.
    pub fn set_frozen_layers(&mut self, params: &mut ParamSet, k: usize) -> Result<()> {
        if k > AUDIO_LAYERS {
            return Err(Error::InvalidArgument(format!("cannot freeze {k} of {AUDIO_LAYERS} audio layers")));
        }
        for id in self.input.ids() {
            params.set_frozen(id, k >= 1);
        }
        for (l, layer) in self.layers.iter().enumerate() {
            for id in layer.ids() {
                params.set_frozen(id, l < k);
            }
        }
        self.frozen_layers = k;
        Ok(())
    }

    /// Parameter ids of layer `l`, including the input projection for `l = 0`.
    pub fn layer_params(&self, l: usize) -> Vec<ParamId> {
        let mut ids = self.layers[l].ids().to_vec();
        if l == 0 {
            ids.extend(self.input.ids());
        }
        ids
    }

    pub fn all_params(&self) -> Vec<ParamId> {
        (0..AUDIO_LAYERS).flat_map(|l| self.layer_params(l)).collect()
    }

    /// `[B, 4, 1, n] -> [B, AUDIO_DIM, 1, n]`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let mut h = self.input.forward(g, x)?;
        for layer in &self.layers {
            let y = layer.forward(g, h)?;
            let y = g.silu(y)?;
            h = g.add(h, y)?;
        }
        Ok(h)
    }

    /// `E_a` for every frame as `[n, AUDIO_DIM]`; evaluation only.
    pub fn encode_audio(&self, params: &ParamSet, grouped: &GroupedFeatures) -> Result<Tensor> {
        if grouped.is_empty() {
            return Err(Error::InvalidArgument("cannot encode an empty signal".into()));
        }
        let n = grouped.len();
        let mut g = Graph::inference(params);
        let x = g.constant(grouped.to_channels().reshape(&[1, SAMPLES_PER_FRAME, 1, n])?);
        let h = self.forward(&mut g, x)?;
        let h = g.reshape(h, &[AUDIO_DIM, n])?;
        let t = g.permute(h, &[1, 0])?;
        Ok(g.value(t).clone())
    }
}

/// Row indices of the window `[t - w, t + w]` clamped into `0..len`.
pub fn window_indices(len: usize, t: usize, w: usize) -> Vec<usize> {
    (0..=2 * w).map(|i| (t + i).saturating_sub(w).min(len - 1)).collect()
}

/// Key/value sequence `[2w + 1, d]` conditioning frame `t`, edge-padded.
pub fn audio_window(ea: &Tensor, t: usize, w: usize) -> Result<Tensor> {
    let s = ea.shape();
    if s.len() != 2 || t >= s[0] {
        return Err(Error::InvalidArgument(format!("frame {t} outside audio features {s:?}")));
    }
    let d = s[1];
    let mut data = Vec::with_capacity((2 * w + 1) * d);
    for i in window_indices(s[0], t, w) {
        data.extend_from_slice(&ea.data()[i * d..(i + 1) * d]);
    }
    Tensor::new(&[2 * w + 1, d], data)
}
