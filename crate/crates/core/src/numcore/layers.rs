//! Parameterized building blocks shared by the codec, the audio encoder and the UNet.

use rand_chacha::ChaCha8Rng;

use super::params::{Graph, ParamId, ParamSet};
use super::tape::Var;
use super::tensor::Tensor;
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let weight = params.insert_uniform(format!("{name}.w"), &[cout, cin, k, k], cin * k * k, rng);
        let bias = params.insert(format!("{name}.b"), Tensor::zeros(&[cout]));
        Self { weight, bias, stride, padding: k / 2 }
    }

    /// Same layer with weights and bias set to zero.
    pub fn zeroed(params: &mut ParamSet, name: &str, cin: usize, cout: usize, k: usize, rng: &mut ChaCha8Rng) -> Self {
        let conv = Self::new(params, name, cin, cout, k, 1, rng);
        params.get_mut(conv.weight).data_mut().fill(0.0);
        conv
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.conv2d(x, w, self.stride, self.padding)?;
        g.add_channel_bias(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(params: &mut ParamSet, name: &str, din: usize, dout: usize, bias: bool, rng: &mut ChaCha8Rng) -> Self {
        let weight = params.insert_uniform(format!("{name}.w"), &[din, dout], din, rng);
        let bias = bias.then(|| params.insert(format!("{name}.b"), Tensor::zeros(&[dout])));
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new(params: &mut ParamSet, name: &str, channels: usize, groups: usize) -> Self {
        let gamma = params.insert(format!("{name}.gamma"), Tensor::full(&[channels], 1.0));
        let beta = params.insert(format!("{name}.beta"), Tensor::zeros(&[channels]));
        Self { gamma, beta, groups }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.group_norm(x, gamma, beta, self.groups)
    }
}
