use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::layers::{Conv2d, GroupNorm, Linear};
use crate::numcore::{Graph, ParamSet, Tensor, Var};

pub const TIME_EMBED_DIM: usize = 64;
pub const GROUPS: usize = 8;

/// Widths of the two resolution levels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_channels: usize,
    pub low_channels: usize,
    pub cond_dim: usize,
}

/// Sinusoidal embedding of integer steps, `[B, TIME_EMBED_DIM]`; first half sines.
pub fn timestep_embedding(ds: &[usize]) -> Tensor {
    let half = TIME_EMBED_DIM / 2;
    Tensor::from_fn(&[ds.len(), TIME_EMBED_DIM], |i| {
        let (b, j) = (i / TIME_EMBED_DIM, i % TIME_EMBED_DIM);
        let freq = (-(10_000f64.ln()) * (j % half) as f64 / half as f64).exp();
        let arg = ds[b] as f64 * freq;
        if j < half {
            arg.sin()
        } else {
            arg.cos()
        }
    })
}

/// GN-SiLU-conv, plus projected time embedding, GN-SiLU-conv, plus skip.
#[derive(Clone, Debug)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    time: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(p: &mut ParamSet, name: &str, cin: usize, cout: usize, temb: usize, rng: &mut ChaCha8Rng) -> Self {
        let conv2 = Conv2d::new(p, &format!("{name}.conv2"), cout, cout, 3, 1, rng);
        p.get_mut(conv2.weight).data_mut().iter_mut().for_each(|w| *w *= 0.3);
        Self {
            norm1: GroupNorm::new(p, &format!("{name}.norm1"), cin, GROUPS),
            conv1: Conv2d::new(p, &format!("{name}.conv1"), cin, cout, 3, 1, rng),
            time: Linear::new(p, &format!("{name}.time"), temb, cout, true, rng),
            norm2: GroupNorm::new(p, &format!("{name}.norm2"), cout, GROUPS),
            conv2,
            skip: (cin != cout).then(|| Conv2d::new(p, &format!("{name}.skip"), cin, cout, 1, 1, rng)),
        }
    }

    fn forward(&self, g: &mut Graph, x: Var, temb: Var) -> Result<Var> {
        let h = self.norm1.forward(g, x)?;
        let h = g.silu(h)?;
        let h = self.conv1.forward(g, h)?;
        let t = self.time.forward(g, temb)?;
        let h = g.add_per_sample_channel(h, t)?;
        let h = self.norm2.forward(g, h)?;
        let h = g.silu(h)?;
        let h = self.conv2.forward(g, h)?;
        let s = match &self.skip {
            Some(conv) => conv.forward(g, x)?,
            None => x,
        };
        g.add(s, h)
    }
}

/// Spatial positions attend over a conditioning sequence: `x + W_o·softmax(q kᵀ/√C) v`.
#[derive(Clone, Debug)]
struct CrossAttention {
    norm: GroupNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
}

impl CrossAttention {
    fn new(p: &mut ParamSet, name: &str, channels: usize, cond_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let out = Linear::new(p, &format!("{name}.out"), channels, channels, true, rng);
        p.get_mut(out.weight).data_mut().iter_mut().for_each(|w| *w *= 0.3);
        Self {
            norm: GroupNorm::new(p, &format!("{name}.norm"), channels, GROUPS),
            q: Linear::new(p, &format!("{name}.q"), channels, channels, false, rng),
            k: Linear::new(p, &format!("{name}.k"), cond_dim, channels, false, rng),
            v: Linear::new(p, &format!("{name}.v"), cond_dim, channels, false, rng),
            out,
        }
    }

    /// `x: [B, C, H, W]`, `cond: [B, L, cond_dim]`.
    fn forward(&self, g: &mut Graph, x: Var, cond: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
        let h = self.norm.forward(g, x)?;
        let h = g.reshape(h, &[b, c, hw])?;
        let h = g.permute(h, &[0, 2, 1])?;
        let q = self.q.forward(g, h)?;
        let k = self.k.forward(g, cond)?;
        let v = self.v.forward(g, cond)?;
        let a = g.scaled_dot_attention(q, k, v)?;
        let a = self.out.forward(g, a)?;
        let a = g.permute(a, &[0, 2, 1])?;
        let a = g.reshape(a, &s)?;
        g.add(x, a)
    }
}

/// Two-level conditional UNet (full and half resolution) with cross-attention at both levels.
#[derive(Clone, Debug)]
pub struct UNet {
    config: UNetConfig,
    time1: Linear,
    time2: Linear,
    conv_in: Conv2d,
    down_res: ResBlock,
    down_attn: CrossAttention,
    downsample: Conv2d,
    low_res: ResBlock,
    low_attn: CrossAttention,
    mid: ResBlock,
    up_res: ResBlock,
    up_attn: CrossAttention,
    out_norm: GroupNorm,
    conv_out: Conv2d,
}

/// Outputs of one pass: the prediction and the lowest-resolution (mid-block) activation.
pub struct UNetOutput {
    pub eps: Var,
    pub mid: Var,
}

impl UNet {
    pub fn new(p: &mut ParamSet, name: &str, config: UNetConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let (c1, c2, cd) = (config.base_channels, config.low_channels, config.cond_dim);
        if c1 % GROUPS != 0 || c2 % GROUPS != 0 || config.in_channels == 0 {
            return Err(Error::InvalidArgument(format!("UNet widths must be multiples of {GROUPS}: {config:?}")));
        }
        let temb = 2 * TIME_EMBED_DIM;
        let n = |s: &str| format!("{name}.{s}");
        Ok(Self {
            config,
            time1: Linear::new(p, &n("time1"), TIME_EMBED_DIM, temb, true, rng),
            time2: Linear::new(p, &n("time2"), temb, temb, true, rng),
            conv_in: Conv2d::new(p, &n("conv_in"), config.in_channels, c1, 3, 1, rng),
            down_res: ResBlock::new(p, &n("down_res"), c1, c1, temb, rng),
            down_attn: CrossAttention::new(p, &n("down_attn"), c1, cd, rng),
            downsample: Conv2d::new(p, &n("downsample"), c1, c2, 3, 2, rng),
            low_res: ResBlock::new(p, &n("low_res"), c2, c2, temb, rng),
            low_attn: CrossAttention::new(p, &n("low_attn"), c2, cd, rng),
            mid: ResBlock::new(p, &n("mid"), c2, c2, temb, rng),
            up_res: ResBlock::new(p, &n("up_res"), c2 + c1, c1, temb, rng),
            up_attn: CrossAttention::new(p, &n("up_attn"), c1, cd, rng),
            out_norm: GroupNorm::new(p, &n("out_norm"), c1, GROUPS),
            conv_out: Conv2d::zeroed(p, &n("conv_out"), c1, config.out_channels, 3, rng),
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    /// `x: [B, in_channels, H, W]` (H, W even), `ds`: per-sample steps, `cond: [B, L, cond_dim]`.
    pub fn forward(&self, g: &mut Graph, x: Var, ds: &[usize], cond: Var) -> Result<UNetOutput> {
        let s = g.shape(x).to_vec();
        if s.len() != 4
            || s[1] != self.config.in_channels
            || s[0] != ds.len()
            || !s[2].is_multiple_of(2)
            || !s[3].is_multiple_of(2)
        {
            return Err(Error::shape(
                "unet",
                format!("input {s:?} with {} steps, expected {} channels", ds.len(), self.config.in_channels),
            ));
        }
        let cs = g.shape(cond).to_vec();
        if cs.len() != 3 || cs[0] != s[0] || cs[2] != self.config.cond_dim {
            return Err(Error::shape("unet", format!("conditioning {cs:?} for batch {}", s[0])));
        }
        let t = g.constant(timestep_embedding(ds));
        let t = self.time1.forward(g, t)?;
        let t = g.silu(t)?;
        let t = self.time2.forward(g, t)?;
        let temb = g.silu(t)?;

        let h = self.conv_in.forward(g, x)?;
        let h = self.down_res.forward(g, h, temb)?;
        let skip = self.down_attn.forward(g, h, cond)?;
        let h = self.downsample.forward(g, skip)?;
        let h = self.low_res.forward(g, h, temb)?;
        let h = self.low_attn.forward(g, h, cond)?;
        let mid = self.mid.forward(g, h, temb)?;
        let h = g.upsample2x(mid)?;
        let h = g.concat(&[h, skip], 1)?;
        let h = self.up_res.forward(g, h, temb)?;
        let h = self.up_attn.forward(g, h, cond)?;
        let h = self.out_norm.forward(g, h)?;
        let h = g.silu(h)?;
        let eps = self.conv_out.forward(g, h)?;
        Ok(UNetOutput { eps, mid })
    }
}
