use candle_core::Tensor;
use candle_nn::{Conv2d, GroupNorm, Linear, Module};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{MultiHeadAttention, timestep_embedding};
use crate::params::ParamBuilder;

/// Noise predictor `eps_theta(z_t, t, condition)`.
pub trait Denoiser: Send + Sync {
    /// `latents` is `(batch, C, H, W)`, `steps` has one entry per batch item
    /// and `condition` is `(batch, tokens, channels)`.
    fn predict_noise(&self, latents: &Tensor, steps: &[usize], condition: &Tensor) -> Result<Tensor>;
}

/// Predicts zero noise everywhere.
#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroDenoiser;

impl Denoiser for ZeroDenoiser {
    fn predict_noise(&self, latents: &Tensor, _steps: &[usize], _condition: &Tensor) -> Result<Tensor> {
        Ok(latents.zeros_like()?)
    }
}

impl<F> Denoiser for F
where
    F: Fn(&Tensor, &[usize], &Tensor) -> Result<Tensor> + Send + Sync,
{
    fn predict_noise(&self, latents: &Tensor, steps: &[usize], condition: &Tensor) -> Result<Tensor> {
        self(latents, steps, condition)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    pub latent_channels: usize,
    pub base_channels: usize,
    pub condition_channels: usize,
    pub heads: usize,
    pub groups: usize,
    pub time_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            latent_channels: 4,
            base_channels: 32,
            condition_channels: 64,
            heads: 4,
            groups: 8,
            time_dim: 64,
        }
    }
}

struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    time: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(b: &mut ParamBuilder<'_>, name: &str, cin: usize, cout: usize, cfg: &DenoiserConfig) -> Result<Self> {
        let mut b = b.sub(name);
        Ok(Self {
            norm1: b.group_norm("norm1", cfg.groups, cin)?,
            conv1: b.conv2d("conv1", cin, cout, 3, 1, 1)?,
            time: b.linear("time", cfg.time_dim, cout)?,
            norm2: b.group_norm("norm2", cfg.groups, cout)?,
            conv2: b.conv2d("conv2", cout, cout, 3, 1, 1)?,
            skip: if cin == cout {
                None
            } else {
                Some(b.conv2d("skip", cin, cout, 1, 1, 0)?)
            },
        })
    }

    fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        let t = self.time.forward(&temb.silu()?)?.unsqueeze(2)?.unsqueeze(3)?;
        let h = h.broadcast_add(&t)?;
        let h = self.conv2.forward(&self.norm2.forward(&h)?.silu()?)?;
        let skip = match &self.skip {
            Some(conv) => conv.forward(x)?,
            None => x.clone(),
        };
        Ok((skip + h)?)
    }
}

/// Spatial tokens attend to the conditioning sequence.
struct CrossAttention {
    norm: GroupNorm,
    attn: MultiHeadAttention,
}

impl CrossAttention {
    fn new(b: &mut ParamBuilder<'_>, name: &str, channels: usize, cfg: &DenoiserConfig) -> Result<Self> {
        let mut b = b.sub(name);
        Ok(Self {
            norm: b.group_norm("norm", cfg.groups, channels)?,
            attn: MultiHeadAttention::new(&mut b, "attn", channels, cfg.condition_channels, cfg.heads)?,
        })
    }

    fn forward(&self, x: &Tensor, condition: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let tokens = self
            .norm
            .forward(x)?
            .reshape((b, c, h * w))?
            .transpose(1, 2)?
            .contiguous()?;
        let out = self
            .attn
            .forward(&tokens, condition, None)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, c, h, w))?;
        Ok((x + out)?)
    }
}

/// A two-level U-Net with timestep-conditioned residual blocks and cross
/// attention to the conditioning sequence at both resolutions.
pub struct UNetDenoiser {
    config: DenoiserConfig,
    time1: Linear,
    time2: Linear,
    conv_in: Conv2d,
    res_hi: ResBlock,
    attn_hi: CrossAttention,
    down: Conv2d,
    res_lo: ResBlock,
    attn_lo: CrossAttention,
    mid: ResBlock,
    up: Conv2d,
    res_up: ResBlock,
    attn_up: CrossAttention,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

impl UNetDenoiser {
    pub fn new(b: &mut ParamBuilder<'_>, config: DenoiserConfig) -> Result<Self> {
        let c = config.base_channels;
        if c == 0 || c % config.groups != 0 || config.time_dim < 2 {
            return Err(Error::invalid_config(format!(
                "denoiser base channels ({c}) must be a positive multiple of groups ({})",
                config.groups
            )));
        }
        let cfg = &config;
        Ok(Self {
            time1: b.linear("time1", cfg.time_dim, cfg.time_dim)?,
            time2: b.linear("time2", cfg.time_dim, cfg.time_dim)?,
            conv_in: b.conv2d("conv_in", cfg.latent_channels, c, 3, 1, 1)?,
            res_hi: ResBlock::new(b, "res_hi", c, c, cfg)?,
            attn_hi: CrossAttention::new(b, "attn_hi", c, cfg)?,
            down: b.conv2d("down", c, 2 * c, 3, 2, 1)?,
            res_lo: ResBlock::new(b, "res_lo", 2 * c, 2 * c, cfg)?,
            attn_lo: CrossAttention::new(b, "attn_lo", 2 * c, cfg)?,
            mid: ResBlock::new(b, "mid", 2 * c, 2 * c, cfg)?,
            up: b.conv2d("up", 2 * c, c, 3, 1, 1)?,
            res_up: ResBlock::new(b, "res_up", 2 * c, c, cfg)?,
            attn_up: CrossAttention::new(b, "attn_up", c, cfg)?,
            norm_out: b.group_norm("norm_out", cfg.groups, c)?,
            conv_out: b.conv2d("conv_out", c, cfg.latent_channels, 3, 1, 1)?,
            config,
        })
    }

    pub fn config(&self) -> DenoiserConfig {
        self.config
    }
}

impl Denoiser for UNetDenoiser {
    fn predict_noise(&self, latents: &Tensor, steps: &[usize], condition: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = latents.dims4()?;
        if c != self.config.latent_channels || h % 2 != 0 || w % 2 != 0 {
            return Err(Error::invalid_input(format!(
                "denoiser expects [B, {}, even, even] latents, got {:?}",
                self.config.latent_channels,
                latents.dims()
            )));
        }
        if steps.len() != b || condition.dim(0)? != b || condition.dim(2)? != self.config.condition_channels {
            return Err(Error::Configuration(format!(
                "denoiser got {} steps and condition {:?} for a batch of {b}",
                steps.len(),
                condition.dims()
            )));
        }
        let temb = timestep_embedding(steps, self.config.time_dim)?;
        let temb = self.time2.forward(&self.time1.forward(&temb)?.silu()?)?;

        let x0 = self.conv_in.forward(latents)?;
        let x1 = self.attn_hi.forward(&self.res_hi.forward(&x0, &temb)?, condition)?;
        let x2 = self.down.forward(&x1)?;
        let x2 = self.attn_lo.forward(&self.res_lo.forward(&x2, &temb)?, condition)?;
        let x2 = self.mid.forward(&x2, &temb)?;
        let up = self.up.forward(&x2.upsample_nearest2d(h, w)?)?;
        let x3 = Tensor::cat(&[&up, &x1], 1)?;
        let x3 = self.attn_up.forward(&self.res_up.forward(&x3, &temb)?, condition)?;
        Ok(self.conv_out.forward(&self.norm_out.forward(&x3)?.silu()?)?)
    }
}
