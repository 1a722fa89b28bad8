use candle_core::Tensor;
use candle_nn::{AdamW, Conv2d, Module, Optimizer, ParamsAdamW};
use image::RgbImage;
use rand::SeedableRng;
use rand::seq::index::sample;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::LatentCode;
use crate::error::{Error, Result};
use crate::image_io::{image_to_tensor, tensor_to_image};
use crate::nn::to_scalar;
use crate::params::{Init, ParamBuilder, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AutoencoderConfig {
    pub image_size: usize,
    pub latent_channels: usize,
    pub hidden: usize,
    /// Number of stride-2 stages; the latent side is `image_size >> downsamples`.
    pub downsamples: usize,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            latent_channels: 4,
            hidden: 32,
            downsamples: 2,
        }
    }
}

impl AutoencoderConfig {
    pub fn latent_size(&self) -> usize {
        self.image_size >> self.downsamples
    }

    pub fn latent_shape(&self) -> (usize, usize, usize) {
        (self.latent_channels, self.latent_size(), self.latent_size())
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.image_size % (1 << self.downsamples) != 0 {
            return Err(Error::invalid_config(format!(
                "image size {} must be divisible by 2^{}",
                self.image_size, self.downsamples
            )));
        }
        if self.latent_channels == 0 || self.hidden == 0 {
            return Err(Error::invalid_config("autoencoder channels must be positive"));
        }
        Ok(())
    }
}

/// Convolutional encoder/decoder pair. Latents are multiplied by a stored
/// scale so that they have roughly unit variance on the training data.
pub struct Autoencoder {
    config: AutoencoderConfig,
    enc_in: Conv2d,
    enc_down: Vec<Conv2d>,
    enc_out: Conv2d,
    dec_in: Conv2d,
    dec_up: Vec<Conv2d>,
    dec_out: Conv2d,
    latent_scale: Tensor,
}

impl Autoencoder {
    pub fn new(b: &mut ParamBuilder<'_>, config: AutoencoderConfig) -> Result<Self> {
        config.validate()?;
        let h = config.hidden;
        let width = |i: usize| h << i.min(2);
        let enc_in = b.conv2d("enc_in", 3, h, 3, 1, 1)?;
        let mut enc_down = Vec::new();
        for i in 0..config.downsamples {
            enc_down.push(b.conv2d(&format!("enc_down.{i}"), width(i), width(i + 1), 3, 2, 1)?);
        }
        let top = width(config.downsamples);
        let enc_out = b.conv2d("enc_out", top, config.latent_channels, 3, 1, 1)?;
        let dec_in = b.conv2d("dec_in", config.latent_channels, top, 3, 1, 1)?;
        let mut dec_up = Vec::new();
        for i in (0..config.downsamples).rev() {
            dec_up.push(b.conv2d(&format!("dec_up.{i}"), width(i + 1), width(i), 3, 1, 1)?);
        }
        let dec_out = b.conv2d("dec_out", h, 3, 3, 1, 1)?;
        let latent_scale = b.tensor("latent_scale", 1, Init::Ones)?;
        Ok(Self {
            config,
            enc_in,
            enc_down,
            enc_out,
            dec_in,
            dec_up,
            dec_out,
            latent_scale,
        })
    }

    pub fn config(&self) -> AutoencoderConfig {
        self.config
    }

    fn check_images(&self, images: &Tensor) -> Result<()> {
        let s = self.config.image_size;
        let (_, c, h, w) = images.dims4()?;
        if (c, h, w) != (3, s, s) {
            return Err(Error::invalid_input(format!(
                "autoencoder expects images [B, 3, {s}, {s}], got {:?}",
                images.dims()
            )));
        }
        Ok(())
    }

    /// `(batch, 3, S, S)` in [-1, 1] to scaled latents.
    pub fn encode(&self, images: &Tensor) -> Result<Tensor> {
        self.check_images(images)?;
        let mut x = self.enc_in.forward(images)?.silu()?;
        for conv in &self.enc_down {
            x = conv.forward(&x)?.silu()?;
        }
        Ok(self.enc_out.forward(&x)?.broadcast_mul(&self.latent_scale)?)
    }

    pub fn decode(&self, latents: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = latents.dims4()?;
        if (c, h, w) != self.config.latent_shape() {
            return Err(Error::invalid_input(format!(
                "autoencoder expects latents {:?}, got {:?}",
                self.config.latent_shape(),
                latents.dims()
            )));
        }
        let mut x = self.dec_in.forward(&latents.broadcast_div(&self.latent_scale)?)?.silu()?;
        for conv in &self.dec_up {
            let (_, _, h, w) = x.dims4()?;
            x = conv.forward(&x.upsample_nearest2d(h * 2, w * 2)?)?.silu()?;
        }
        Ok(self.dec_out.forward(&x)?.tanh()?)
    }

    pub fn encode_image(&self, image: &RgbImage) -> Result<LatentCode> {
        let t = image_to_tensor(image)?.unsqueeze(0)?;
        LatentCode::new(self.encode(&t)?.squeeze(0)?)
    }

    /// Decoded tensor `(3, S, S)` for one latent.
    pub fn decode_latent(&self, z: &LatentCode) -> Result<Tensor> {
        Ok(self.decode(&z.tensor().unsqueeze(0)?)?.squeeze(0)?)
    }

    pub fn decode_to_image(&self, z: &LatentCode) -> Result<RgbImage> {
        tensor_to_image(&self.decode_latent(z)?)
    }

    pub fn latent_scale(&self) -> Result<f64> {
        Ok(self.latent_scale.to_vec1::<f64>()?[0])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AutoencoderTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for AutoencoderTrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 16,
            learning_rate: 2e-3,
            seed: 0,
        }
    }
}

/// Reconstruction training (mean squared error), followed by calibration of
/// the latent scale to unit standard deviation over `images`. Returns the
/// loss per step. `prefix` selects the autoencoder's parameters in `store`.
pub fn train_autoencoder(
    ae: &Autoencoder,
    store: &ParamStore,
    prefix: &str,
    images: &Tensor,
    config: &AutoencoderTrainConfig,
) -> Result<Vec<f64>> {
    ae.check_images(images)?;
    let vars: Vec<_> = store
        .named_vars()
        .filter(|(n, _)| n.starts_with(prefix) && !n.ends_with("latent_scale"))
        .map(|(_, v)| v.clone())
        .collect();
    if vars.is_empty() {
        return Err(Error::invalid_config(format!("no trainable parameters under `{prefix}`")));
    }
    let scale_name = format!("{prefix}latent_scale");
    store.set(&scale_name, &Tensor::ones(1, crate::params::DTYPE, &crate::params::device())?)?;
    let n = images.dim(0)?;
    let mut opt = AdamW::new(
        vars,
        ParamsAdamW {
            lr: config.learning_rate,
            weight_decay: 0.0,
            ..Default::default()
        },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut log = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let idx: Vec<u32> = sample(&mut rng, n, config.batch_size.min(n))
            .into_iter()
            .map(|i| i as u32)
            .collect();
        let batch = images.index_select(&Tensor::new(idx, images.device())?, 0)?;
        let recon = ae.decode(&ae.encode(&batch)?)?;
        let loss = (recon - &batch)?.sqr()?.mean_all()?;
        let value = to_scalar(&loss)?;
        if !value.is_finite() {
            return Err(Error::Divergence {
                step,
                detail: format!("reconstruction loss is {value}"),
            });
        }
        opt.backward_step(&loss)?;
        log.push(value);
    }
    let mut sum = 0.0;
    let mut sum2 = 0.0;
    let mut count = 0usize;
    for start in (0..n).step_by(64) {
        let len = 64.min(n - start);
        let z = ae.encode(&images.narrow(0, start, len)?)?.detach().flatten_all()?.to_vec1::<f64>()?;
        count += z.len();
        sum += z.iter().sum::<f64>();
        sum2 += z.iter().map(|v| v * v).sum::<f64>();
    }
    let mean = sum / count as f64;
    let std = (sum2 / count as f64 - mean * mean).max(1e-12).sqrt();
    store.set(&scale_name, &Tensor::new(&[1.0 / std], &crate::params::device())?)?;
    Ok(log)
}
