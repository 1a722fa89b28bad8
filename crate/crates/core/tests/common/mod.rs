#![allow(dead_code)]

use affedit_core::diffusion::{
    Autoencoder, AutoencoderConfig, DenoiserConfig, NoiseSchedule, ScheduleConfig, UNetDenoiser,
};
use affedit_core::mapper::{EmotionalMapper, MapperConfig};
use affedit_core::params::{DTYPE, ParamStore, device};
use candle_core::{Tensor, Var};
use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::from_vec(v, shape, &device()).unwrap()
}

pub fn values(t: &Tensor) -> Vec<f64> {
    t.flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

pub fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DTYPE).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap()[0]
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    values(a).iter().zip(values(b)).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Norm-wise relative error between backprop and central differences over
/// all elements of all vars taken together.
pub fn gradient_error(vars: &[Var], f: &dyn Fn() -> Tensor, h: f64) -> f64 {
    let loss = f();
    let grads = loss.backward().unwrap();
    let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
    for var in vars {
        let analytic = grads
            .get(var.as_tensor())
            .map(values)
            .unwrap_or_else(|| vec![0.0; var.elem_count()]);
        let shape = var.as_tensor().shape().clone();
        let base = values(var.as_tensor());
        for k in 0..base.len() {
            let mut probe = base.clone();
            probe[k] = base[k] + h;
            var.set(&Tensor::from_vec(probe.clone(), shape.clone(), &device()).unwrap()).unwrap();
            let up = scalar(&f());
            probe[k] = base[k] - h;
            var.set(&Tensor::from_vec(probe, shape.clone(), &device()).unwrap()).unwrap();
            let down = scalar(&f());
            let numeric = (up - down) / (2.0 * h);
            diff += (analytic[k] - numeric).powi(2);
            na += analytic[k].powi(2);
            nn += numeric.powi(2);
        }
        var.set(&Tensor::from_vec(base, shape, &device()).unwrap()).unwrap();
    }
    let scale = na.max(nn).sqrt();
    if scale < 1e-12 { diff.sqrt() } else { diff.sqrt() / scale }
}

pub fn tiny_mapper_config() -> MapperConfig {
    MapperConfig {
        depth: 1,
        heads: 2,
        semantic_channels: 4,
        request_channels: 4,
        tokens: 3,
        eps_norm: 1e-5,
        ffn_mult: 2,
    }
}

pub fn tiny_denoiser_config() -> DenoiserConfig {
    DenoiserConfig {
        latent_channels: 2,
        base_channels: 4,
        condition_channels: 4,
        heads: 2,
        groups: 2,
        time_dim: 8,
    }
}

pub fn tiny_autoencoder_config() -> AutoencoderConfig {
    AutoencoderConfig {
        image_size: 16,
        latent_channels: 2,
        hidden: 4,
        downsamples: 2,
    }
}

pub struct TinyModels {
    pub backbone: ParamStore,
    pub autoencoder: Autoencoder,
    pub denoiser: UNetDenoiser,
    pub mapper_store: ParamStore,
    pub mapper: EmotionalMapper,
    pub schedule: NoiseSchedule,
}

pub fn tiny_models(seed: u64) -> TinyModels {
    let mut backbone = ParamStore::new(seed, false);
    let mut root = backbone.root();
    let autoencoder = Autoencoder::new(&mut root.sub("autoencoder"), tiny_autoencoder_config()).unwrap();
    let denoiser = UNetDenoiser::new(&mut root.sub("denoiser"), tiny_denoiser_config()).unwrap();
    let mut mapper_store = ParamStore::new(seed + 1, true);
    let mapper = EmotionalMapper::new(&mut mapper_store.root().sub("mapper"), tiny_mapper_config()).unwrap();
    TinyModels {
        backbone,
        autoencoder,
        denoiser,
        mapper_store,
        mapper,
        schedule: NoiseSchedule::build(&ScheduleConfig::default()).unwrap(),
    }
}

/// A smooth two-colour test picture.
pub fn test_image(size: u32, seed: u64) -> RgbImage {
    let mut r = rng(seed);
    let a: [f64; 3] = [r.random(), r.random(), r.random()];
    let b: [f64; 3] = [r.random(), r.random(), r.random()];
    RgbImage::from_fn(size, size, |x, y| {
        let f = (x + y) as f64 / (2 * size - 2).max(1) as f64;
        Rgb([0, 1, 2].map(|c| ((a[c] * (1.0 - f) + b[c] * f) * 255.0).round() as u8))
    })
}

/// One line of the acceptance report.
pub struct Outcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl Outcome {
    pub fn new(name: &'static str, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name,
            passed,
            detail: detail.into(),
        }
    }

    pub fn line(&self) -> String {
        format!("[{}] {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

pub mod suites;
