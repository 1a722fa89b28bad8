//! Model assembly, checkpoints and the training procedures that tie the
//! modules together.

use std::path::{Path, PathBuf};

use candle_core::Tensor;
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use image::RgbImage;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{
    Autoencoder, AutoencoderConfig, AutoencoderTrainConfig, Denoiser, DenoiserConfig, NoiseSchedule, ScheduleConfig,
    UNetDenoiser, gaussian, train_autoencoder,
};
use crate::editing::{Conditioner, EditHandles};
use crate::error::{Error, Result};
use crate::image_io::images_to_batch;
use crate::mapper::{EmotionalMapper, MapperConfig};
use crate::nn::to_scalar;
use crate::params::{CheckpointHeader, ParamStore, latest_version_path, next_version_path};
use crate::spectrum::{SpectrumLogEntry, SpectrumSource, SpectrumTrainConfig, train_spectrum};
use crate::supervision::{
    LossRecord, LossWeights, MapperBatch, MapperTrainer, MllmClient, ResponseCache, SupervisorPrompt, collect_responses,
};
use crate::text::{TextEncoder, TextEncoderConfig, TokenizerConfig};
use crate::emotion::WheelGeometry;

pub const BACKBONE_KIND: &str = "backbone";
pub const SPECTRUM_KIND: &str = "spectrum-encoder";
pub const MAPPER_KIND: &str = "mapper";

/// Dimensions of every model in the pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub tokenizer: TokenizerConfig,
    pub autoencoder: AutoencoderConfig,
    pub denoiser: DenoiserConfig,
    pub mapper: MapperConfig,
    pub schedule: ScheduleConfig,
    pub text_heads: usize,
    pub text_layers: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let mapper = MapperConfig::default();
        Self {
            tokenizer: TokenizerConfig::default(),
            autoencoder: AutoencoderConfig::default(),
            denoiser: DenoiserConfig {
                condition_channels: mapper.semantic_channels,
                ..Default::default()
            },
            mapper,
            schedule: ScheduleConfig::default(),
            text_heads: 4,
            text_layers: 1,
        }
    }
}

impl ModelConfig {
    /// A small configuration for 32x32 images and 4x8x8 latents.
    pub fn toy() -> Self {
        let mapper = MapperConfig {
            depth: 2,
            heads: 4,
            semantic_channels: 32,
            request_channels: 16,
            tokens: 12,
            eps_norm: 1e-5,
            ffn_mult: 2,
        };
        Self {
            tokenizer: TokenizerConfig {
                vocab_size: 512,
                max_tokens: 12,
            },
            autoencoder: AutoencoderConfig {
                image_size: 32,
                latent_channels: 4,
                hidden: 16,
                downsamples: 2,
            },
            denoiser: DenoiserConfig {
                latent_channels: 4,
                base_channels: 32,
                condition_channels: 32,
                heads: 4,
                groups: 8,
                time_dim: 32,
            },
            mapper,
            schedule: ScheduleConfig::default(),
            text_heads: 4,
            text_layers: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.autoencoder.validate()?;
        self.mapper.validate()?;
        if self.mapper.tokens != self.tokenizer.max_tokens {
            return Err(Error::invalid_config("mapper tokens must equal the tokenizer's max_tokens"));
        }
        if self.denoiser.condition_channels != self.mapper.semantic_channels {
            return Err(Error::invalid_config("denoiser condition channels must equal mapper semantic channels"));
        }
        if self.denoiser.latent_channels != self.autoencoder.latent_channels {
            return Err(Error::invalid_config("denoiser and autoencoder latent channels differ"));
        }
        if self.autoencoder.latent_size() % 2 != 0 {
            return Err(Error::invalid_config("latent side must be even"));
        }
        Ok(())
    }

    fn text_config(&self, channels: usize) -> TextEncoderConfig {
        TextEncoderConfig {
            tokenizer: self.tokenizer,
            channels,
            heads: self.text_heads,
            layers: self.text_layers,
            ffn_mult: 2,
        }
    }

    pub fn semantic_encoder_config(&self) -> TextEncoderConfig {
        self.text_config(self.mapper.semantic_channels)
    }

    pub fn request_encoder_config(&self) -> TextEncoderConfig {
        self.text_config(self.mapper.request_channels)
    }
}

/// Autoencoder, denoiser and semantic text encoder in one store.
pub struct Backbone {
    pub store: ParamStore,
    pub autoencoder: Autoencoder,
    pub denoiser: UNetDenoiser,
    pub semantic: TextEncoder,
}

impl Backbone {
    pub fn new(cfg: &ModelConfig, seed: u64, trainable: bool) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(seed, trainable);
        let mut root = store.root();
        let autoencoder = Autoencoder::new(&mut root.sub("autoencoder"), cfg.autoencoder)?;
        let denoiser = UNetDenoiser::new(&mut root.sub("denoiser"), cfg.denoiser)?;
        let semantic = TextEncoder::new(&mut root.sub("semantic"), cfg.semantic_encoder_config())?;
        Ok(Self {
            store,
            autoencoder,
            denoiser,
            semantic,
        })
    }
}

/// The request encoder trained on the emotional spectrum.
pub struct SpectrumModel {
    pub store: ParamStore,
    pub encoder: TextEncoder,
}

impl SpectrumModel {
    pub fn new(cfg: &ModelConfig, seed: u64, trainable: bool) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(seed, trainable);
        let encoder = TextEncoder::new(&mut store.root().sub("encoder"), cfg.request_encoder_config())?;
        Ok(Self { store, encoder })
    }
}

pub struct MapperModel {
    pub store: ParamStore,
    pub mapper: EmotionalMapper,
}

impl MapperModel {
    pub fn new(cfg: &ModelConfig, seed: u64, trainable: bool) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(seed, trainable);
        let mapper = EmotionalMapper::new(&mut store.root().sub("mapper"), cfg.mapper)?;
        Ok(Self { store, mapper })
    }
}

/// Conditions on the semantic encoder alone, as during backbone training.
pub struct SemanticConditioner<'a>(pub &'a TextEncoder);

impl Conditioner for SemanticConditioner<'_> {
    fn condition(&self, text: &str) -> Result<Tensor> {
        Ok(self.0.encode_texts(&[text])?.squeeze(0)?)
    }
}

/// Request encoder, semantic encoder and mapper.
pub struct MappedConditioner<'a> {
    pub spectrum: &'a TextEncoder,
    pub semantic: &'a TextEncoder,
    pub mapper: &'a EmotionalMapper,
}

impl Conditioner for MappedConditioner<'_> {
    fn condition(&self, text: &str) -> Result<Tensor> {
        let r = self.spectrum.encode_texts(&[text])?;
        let s = self.semantic.encode_texts(&[text])?;
        Ok(self.mapper.forward_batch(&r, &s)?.squeeze(0)?)
    }
}

/// All trained models, frozen, ready for inference.
pub struct Pipeline {
    pub config: ModelConfig,
    pub schedule: NoiseSchedule,
    pub backbone: Backbone,
    pub spectrum: SpectrumModel,
    pub mapper: MapperModel,
}

impl Pipeline {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            schedule: NoiseSchedule::build(&config.schedule)?,
            backbone: Backbone::new(&config, seed, false)?,
            spectrum: SpectrumModel::new(&config, seed, false)?,
            mapper: MapperModel::new(&config, seed, false)?,
            config,
        })
    }

    /// Loads the latest checkpoint of each kind from `dir`.
    pub fn load(config: ModelConfig, dir: &Path) -> Result<Self> {
        let p = Self::new(config, 0)?;
        load_latest(&p.backbone.store, dir, BACKBONE_KIND)?;
        load_latest(&p.spectrum.store, dir, SPECTRUM_KIND)?;
        load_latest(&p.mapper.store, dir, MAPPER_KIND)?;
        Ok(p)
    }

    pub fn conditioner(&self) -> MappedConditioner<'_> {
        MappedConditioner {
            spectrum: &self.spectrum.encoder,
            semantic: &self.backbone.semantic,
            mapper: &self.mapper.mapper,
        }
    }

    pub fn handles<'a>(&'a self, conditioner: &'a dyn Conditioner) -> EditHandles<'a> {
        EditHandles {
            autoencoder: &self.backbone.autoencoder,
            denoiser: &self.backbone.denoiser,
            schedule: &self.schedule,
            conditioner,
        }
    }
}

/// Writes the next versioned checkpoint of `kind` into `dir`.
pub fn save_checkpoint(store: &ParamStore, dir: &Path, kind: &str, config: &ModelConfig) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = next_version_path(dir, kind)?;
    let header = CheckpointHeader::new(kind, store.seed(), serde_json::to_value(config)?);
    store.save(&path, &header)?;
    Ok(path)
}

pub fn load_latest(store: &ParamStore, dir: &Path, kind: &str) -> Result<PathBuf> {
    let path = latest_version_path(dir, kind)?
        .ok_or_else(|| Error::Checkpoint(format!("no `{kind}` checkpoint in {}", dir.display())))?;
    store.load(&path)?;
    Ok(path)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for DenoiserTrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 16,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BackboneLog {
    pub autoencoder: Vec<f64>,
    pub denoiser: Vec<f64>,
}

/// Trains the autoencoder, then the denoiser jointly with the semantic
/// encoder on captions using the mean squared noise error.
pub fn train_backbone(
    backbone: &Backbone,
    images: &[&RgbImage],
    captions: &[&str],
    ae_cfg: &AutoencoderTrainConfig,
    den_cfg: &DenoiserTrainConfig,
    schedule: &NoiseSchedule,
) -> Result<BackboneLog> {
    if images.len() != captions.len() || images.is_empty() {
        return Err(Error::invalid_input("one caption per image is required"));
    }
    if !backbone.store.is_trainable() {
        return Err(Error::invalid_config("backbone training needs a trainable store"));
    }
    let batch = images_to_batch(images)?;
    let ae_log = train_autoencoder(&backbone.autoencoder, &backbone.store, "autoencoder.", &batch, ae_cfg)?;
    let latents = encode_in_chunks(&backbone.autoencoder, &batch)?;

    let tok = backbone.semantic.tokenizer();
    let (ids, mask) = tok.encode_batch(captions)?;
    let vars: Vec<_> = backbone
        .store
        .named_vars()
        .filter(|(n, _)| n.starts_with("denoiser.") || n.starts_with("semantic."))
        .map(|(_, v)| v.clone())
        .collect();
    let mut opt = AdamW::new(
        vars,
        ParamsAdamW {
            lr: den_cfg.learning_rate,
            weight_decay: 0.0,
            ..Default::default()
        },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(den_cfg.seed);
    let n = images.len();
    let bsz = den_cfg.batch_size.min(n);
    let mut log = Vec::with_capacity(den_cfg.steps);
    for step in 0..den_cfg.steps {
        let idx: Vec<u32> = sample(&mut rng, n, bsz).into_iter().map(|i| i as u32).collect();
        let idx = Tensor::new(idx, latents.device())?;
        let z = latents.index_select(&idx, 0)?;
        let cond = backbone
            .semantic
            .forward(&ids.index_select(&idx, 0)?, &mask.index_select(&idx, 0)?)?;
        let steps: Vec<usize> = (0..bsz).map(|_| rng.random_range(1..=schedule.steps())).collect();
        let eps = gaussian(z.shape().clone(), &mut rng)?;
        let (a, b): (Vec<f64>, Vec<f64>) = steps.iter().map(|&t| schedule.forward_coefficients(t)).unzip();
        let a = Tensor::from_vec(a, (bsz, 1, 1, 1), z.device())?;
        let b = Tensor::from_vec(b, (bsz, 1, 1, 1), z.device())?;
        let z_t = (z.broadcast_mul(&a)? + eps.broadcast_mul(&b)?)?;
        let pred = backbone.denoiser.predict_noise(&z_t, &steps, &cond)?;
        let loss = (pred - &eps)?.sqr()?.mean_all()?;
        let value = to_scalar(&loss)?;
        if !value.is_finite() {
            return Err(Error::Divergence {
                step,
                detail: format!("denoiser loss is {value}"),
            });
        }
        opt.backward_step(&loss)?;
        log.push(value);
    }
    Ok(BackboneLog {
        autoencoder: ae_log,
        denoiser: log,
    })
}

fn encode_in_chunks(ae: &Autoencoder, images: &Tensor) -> Result<Tensor> {
    let n = images.dim(0)?;
    let mut parts = Vec::new();
    for start in (0..n).step_by(64) {
        let len = 64.min(n - start);
        parts.push(ae.encode(&images.narrow(0, start, len)?)?.detach());
    }
    Ok(Tensor::cat(&parts, 0)?)
}

/// Trains the request encoder; a thin wrapper binding the model's store.
pub fn build_spectrum(
    model: &SpectrumModel,
    sources: &[SpectrumSource],
    wheel: &WheelGeometry,
    cfg: &SpectrumTrainConfig,
) -> Result<Vec<SpectrumLogEntry>> {
    train_spectrum(sources, &model.encoder, &model.store, wheel, cfg)
}

/// One training image with its own description.
pub struct MapperSample<'a> {
    pub image: &'a RgbImage,
    pub text: &'a str,
}

/// Asks the supervisor about every image and encodes everything the mapper
/// step needs. Samples with a flagged response are skipped.
pub fn prepare_mapper_batch(
    samples: &[MapperSample<'_>],
    backbone: &Backbone,
    spectrum: &TextEncoder,
    prompts: &[SupervisorPrompt],
    client: &dyn MllmClient,
    cache: Option<&ResponseCache>,
) -> Result<(MapperBatch, usize)> {
    let mut kept = Vec::new();
    let mut responses = Vec::new();
    let mut skipped = 0;
    for s in samples {
        let r = collect_responses(s.image, prompts, client, cache)?;
        if r.iter().any(|x| x.flagged) {
            skipped += 1;
            continue;
        }
        kept.push(s);
        responses.push(r);
    }
    if kept.is_empty() {
        return Err(Error::EmptyBatch("every sample had a flagged supervisor response".into()));
    }
    let texts: Vec<&str> = kept.iter().map(|s| s.text).collect();
    let mut req = Vec::new();
    let mut sem = Vec::new();
    for chunk in texts.chunks(64) {
        req.push(spectrum.encode_texts(chunk)?.detach());
        sem.push(backbone.semantic.encode_texts(chunk)?.detach());
    }
    let r_count = prompts.len();
    let flat: Vec<&str> = responses.iter().flatten().map(|r| r.text.as_str()).collect();
    let mut resp = Vec::new();
    for chunk in flat.chunks(64) {
        resp.push(backbone.semantic.encode_texts(chunk)?.detach());
    }
    let resp = Tensor::cat(&resp, 0)?;
    let (_, n, c) = resp.dims3()?;
    let imgs: Vec<&RgbImage> = kept.iter().map(|s| s.image).collect();
    let latents = encode_in_chunks(&backbone.autoencoder, &images_to_batch(&imgs)?)?;
    Ok((
        MapperBatch {
            requests: Tensor::cat(&req, 0)?,
            semantics: Tensor::cat(&sem, 0)?,
            responses: resp.reshape((kept.len(), r_count, n, c))?,
            latents,
        },
        skipped,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapperTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub weights: LossWeights,
}

impl Default for MapperTrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 16,
            learning_rate: 5e-5,
            seed: 0,
            weights: LossWeights::default(),
        }
    }
}

/// Self-reconstruction training of the mapper with the backbone and the
/// request encoder frozen.
pub fn train_mapper(
    mapper: &MapperModel,
    backbone: &Backbone,
    spectrum: &SpectrumModel,
    schedule: &NoiseSchedule,
    data: &MapperBatch,
    cfg: &MapperTrainConfig,
) -> Result<Vec<LossRecord>> {
    let mut trainer = MapperTrainer::new(
        &mapper.mapper,
        &mapper.store,
        &[&backbone.store, &spectrum.store],
        &backbone.denoiser,
        schedule,
        cfg.weights,
        cfg.learning_rate,
        cfg.seed,
    )?;
    let n = data.len()?;
    let bsz = cfg.batch_size.min(n).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut log = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let idx: Vec<u32> = sample(&mut rng, n, bsz).into_iter().map(|i| i as u32).collect();
        log.push(trainer.train_step(&data.select(&idx)?)?);
    }
    Ok(log)
}
