//! Mapper training against multimodal supervisor answers: the sentiment
//! alignment loss, the noise-prediction loss and the frozen-backbone training
//! step.

mod client;

pub use client::{
    Factor, HttpChatClient, HttpClientConfig, MllmClient, ResponseCache, StubSupervisor, SupervisorPrompt,
    SupervisorResponse, cache_key, collect_responses, collect_responses_many, default_prompts, describe_by_color,
    image_digest,
};

use std::path::Path;

use candle_core::Tensor;
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{Denoiser, LatentCode, NoiseSchedule, gaussian};
use crate::error::{Error, Result};
use crate::mapper::EmotionalMapper;
use crate::nn::{batched_l2, to_scalar};
use crate::params::{ParamStore, device};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub beta: f64,
    /// Square each alignment distance instead of using the plain norm.
    #[serde(default)]
    pub squared_alignment: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            beta: 10.0,
            squared_alignment: false,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::invalid_config(format!("beta must be positive, got {}", self.beta)));
        }
        Ok(())
    }
}

/// Batched alignment loss: `mapped` is `(B, N, C)`, `responses` is
/// `(B, R, N, C)`. Per sample the distances to all `R` responses are summed;
/// the result is the mean over the batch.
pub fn alignment_loss_batch(mapped: &Tensor, responses: &Tensor, squared: bool) -> Result<Tensor> {
    let (b, r, n, c) = responses.dims4()?;
    if mapped.dims() != [b, n, c] {
        return Err(Error::invalid_input(format!(
            "mapped {:?} does not match responses {:?}",
            mapped.dims(),
            responses.dims()
        )));
    }
    let diff = responses.broadcast_sub(&mapped.unsqueeze(1)?)?;
    let sq = diff.reshape((b, r, n * c))?.sqr()?.sum(2)?;
    let per = if squared { sq } else { sq.sqrt()? };
    Ok(per.sum(1)?.mean(0)?)
}

/// Sum over responses of the Frobenius distance between the mapped
/// representation `(N, C)` and each encoded response in `(R, N, C)`.
pub fn sentiment_alignment_loss(mapped: &Tensor, responses: &Tensor, squared: bool) -> Result<Tensor> {
    alignment_loss_batch(&mapped.unsqueeze(0)?, &responses.unsqueeze(0)?, squared)
}

/// Mean over the batch of `||eps - eps_hat||`, with each sample noised to its
/// own step.
pub fn diffusion_loss_batch(
    latents: &Tensor,
    steps: &[usize],
    noise: &Tensor,
    condition: &Tensor,
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    let batch = latents.dim(0)?;
    if steps.len() != batch || noise.dims() != latents.dims() {
        return Err(Error::invalid_input("one step and one noise sample per latent are required"));
    }
    let mut signal = Vec::with_capacity(batch);
    let mut spread = Vec::with_capacity(batch);
    for &t in steps {
        schedule.check_step(t, 1)?;
        let (a, b) = schedule.forward_coefficients(t);
        signal.push(a);
        spread.push(b);
    }
    let signal = Tensor::from_vec(signal, (batch, 1, 1, 1), &device())?;
    let spread = Tensor::from_vec(spread, (batch, 1, 1, 1), &device())?;
    let z_t = (latents.broadcast_mul(&signal)? + noise.broadcast_mul(&spread)?)?;
    let eps_hat = denoiser.predict_noise(&z_t, steps, condition)?;
    if eps_hat.dims() != latents.dims() {
        return Err(Error::Configuration(format!(
            "denoiser returned {:?} for latents {:?}",
            eps_hat.dims(),
            latents.dims()
        )));
    }
    Ok(batched_l2(noise, &eps_hat)?.mean(0)?)
}

/// `||eps - eps_theta(z_t, t, condition)||` for a single latent; `condition`
/// is `(N, C)`.
pub fn diffusion_loss(
    latent: &LatentCode,
    t: usize,
    noise: &Tensor,
    condition: &Tensor,
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    diffusion_loss_batch(
        &latent.tensor().unsqueeze(0)?,
        &[t],
        &noise.unsqueeze(0)?,
        &condition.unsqueeze(0)?,
        denoiser,
        schedule,
    )
}

pub fn total_loss(sa: f64, dm: f64, weights: &LossWeights) -> Result<f64> {
    if !sa.is_finite() || !dm.is_finite() {
        return Err(Error::invalid_input(format!("losses must be finite, got {sa} and {dm}")));
    }
    Ok(sa + weights.beta * dm)
}

/// Everything a mapper step needs, precomputed by the frozen encoders.
#[derive(Clone, Debug)]
pub struct MapperBatch {
    /// `(B, N, C_t)` emotional requests.
    pub requests: Tensor,
    /// `(B, N, C_s)` text semantics.
    pub semantics: Tensor,
    /// `(B, R, N, C_s)` encoded supervisor responses.
    pub responses: Tensor,
    /// `(B, C, H, W)` image latents.
    pub latents: Tensor,
}

impl MapperBatch {
    pub fn len(&self) -> Result<usize> {
        Ok(self.requests.dim(0)?)
    }

    pub fn is_empty(&self) -> Result<bool> {
        Ok(self.len()? == 0)
    }

    /// Rows `indices` of every field.
    pub fn select(&self, indices: &[u32]) -> Result<Self> {
        let idx = Tensor::new(indices, &device())?;
        Ok(Self {
            requests: self.requests.index_select(&idx, 0)?,
            semantics: self.semantics.index_select(&idx, 0)?,
            responses: self.responses.index_select(&idx, 0)?,
            latents: self.latents.index_select(&idx, 0)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub sa: f64,
    pub dm: f64,
    pub total: f64,
}

pub fn write_loss_log(path: &Path, records: &[LossRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "L_sa", "L_dm", "L_total"])?;
    for r in records {
        w.write_record([r.step.to_string(), r.sa.to_string(), r.dm.to_string(), r.total.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Optimizer state for the mapper plus checksums of the stores that must not
/// change while it trains.
pub struct MapperTrainer<'a> {
    mapper: &'a EmotionalMapper,
    denoiser: &'a dyn Denoiser,
    schedule: &'a NoiseSchedule,
    frozen: Vec<(&'a ParamStore, String)>,
    weights: LossWeights,
    opt: AdamW,
    rng: ChaCha8Rng,
    step: usize,
}

impl<'a> MapperTrainer<'a> {
    /// `store` holds the mapper's parameters and must be trainable; every
    /// store in `frozen` must be frozen.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        mapper: &'a EmotionalMapper,
        store: &'a ParamStore,
        frozen: &[&'a ParamStore],
        denoiser: &'a dyn Denoiser,
        schedule: &'a NoiseSchedule,
        weights: LossWeights,
        learning_rate: f64,
        seed: u64,
    ) -> Result<Self> {
        weights.validate()?;
        if !store.is_trainable() {
            return Err(Error::invalid_config("the mapper store must be trainable"));
        }
        let mut sums = Vec::with_capacity(frozen.len());
        for s in frozen {
            if s.is_trainable() {
                return Err(Error::invalid_config("backbone parameters must be frozen during mapper training"));
            }
            sums.push((*s, s.checksum()?));
        }
        let opt = AdamW::new(
            store.vars(),
            ParamsAdamW {
                lr: learning_rate,
                weight_decay: 0.0,
                ..Default::default()
            },
        )?;
        Ok(Self {
            mapper,
            denoiser,
            schedule,
            frozen: sums,
            weights,
            opt,
            rng: ChaCha8Rng::seed_from_u64(seed),
            step: 0,
        })
    }

    /// Loss tensors `(L_sa, L_dm, L_total)` for a batch, drawing steps and
    /// noise from the trainer's generator.
    pub fn losses(&mut self, batch: &MapperBatch) -> Result<(Tensor, Tensor, Tensor)> {
        let b = batch.len()?;
        if b == 0 {
            return Err(Error::EmptyBatch("mapper batch is empty".into()));
        }
        let t_max = self.schedule.steps();
        let steps: Vec<usize> = (0..b).map(|_| self.rng.random_range(1..=t_max)).collect();
        let noise = gaussian(batch.latents.shape().clone(), &mut self.rng)?;
        let mapped = self.mapper.forward_batch(&batch.requests, &batch.semantics)?;
        let sa = alignment_loss_batch(&mapped, &batch.responses, self.weights.squared_alignment)?;
        let dm = diffusion_loss_batch(&batch.latents, &steps, &noise, &mapped, self.denoiser, self.schedule)?;
        let total = (&sa + (&dm * self.weights.beta)?)?;
        Ok((sa, dm, total))
    }

    pub fn train_step(&mut self, batch: &MapperBatch) -> Result<LossRecord> {
        let (sa, dm, total) = self.losses(batch)?;
        let (sa, dm, total_v) = (to_scalar(&sa)?, to_scalar(&dm)?, to_scalar(&total)?);
        if !total_v.is_finite() {
            return Err(Error::Divergence {
                step: self.step,
                detail: format!("L_sa = {sa}, L_dm = {dm}"),
            });
        }
        self.opt.backward_step(&total)?;
        self.verify_frozen()?;
        let rec = LossRecord {
            step: self.step,
            sa,
            dm,
            total: total_v,
        };
        self.step += 1;
        Ok(rec)
    }

    pub fn verify_frozen(&self) -> Result<()> {
        for (store, sum) in &self.frozen {
            if store.checksum()? != *sum {
                return Err(Error::Checkpoint("a frozen parameter store changed during mapper training".into()));
            }
        }
        Ok(())
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }
}
