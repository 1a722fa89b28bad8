//! Affective editing: global edits by partial noising, mask-preserving local
//! edits and generation from pure noise.

use candle_core::Tensor;
use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffusion::{Autoencoder, Denoiser, LatentCode, NoiseSchedule, denoise_step, forward_noise, gaussian};
use crate::error::{Error, Result};
use crate::image_io::Mask;

/// Default noise level for edits.
pub const DEFAULT_EDIT_STEP: usize = 37;

/// Turns a user description into the `(tokens, channels)` condition the
/// denoiser attends to.
pub trait Conditioner: Send + Sync {
    fn condition(&self, text: &str) -> Result<Tensor>;
}

impl<F> Conditioner for F
where
    F: Fn(&str) -> Result<Tensor> + Send + Sync,
{
    fn condition(&self, text: &str) -> Result<Tensor> {
        self(text)
    }
}

/// Read-only models shared by all edit operations.
#[derive(Clone, Copy)]
pub struct EditHandles<'a> {
    pub autoencoder: &'a Autoencoder,
    pub denoiser: &'a dyn Denoiser,
    pub schedule: &'a NoiseSchedule,
    pub conditioner: &'a dyn Conditioner,
}

#[derive(Clone, Debug)]
pub struct EditRequest {
    pub image: Option<RgbImage>,
    pub text: String,
    pub t: usize,
    /// `true` marks editable pixels.
    pub mask: Option<Mask>,
    pub seed: u64,
}

impl EditRequest {
    pub fn new(image: RgbImage, text: impl Into<String>, t: usize, seed: u64) -> Self {
        Self {
            image: Some(image),
            text: text.into(),
            t,
            mask: None,
            seed,
        }
    }

    pub fn with_mask(mut self, mask: Mask) -> Self {
        self.mask = Some(mask);
        self
    }
}

#[derive(Clone, Debug)]
pub struct StepTrace {
    /// Noise level of `latent` after this step.
    pub t: usize,
    pub latent: Tensor,
    pub norm: f64,
}

#[derive(Clone, Debug)]
pub struct EditTrace {
    /// Noise drawn first from the request's generator.
    pub initial_noise: Tensor,
    /// Latent at the start of the reverse chain.
    pub start: Tensor,
    pub steps: Vec<StepTrace>,
}

#[derive(Clone, Debug)]
pub struct EditResult {
    pub image: RgbImage,
    pub latent: LatentCode,
    pub trace: EditTrace,
}

fn check_text(text: &str) -> Result<()> {
    if text.trim().is_empty() {
        return Err(Error::invalid_input("description text is empty"));
    }
    Ok(())
}

fn record(trace: &mut Vec<StepTrace>, t: usize, z: &LatentCode) -> Result<()> {
    trace.push(StepTrace {
        t,
        latent: z.tensor().clone(),
        norm: z.norm()?,
    });
    Ok(())
}

/// Noise the image latent to `req.t`, then run the conditioned reverse chain
/// back to zero and decode.
pub fn edit(req: &EditRequest, h: &EditHandles<'_>) -> Result<EditResult> {
    if req.mask.is_some() {
        return Err(Error::invalid_input("edit takes no mask; use edit_masked"));
    }
    run_edit(req, None, h)
}

/// Like [`edit`], but after every reverse step the pixels outside the mask
/// are reset to the original latent noised to that step's level, using the
/// same initial noise.
pub fn edit_masked(req: &EditRequest, h: &EditHandles<'_>) -> Result<EditResult> {
    let mask = req
        .mask
        .as_ref()
        .ok_or_else(|| Error::invalid_input("edit_masked needs a mask"))?;
    run_edit(req, Some(mask), h)
}

fn run_edit(req: &EditRequest, mask: Option<&Mask>, h: &EditHandles<'_>) -> Result<EditResult> {
    check_text(&req.text)?;
    h.schedule.check_step(req.t, 0)?;
    let image = req
        .image
        .as_ref()
        .ok_or_else(|| Error::invalid_input("an input image is required"))?;
    let z0 = h.autoencoder.encode_image(image)?;
    let (_, lh, lw) = z0.dims();
    let blend = match mask {
        Some(m) => {
            if (m.width, m.height) != (image.width() as usize, image.height() as usize) {
                return Err(Error::invalid_input(format!(
                    "mask is {}x{} but the image is {}x{}",
                    m.width,
                    m.height,
                    image.width(),
                    image.height()
                )));
            }
            let keep = m.to_latent(lh, lw)?;
            let inv = keep.affine(-1.0, 1.0)?;
            Some((keep, inv))
        }
        None => None,
    };
    let condition = h.conditioner.condition(&req.text)?;

    let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
    let eps0 = gaussian(z0.tensor().shape().clone(), &mut rng)?;
    let mut z = forward_noise(&z0, req.t, &eps0, h.schedule)?;
    let start = z.tensor().clone();
    let mut steps = Vec::with_capacity(req.t);
    for s in (1..=req.t).rev() {
        let refined = denoise_step(&z, s, &condition, h.denoiser, h.schedule, &mut rng)?;
        z = match &blend {
            Some((keep, inv)) => {
                let z_in = forward_noise(&z0, s - 1, &eps0, h.schedule)?;
                let mixed = (refined.tensor().broadcast_mul(keep)? + z_in.tensor().broadcast_mul(inv)?)?;
                LatentCode::new(mixed)?
            }
            None => refined,
        };
        record(&mut steps, s - 1, &z)?;
    }
    Ok(EditResult {
        image: h.autoencoder.decode_to_image(&z)?,
        latent: z,
        trace: EditTrace {
            initial_noise: eps0,
            start,
            steps,
        },
    })
}

/// Runs `steps` reverse updates starting from standard normal noise.
pub fn generate(text: &str, seed: u64, steps: usize, h: &EditHandles<'_>) -> Result<EditResult> {
    check_text(text)?;
    h.schedule.check_step(steps, 1)?;
    let condition = h.conditioner.condition(text)?;
    let (c, lh, lw) = h.autoencoder.config().latent_shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps0 = gaussian((c, lh, lw), &mut rng)?;
    let mut z = LatentCode::new(eps0.clone())?;
    let mut trace = Vec::with_capacity(steps);
    for s in (1..=steps).rev() {
        z = denoise_step(&z, s, &condition, h.denoiser, h.schedule, &mut rng)?;
        record(&mut trace, s - 1, &z)?;
    }
    Ok(EditResult {
        image: h.autoencoder.decode_to_image(&z)?,
        latent: z,
        trace: EditTrace {
            start: eps0.clone(),
            initial_noise: eps0,
            steps: trace,
        },
    })
}
