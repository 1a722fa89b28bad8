//! Latent diffusion backbone: noise schedule, closed-form noising, the
//! reverse update, a toy autoencoder and a conditional U-Net denoiser.

mod autoencoder;
mod denoiser;
mod schedule;

pub use autoencoder::{Autoencoder, AutoencoderConfig, AutoencoderTrainConfig, train_autoencoder};
pub use denoiser::{Denoiser, DenoiserConfig, UNetDenoiser, ZeroDenoiser};
pub use schedule::{ForwardForm, NoiseSchedule, ScheduleConfig, ScheduleKind};

use candle_core::{Shape, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::params::device;

/// A single latent, `(channels, height, width)`.
#[derive(Clone, Debug)]
pub struct LatentCode(Tensor);

impl LatentCode {
    pub fn new(tensor: Tensor) -> Result<Self> {
        if tensor.rank() != 3 {
            return Err(Error::invalid_input(format!(
                "latent must be [C, H, W], got {:?}",
                tensor.dims()
            )));
        }
        let values = tensor.flatten_all()?.to_vec1::<f64>()?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid_input("latent contains non-finite values"));
        }
        Ok(Self(tensor))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        let d = self.0.dims();
        (d[0], d[1], d[2])
    }

    pub fn norm(&self) -> Result<f64> {
        Ok(self.0.sqr()?.sum_all()?.sqrt()?.to_scalar::<f64>()?)
    }
}

/// Standard normal noise drawn from `rng` in row-major order.
pub fn gaussian<S: Into<Shape>, R: Rng + ?Sized>(shape: S, rng: &mut R) -> Result<Tensor> {
    let shape = shape.into();
    let values: Vec<f64> = (0..shape.elem_count()).map(|_| rng.sample(StandardNormal)).collect();
    Ok(Tensor::from_vec(values, shape, &device())?)
}

/// Closed-form noising of a tensor of any shape; `t = 0` returns `z` itself.
pub fn forward_noise_tensor(z: &Tensor, t: usize, eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    schedule.check_step(t, 0)?;
    if z.dims() != eps.dims() {
        return Err(Error::invalid_input(format!(
            "noise shape {:?} differs from latent shape {:?}",
            eps.dims(),
            z.dims()
        )));
    }
    if t == 0 {
        return Ok(z.clone());
    }
    let (a, b) = schedule.forward_coefficients(t);
    Ok(((z * a)? + (eps * b)?)?)
}

pub fn forward_noise(z: &LatentCode, t: usize, eps: &Tensor, schedule: &NoiseSchedule) -> Result<LatentCode> {
    Ok(LatentCode(forward_noise_tensor(z.tensor(), t, eps, schedule)?))
}

/// One reverse update on a batch `(B, C, H, W)` sharing the step `t`.
pub fn denoise_step_batch<R: Rng + ?Sized>(
    z_t: &Tensor,
    t: usize,
    condition: &Tensor,
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Tensor> {
    schedule.check_step(t, 1)?;
    let batch = z_t.dim(0)?;
    let eps_hat = denoiser.predict_noise(z_t, &vec![t; batch], condition)?;
    if eps_hat.dims() != z_t.dims() {
        return Err(Error::Configuration(format!(
            "denoiser returned {:?} for latents {:?}",
            eps_hat.dims(),
            z_t.dims()
        )));
    }
    let alpha = schedule.alpha(t);
    let alpha_bar = schedule.alpha_bar(t);
    let coef = (1.0 - alpha) / (1.0 - alpha_bar).sqrt();
    let mean = ((z_t - (eps_hat * coef)?)? / alpha.sqrt())?;
    let sigma = schedule.sigma(t);
    if sigma > 0.0 {
        let noise = gaussian(z_t.shape().clone(), rng)?;
        Ok((mean + (noise * sigma)?)?)
    } else {
        Ok(mean)
    }
}

/// One reverse update `z_t -> z_{t-1}`. `condition` is `(tokens, channels)`.
pub fn denoise_step<R: Rng + ?Sized>(
    z_t: &LatentCode,
    t: usize,
    condition: &Tensor,
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<LatentCode> {
    let out = denoise_step_batch(
        &z_t.tensor().unsqueeze(0)?,
        t,
        &condition.unsqueeze(0)?,
        denoiser,
        schedule,
        rng,
    )?;
    LatentCode::new(out.squeeze(0)?)
}

/// A denoiser that returns a fixed noise tensor, whatever its inputs.
pub struct OracleDenoiser(pub Tensor);

impl Denoiser for OracleDenoiser {
    fn predict_noise(&self, latents: &Tensor, _steps: &[usize], _condition: &Tensor) -> Result<Tensor> {
        Ok(self.0.broadcast_as(latents.shape())?.contiguous()?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn schedule() -> NoiseSchedule {
        NoiseSchedule::build(&ScheduleConfig::default()).unwrap()
    }

    fn cond() -> Tensor {
        Tensor::zeros((2, 4), crate::params::DTYPE, &device()).unwrap()
    }

    #[test]
    fn zero_step_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = LatentCode::new(gaussian((2, 3, 3), &mut rng).unwrap()).unwrap();
        let eps = gaussian((2, 3, 3), &mut rng).unwrap();
        let out = forward_noise(&z, 0, &eps, &schedule()).unwrap();
        let a = out.tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let b = z.tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_latent_gives_scaled_noise() {
        let s = schedule();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let eps = gaussian((1, 2, 2), &mut rng).unwrap();
        let z = LatentCode::new(eps.zeros_like().unwrap()).unwrap();
        let out = forward_noise(&z, 20, &eps, &s).unwrap();
        let scale = (1.0 - s.alpha_bar(20)).sqrt();
        let got = out.tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let want = eps.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w * scale).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_prediction_divides_by_sqrt_alpha() {
        let s = schedule();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = LatentCode::new(gaussian((1, 2, 2), &mut rng).unwrap()).unwrap();
        let out = denoise_step(&z, 7, &cond(), &ZeroDenoiser, &s, &mut rng).unwrap();
        let got = out.tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let want = z.tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w / s.alpha(7).sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn out_of_range_steps() {
        let s = schedule();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z = LatentCode::new(gaussian((1, 2, 2), &mut rng).unwrap()).unwrap();
        let eps = gaussian((1, 2, 2), &mut rng).unwrap();
        assert!(matches!(forward_noise(&z, 51, &eps, &s), Err(Error::InvalidStep { .. })));
        assert!(matches!(
            denoise_step(&z, 0, &cond(), &ZeroDenoiser, &s, &mut rng),
            Err(Error::InvalidStep { .. })
        ));
    }

    #[test]
    fn latent_rejects_non_finite() {
        let t = Tensor::new(&[[[f64::NAN]]], &device()).unwrap();
        assert!(LatentCode::new(t).is_err());
    }
}
