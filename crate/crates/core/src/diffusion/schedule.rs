use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const BASE_STEPS: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    LinearBeta,
    Cosine,
}

/// Which coefficient the closed-form noising uses. `Cumulative` is the
/// standard DDPM marginal; `AsPrinted` uses the per-step alpha and exists
/// only for auditing.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ForwardForm {
    #[default]
    Cumulative,
    AsPrinted,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub kind: ScheduleKind,
    pub eta: f64,
    /// Linear-beta endpoints of a 1000-step chain; `steps` evenly spaced
    /// points of its cumulative product are kept.
    pub beta_start: f64,
    pub beta_end: f64,
    #[serde(default)]
    pub forward_form: ForwardForm,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            kind: ScheduleKind::LinearBeta,
            eta: 0.0,
            beta_start: 0.00085,
            beta_end: 0.012,
            forward_form: ForwardForm::Cumulative,
        }
    }
}

/// Per-step `alpha`, cumulative `alpha_bar` and reverse-noise `sigma`,
/// stored for `t = 1..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
    forward_form: ForwardForm,
}

impl NoiseSchedule {
    pub fn build(config: &ScheduleConfig) -> Result<Self> {
        let t_max = config.steps;
        if t_max < 1 {
            return Err(Error::invalid_config("schedule needs at least one step"));
        }
        if !(0.0..=1.0).contains(&config.eta) {
            return Err(Error::invalid_config(format!("eta must lie in [0, 1], got {}", config.eta)));
        }
        let alpha: Vec<f64> = match config.kind {
            ScheduleKind::LinearBeta => {
                let (b0, b1) = (config.beta_start, config.beta_end);
                if !(b0 > 0.0 && b1 >= b0 && b1 < 1.0) {
                    return Err(Error::invalid_config(format!("betas [{b0}, {b1}] must satisfy 0 < start <= end < 1")));
                }
                if t_max > BASE_STEPS {
                    return Err(Error::invalid_config(format!(
                        "a linear-beta schedule has at most {BASE_STEPS} steps, got {t_max}"
                    )));
                }
                let mut base = Vec::with_capacity(BASE_STEPS);
                let mut acc = 1.0;
                for i in 0..BASE_STEPS {
                    acc *= 1.0 - (b0 + (b1 - b0) * i as f64 / (BASE_STEPS - 1) as f64);
                    base.push(acc);
                }
                let bar = |t: usize| if t == 0 { 1.0 } else { base[(t * BASE_STEPS + t_max / 2) / t_max - 1] };
                (1..=t_max).map(|t| bar(t) / bar(t - 1)).collect()
            }
            ScheduleKind::Cosine => {
                let s = 0.008;
                let f = |t: f64| ((t / t_max as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2).cos().powi(2);
                (1..=t_max)
                    .map(|t| {
                        let beta = (1.0 - f(t as f64) / f((t - 1) as f64)).clamp(1e-8, 0.999);
                        1.0 - beta
                    })
                    .collect()
            }
        };
        let mut alpha_bar = Vec::with_capacity(t_max);
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        let sigma = (1..=t_max)
            .map(|t| {
                let ab = alpha_bar[t - 1];
                let ab_prev = if t == 1 { 1.0 } else { alpha_bar[t - 2] };
                config.eta * ((1.0 - ab_prev) / (1.0 - ab)).sqrt() * (1.0 - alpha[t - 1]).sqrt()
            })
            .collect();
        let schedule = Self {
            alpha,
            alpha_bar,
            sigma,
            forward_form: config.forward_form,
        };
        schedule.check()?;
        Ok(schedule)
    }

    fn check(&self) -> Result<()> {
        let mut prev = 1.0;
        for t in 1..=self.steps() {
            let a = self.alpha(t);
            if !(a > 0.0 && a < 1.0) {
                return Err(Error::invalid_config(format!("alpha_{t} = {a} is outside (0, 1)")));
            }
            let ab = self.alpha_bar(t);
            if !(ab < prev) || ab <= 0.0 {
                return Err(Error::invalid_config(format!("alpha_bar is not strictly decreasing at t = {t}")));
            }
            if self.sigma(t) < 0.0 || !self.sigma(t).is_finite() {
                return Err(Error::invalid_config(format!("sigma_{t} is invalid")));
            }
            prev = ab;
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        self.alpha.len()
    }

    pub fn forward_form(&self) -> ForwardForm {
        self.forward_form
    }

    /// `alpha_t` for `t` in `1..=T`; `alpha_0` is taken as 1.
    pub fn alpha(&self, t: usize) -> f64 {
        if t == 0 { 1.0 } else { self.alpha[t - 1] }
    }

    /// `alpha_bar_t` for `t` in `0..=T`, with `alpha_bar_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 { 1.0 } else { self.alpha_bar[t - 1] }
    }

    pub fn sigma(&self, t: usize) -> f64 {
        if t == 0 { 0.0 } else { self.sigma[t - 1] }
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigma
    }

    /// Coefficients `(signal, noise)` of the closed-form noising at `t`.
    pub fn forward_coefficients(&self, t: usize) -> (f64, f64) {
        let a = match self.forward_form {
            ForwardForm::Cumulative => self.alpha_bar(t),
            ForwardForm::AsPrinted => self.alpha(t),
        };
        (a.sqrt(), (1.0 - a).sqrt())
    }

    pub fn check_step(&self, t: usize, min: usize) -> Result<()> {
        if t < min || t > self.steps() {
            return Err(Error::InvalidStep {
                t,
                min,
                max: self.steps(),
            });
        }
        Ok(())
    }

    /// `t,alpha,alpha_bar,sigma` rows for `t = 1..=T`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["t", "alpha", "alpha_bar", "sigma"])?;
        for t in 1..=self.steps() {
            w.write_record([
                t.to_string(),
                format!("{:.17e}", self.alpha(t)),
                format!("{:.17e}", self.alpha_bar(t)),
                format!("{:.17e}", self.sigma(t)),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}
