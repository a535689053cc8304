//! Discrete variance-preserving noise schedules.
//!
//! Arrays are stored in diffusion order: index 0 is the least noisy level.
//! Samplers walk *sampling steps* `k = 0..T`, where `k = 0` is the noisiest
//! level (diffusion index `T - 1`). The guidance clock is
//! `t = (T - 1 - k) / (T - 1)`, so `t = 1` at the first sampling step and
//! `t = 0` at the last, independent of the beta values.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas_bar: Vec<f64>,
}

/// Linearly spaced betas from `beta_min` to `beta_max`.
pub fn linear_beta_schedule(num_steps: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    if num_steps < 2 {
        return Err(Error::param(format!("schedule needs at least 2 steps, got {num_steps}")));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(Error::param(format!(
            "need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}"
        )));
    }
    let last = (num_steps - 1) as f64;
    let betas = (0..num_steps)
        .map(|i| beta_min + (beta_max - beta_min) * i as f64 / last)
        .collect();
    NoiseSchedule::from_betas(betas)
}

/// Linear schedule whose endpoints scale as `1/T`, keeping the total noise
/// level comparable to the 1000-step `1e-4..0.02` schedule for any `T`.
pub fn scaled_linear_defaults(num_steps: usize) -> (f64, f64) {
    let ratio = 1000.0 / num_steps.max(1) as f64;
    ((1e-4 * ratio).min(0.5), (0.02 * ratio).min(0.999))
}

impl NoiseSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.len() < 2 {
            return Err(Error::param("schedule needs at least 2 steps"));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::param(format!("beta {b} outside (0, 1)")));
        }
        let alphas_bar = betas
            .iter()
            .scan(1.0, |acc, b| {
                *acc *= 1.0 - b;
                Some(*acc)
            })
            .collect();
        Ok(NoiseSchedule { betas, alphas_bar })
    }

    pub fn num_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas_bar(&self) -> &[f64] {
        &self.alphas_bar
    }

    fn check_step(&self, step: usize) -> Result<()> {
        if step >= self.num_steps() {
            return Err(Error::param(format!(
                "step {step} out of range for a {}-step schedule",
                self.num_steps()
            )));
        }
        Ok(())
    }

    /// Diffusion index for sampling step `step`.
    pub fn diffusion_index(&self, step: usize) -> Result<usize> {
        self.check_step(step)?;
        Ok(self.num_steps() - 1 - step)
    }

    /// Guidance clock for sampling step `step`.
    pub fn t_of(&self, step: usize) -> Result<f64> {
        let remaining = self.diffusion_index(step)?;
        Ok(remaining as f64 / (self.num_steps() - 1) as f64)
    }

    /// t for every sampling step, first (t = 1) to last (t = 0).
    pub fn t_grid(&self) -> Vec<f64> {
        (0..self.num_steps()).map(|k| self.t_of(k).expect("in range")).collect()
    }

    pub fn alpha_bar_at(&self, step: usize) -> Result<f64> {
        Ok(self.alphas_bar[self.diffusion_index(step)?])
    }

    /// Coefficients of the transition out of sampling step `step`.
    pub fn coefficients(&self, step: usize) -> Result<StepCoefficients> {
        let i = self.diffusion_index(step)?;
        let alpha_bar_prev = if i == 0 { 1.0 } else { self.alphas_bar[i - 1] };
        Ok(StepCoefficients {
            beta: self.betas[i],
            alpha_bar: self.alphas_bar[i],
            alpha_bar_prev,
        })
    }
}

/// Noise levels of one transition `x_t -> x_{t-1}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepCoefficients {
    pub beta: f64,
    pub alpha_bar: f64,
    pub alpha_bar_prev: f64,
}

impl StepCoefficients {
    /// Variance of the DDPM posterior `q(x_{t-1} | x_t, x_0)`; zero on the final step.
    pub fn posterior_variance(&self) -> f64 {
        if self.alpha_bar_prev >= 1.0 {
            return 0.0;
        }
        (1.0 - self.alpha_bar_prev) / (1.0 - self.alpha_bar) * self.beta
    }
}
