//! Ancestral DDPM and DDIM sampling loops over composed guidance.
//!
//! Step rules sit behind the [`StepRule`] trait and are looked up by name in
//! a [`StepRuleRegistry`]. Every random draw is keyed by
//! `(seed, step, stream, sample index)`, so samples can run in any order and
//! on any number of threads without changing a bit.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::Field;
use crate::guidance::{compose_at, GuidanceTerm};
use crate::noise::{draw_noise, NoiseKey, Stream};
use crate::oracle::Denoiser;
use crate::schedule::{NoiseSchedule, StepCoefficients};

/// One reverse-diffusion transition.
pub trait StepRule: Send + Sync + fmt::Debug {
    fn name(&self) -> &'static str;

    /// Whether `apply` reads the noise field at this step. Rules that return
    /// `false` are never handed a drawn field.
    fn uses_noise(&self, coeffs: &StepCoefficients) -> bool;

    fn apply(&self, x_t: &Field, eps_hat: &Field, coeffs: &StepCoefficients, noise: Option<&Field>) -> Result<Field>;

    /// Parameters echoed into manifests.
    fn params(&self) -> BTreeMap<String, f64> {
        BTreeMap::new()
    }
}

/// `x' = (x - beta / sqrt(1 - ab) * eps) / sqrt(1 - beta) + sqrt(posterior variance) * z`.
pub fn ddpm_update(x_t: &Field, eps_hat: &Field, coeffs: &StepCoefficients, noise: Option<&Field>) -> Result<Field> {
    x_t.check_same_shape(eps_hat)?;
    let StepCoefficients { beta, alpha_bar, .. } = *coeffs;
    let eps_coef = beta / (1.0 - alpha_bar).sqrt();
    let inv_sqrt_alpha = 1.0 / (1.0 - beta).sqrt();
    let mean = x_t.zip_with(eps_hat, |x, e| inv_sqrt_alpha * (x - eps_coef * e), "ddpm_step")?;
    let var = coeffs.posterior_variance();
    match noise {
        Some(z) if var > 0.0 => {
            let sd = var.sqrt();
            mean.zip_with(z, |m, z| m + sd * z, "ddpm_step")
        }
        _ => Ok(mean),
    }
}

pub fn ddpm_step(x_t: &Field, eps_hat: &Field, step: usize, schedule: &NoiseSchedule, noise: &Field) -> Result<Field> {
    x_t.check_same_shape(noise)?;
    ddpm_update(x_t, eps_hat, &schedule.coefficients(step)?, Some(noise))
}

fn ddim_sigma(coeffs: &StepCoefficients, eta: f64) -> f64 {
    let StepCoefficients { alpha_bar, alpha_bar_prev, .. } = *coeffs;
    if eta == 0.0 || alpha_bar_prev >= 1.0 {
        return 0.0;
    }
    eta * ((1.0 - alpha_bar_prev) / (1.0 - alpha_bar)).sqrt() * (1.0 - alpha_bar / alpha_bar_prev).sqrt()
}

pub fn ddim_update(
    x_t: &Field,
    eps_hat: &Field,
    coeffs: &StepCoefficients,
    eta: f64,
    noise: Option<&Field>,
) -> Result<Field> {
    x_t.check_same_shape(eps_hat)?;
    let StepCoefficients { alpha_bar, alpha_bar_prev, .. } = *coeffs;
    let sigma = ddim_sigma(coeffs, eta);
    let sqrt_ab = alpha_bar.sqrt();
    let sqrt_1m_ab = (1.0 - alpha_bar).sqrt();
    let sqrt_prev = alpha_bar_prev.sqrt();
    let dir = (1.0 - alpha_bar_prev - sigma * sigma).max(0.0).sqrt();
    let out = x_t.zip_with(
        eps_hat,
        |x, e| {
            let x0 = (x - sqrt_1m_ab * e) / sqrt_ab;
            sqrt_prev * x0 + dir * e
        },
        "ddim_step",
    )?;
    match noise {
        Some(z) if sigma > 0.0 => out.zip_with(z, |m, z| m + sigma * z, "ddim_step"),
        _ => Ok(out),
    }
}

pub fn ddim_step(
    x_t: &Field,
    eps_hat: &Field,
    step: usize,
    schedule: &NoiseSchedule,
    eta: f64,
    noise: &Field,
) -> Result<Field> {
    check_eta(eta)?;
    x_t.check_same_shape(noise)?;
    ddim_update(x_t, eps_hat, &schedule.coefficients(step)?, eta, Some(noise))
}

fn check_eta(eta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::param(format!("ddim eta must lie in [0, 1], got {eta}")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Ddpm;

impl StepRule for Ddpm {
    fn name(&self) -> &'static str {
        "ddpm"
    }

    fn uses_noise(&self, coeffs: &StepCoefficients) -> bool {
        coeffs.posterior_variance() > 0.0
    }

    fn apply(&self, x_t: &Field, eps_hat: &Field, coeffs: &StepCoefficients, noise: Option<&Field>) -> Result<Field> {
        ddpm_update(x_t, eps_hat, coeffs, noise)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Ddim {
    eta: f64,
}

impl Ddim {
    pub fn new(eta: f64) -> Result<Self> {
        check_eta(eta)?;
        Ok(Ddim { eta })
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }
}

impl StepRule for Ddim {
    fn name(&self) -> &'static str {
        "ddim"
    }

    fn uses_noise(&self, coeffs: &StepCoefficients) -> bool {
        ddim_sigma(coeffs, self.eta) > 0.0
    }

    fn apply(&self, x_t: &Field, eps_hat: &Field, coeffs: &StepCoefficients, noise: Option<&Field>) -> Result<Field> {
        ddim_update(x_t, eps_hat, coeffs, self.eta, noise)
    }

    fn params(&self) -> BTreeMap<String, f64> {
        BTreeMap::from([("eta".to_string(), self.eta)])
    }
}

/// Free-form parameters handed to a step-rule constructor.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RuleParams {
    pub eta: Option<f64>,
}

pub type StepRuleCtor = fn(&RuleParams) -> Result<Arc<dyn StepRule>>;

/// Step rules by name.
#[derive(Clone)]
pub struct StepRuleRegistry {
    ctors: BTreeMap<String, StepRuleCtor>,
}

impl fmt::Debug for StepRuleRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.ctors.keys()).finish()
    }
}

impl Default for StepRuleRegistry {
    fn default() -> Self {
        let mut r = StepRuleRegistry { ctors: BTreeMap::new() };
        r.register("ddpm", |p| {
            if p.eta.is_some() {
                return Err(Error::param("ddpm takes no eta"));
            }
            Ok(Arc::new(Ddpm))
        });
        r.register("ddim", |p| Ok(Arc::new(Ddim::new(p.eta.unwrap_or(0.0))?)));
        r
    }
}

impl StepRuleRegistry {
    pub fn register(&mut self, name: &str, ctor: StepRuleCtor) {
        self.ctors.insert(name.to_string(), ctor);
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.ctors.keys().map(String::as_str)
    }

    pub fn build(&self, name: &str, params: &RuleParams) -> Result<Arc<dyn StepRule>> {
        let ctor = self.ctors.get(name).ok_or_else(|| Error::UnknownName {
            kind: "sampler",
            name: name.to_string(),
        })?;
        ctor(params)
    }
}

#[derive(Debug, Clone)]
pub struct SamplerConfig {
    pub rule: Arc<dyn StepRule>,
    pub schedule: NoiseSchedule,
    pub seed: u64,
    pub num_samples: usize,
    pub record_trajectory: bool,
    /// Record every `trajectory_stride`-th step (the last step is always kept).
    pub trajectory_stride: usize,
    /// Only the first `trajectory_lanes` samples record; the rest get empty trajectories.
    pub trajectory_lanes: usize,
}

impl SamplerConfig {
    pub fn new(rule: Arc<dyn StepRule>, schedule: NoiseSchedule, seed: u64, num_samples: usize) -> Self {
        SamplerConfig {
            rule,
            schedule,
            seed,
            num_samples,
            record_trajectory: false,
            trajectory_stride: 1,
            trajectory_lanes: usize::MAX,
        }
    }

    pub fn ddpm(schedule: NoiseSchedule, seed: u64, num_samples: usize) -> Self {
        SamplerConfig::new(Arc::new(Ddpm), schedule, seed, num_samples)
    }

    pub fn with_trajectory(mut self, stride: usize) -> Self {
        self.record_trajectory = true;
        self.trajectory_stride = stride;
        self
    }

    pub fn with_trajectory_lanes(mut self, lanes: usize) -> Self {
        self.trajectory_lanes = lanes;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.num_samples == 0 {
            return Err(Error::param("num_samples must be at least 1"));
        }
        if self.record_trajectory && self.trajectory_stride == 0 {
            return Err(Error::param("trajectory stride must be at least 1"));
        }
        Ok(())
    }

    fn records(&self, step: usize) -> bool {
        self.record_trajectory
            && (step % self.trajectory_stride == 0 || step + 1 == self.schedule.num_steps())
    }
}

/// State entering one sampling step.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryStep {
    pub step: usize,
    pub t: f64,
    /// Latent before the step is applied.
    pub latent: Field,
    /// Composed noise prediction.
    pub epsilon: Field,
    /// `epsilon - f_null`.
    pub guidance: Field,
    /// Temporal scale of each term, in term order.
    pub term_scales: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub steps: Vec<TrajectoryStep>,
}

#[derive(Debug, Clone)]
pub struct SamplingOutput {
    pub samples: Vec<Field>,
    pub trajectories: Option<Vec<Trajectory>>,
}

/// `(completed sample-steps, total sample-steps)`.
pub type Progress<'a> = &'a (dyn Fn(u64, u64) + Sync);

pub fn run_sampling(model: &dyn Denoiser, terms: &[GuidanceTerm], config: &SamplerConfig) -> Result<SamplingOutput> {
    run_sampling_with_progress(model, terms, config, &|_, _| {})
}

pub fn run_sampling_with_progress(
    model: &dyn Denoiser,
    terms: &[GuidanceTerm],
    config: &SamplerConfig,
    progress: Progress<'_>,
) -> Result<SamplingOutput> {
    config.validate()?;
    for term in terms {
        if !model.has_condition(&term.condition) {
            return Err(Error::UnknownCondition(term.condition.to_string()));
        }
    }
    let total = (config.num_samples * config.schedule.num_steps()) as u64;
    let done = AtomicU64::new(0);
    let tick = || {
        let n = done.fetch_add(1, Ordering::Relaxed) + 1;
        progress(n, total);
    };
    let results: Vec<(Field, Option<Trajectory>)> = (0..config.num_samples)
        .into_par_iter()
        .map(|i| sample_chain(model, terms, config, i as u64, &tick))
        .collect::<Result<_>>()?;
    let (samples, trajs): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    let trajectories = if config.record_trajectory {
        Some(trajs.into_iter().map(Option::unwrap_or_default).collect())
    } else {
        None
    };
    Ok(SamplingOutput { samples, trajectories })
}

fn sample_chain(
    model: &dyn Denoiser,
    terms: &[GuidanceTerm],
    config: &SamplerConfig,
    lane: u64,
    tick: &(dyn Fn() + Sync),
) -> Result<(Field, Option<Trajectory>)> {
    let schedule = &config.schedule;
    let shape = model.shape();
    let mut x = draw_noise(NoiseKey::new(config.seed, 0, Stream::InitLatent, lane), shape);
    let mut trajectory = config.record_trajectory.then(Trajectory::default);
    let recording = (lane as usize) < config.trajectory_lanes;
    for step in 0..schedule.num_steps() {
        let coeffs = schedule.coefficients(step)?;
        let t = schedule.t_of(step)?;
        let comp = compose_at(model, &x, coeffs.alpha_bar, t, terms)?;
        let noise = config
            .rule
            .uses_noise(&coeffs)
            .then(|| draw_noise(NoiseKey::new(config.seed, step as u64, Stream::SamplerNoise, lane), shape));
        let next = config.rule.apply(&x, &comp.epsilon, &coeffs, noise.as_ref())?;
        if let Some(tr) = trajectory.as_mut() {
            if recording && config.records(step) {
                let guidance = comp.guidance()?;
                tr.steps.push(TrajectoryStep {
                    step,
                    t,
                    latent: x,
                    epsilon: comp.epsilon,
                    guidance,
                    term_scales: comp.term_scales,
                });
            }
        }
        x = next;
        tick();
    }
    Ok((x, trajectory))
}
