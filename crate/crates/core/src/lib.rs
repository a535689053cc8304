//! Multi-term diffusion guidance with guidance scale functions.
//!
//! A run composes noise predictions from a [`Denoiser`] as
//! `f_null + sum_i s_i(t, u, v) (f_{c_i} - f_null)` and feeds the result to a
//! DDPM or DDIM step rule. The shipped denoiser is the exact posterior noise
//! estimate of a Gaussian-mixture data model, so every guided run has a
//! closed-form target to check against.

pub mod builtin;
pub mod dct;
pub mod diagnostics;
pub mod error;
pub mod field;
pub mod fieldio;
pub mod guidance;
pub mod noise;
pub mod oracle;
pub mod runspec;
pub mod sampler;
pub mod schedule;
pub mod walk;

pub use error::{Error, Result};
pub use field::{axpy, Field, Shape};
pub use guidance::{cfg, compose, eval_gsf, guidance_norm_map, guidance_term, Gsf, GuidanceTerm, SpatialMask, TemporalProfile};
pub use noise::{draw_noise, NoiseKey, Stream};
pub use oracle::{exact_epsilon, ConditionId, ConditionModel, Denoiser, GaussianComponent};
pub use runspec::{resolve, Resources, RunSpec};
pub use sampler::{run_sampling, SamplerConfig, Trajectory};
pub use schedule::{linear_beta_schedule, NoiseSchedule};
