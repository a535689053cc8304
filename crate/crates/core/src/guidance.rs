//! Guidance scale functions and multi-term guidance composition.
//!
//! The composed noise prediction is
//!
//! ```text
//! f(x_t, t) = f(x_t, t, null) + sum_i s_i(t, u, v) * (f(x_t, t, c_i) - f(x_t, t, null))
//! ```
//!
//! where each `s_i` is a [`Gsf`]: a temporal profile times a spatial mask.
//! Terms are accumulated in a canonical order (by condition, then by GSF),
//! so permuting the term list never changes a single bit of the output.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{Field, Shape};
use crate::oracle::{ConditionId, Denoiser};
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TemporalProfile {
    /// `m`
    Constant { m: f64 },
    /// `m * max(0, (a - t) / a)`: zero until `t` drops below the onset `a`,
    /// exactly `m` at `t = 0`. Equals `max(0, (m / a)(a - t))` for `m >= 0`
    /// and keeps negative magnitudes meaningful.
    RampUp { m: f64, a: f64 },
    /// `m * t`
    RampDown { m: f64 },
    /// Linear interpolation through `(t, s)` knots listed with strictly
    /// decreasing `t`; clamped outside the knot range. The knots are a unit
    /// profile: [`TemporalProfile::with_magnitude`] scales them.
    Piecewise { knots: Vec<[f64; 2]> },
}

impl TemporalProfile {
    pub fn validate(&self) -> Result<()> {
        let finite = |name: &str, v: f64| {
            if v.is_finite() {
                Ok(())
            } else {
                Err(Error::param(format!("temporal {name} must be finite, got {v}")))
            }
        };
        match self {
            TemporalProfile::Constant { m } | TemporalProfile::RampDown { m } => finite("m", *m),
            TemporalProfile::RampUp { m, a } => {
                finite("m", *m)?;
                finite("a", *a)?;
                if *a <= 0.0 {
                    return Err(Error::param(format!("ramp_up onset a must be positive, got {a}")));
                }
                Ok(())
            }
            TemporalProfile::Piecewise { knots } => {
                if knots.is_empty() {
                    return Err(Error::param("piecewise profile needs at least one knot"));
                }
                for [t, s] in knots {
                    finite("knot t", *t)?;
                    finite("knot s", *s)?;
                }
                if knots.windows(2).any(|w| w[1][0] >= w[0][0]) {
                    return Err(Error::param("piecewise knots must have strictly decreasing t"));
                }
                Ok(())
            }
        }
    }

    pub fn value(&self, t: f64) -> f64 {
        match *self {
            TemporalProfile::Constant { m } => m,
            TemporalProfile::RampUp { m, a } => m * ((a - t) / a).max(0.0),
            TemporalProfile::RampDown { m } => m * t,
            TemporalProfile::Piecewise { ref knots } => piecewise(knots, t),
        }
    }

    /// Same profile shape with magnitude `m`.
    pub fn with_magnitude(&self, m: f64) -> TemporalProfile {
        match self {
            TemporalProfile::Constant { .. } => TemporalProfile::Constant { m },
            TemporalProfile::RampUp { a, .. } => TemporalProfile::RampUp { m, a: *a },
            TemporalProfile::RampDown { .. } => TemporalProfile::RampDown { m },
            TemporalProfile::Piecewise { knots } => TemporalProfile::Piecewise {
                knots: knots.iter().map(|[t, s]| [*t, s * m]).collect(),
            },
        }
    }

    pub fn with_onset(&self, a: f64) -> Result<TemporalProfile> {
        match self {
            TemporalProfile::RampUp { m, .. } => Ok(TemporalProfile::RampUp { m: *m, a }),
            other => Err(Error::param(format!(
                "onset only applies to ramp_up profiles, not {}",
                other.kind_name()
            ))),
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            TemporalProfile::Constant { .. } => "constant",
            TemporalProfile::RampUp { .. } => "ramp_up",
            TemporalProfile::RampDown { .. } => "ramp_down",
            TemporalProfile::Piecewise { .. } => "piecewise",
        }
    }

    fn numbers(&self) -> Vec<f64> {
        match self {
            TemporalProfile::Constant { m } => vec![0.0, *m],
            TemporalProfile::RampUp { m, a } => vec![1.0, *m, *a],
            TemporalProfile::RampDown { m } => vec![2.0, *m],
            TemporalProfile::Piecewise { knots } => {
                std::iter::once(3.0).chain(knots.iter().flatten().copied()).collect()
            }
        }
    }
}

fn piecewise(knots: &[[f64; 2]], t: f64) -> f64 {
    let first = knots[0];
    let last = knots[knots.len() - 1];
    if t >= first[0] {
        return first[1];
    }
    if t <= last[0] {
        return last[1];
    }
    for w in knots.windows(2) {
        let ([t0, s0], [t1, s1]) = (w[0], w[1]);
        if t <= t0 && t >= t1 {
            let frac = (t0 - t) / (t0 - t1);
            return s0 + frac * (s1 - s0);
        }
    }
    last[1]
}

/// Per-pixel weights in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub enum SpatialMask {
    Uniform(f64),
    Field(Field),
}

impl Default for SpatialMask {
    fn default() -> Self {
        SpatialMask::Uniform(1.0)
    }
}

impl SpatialMask {
    /// Clamps values into `[0, 1]`. A grid whose values are all equal
    /// collapses to the uniform mask so both paths evaluate identically.
    pub fn from_field(field: Field) -> Result<Self> {
        if !field.shape().is_grid() {
            return Err(Error::FlatShape { op: "spatial mask" });
        }
        let clamped = field.map(|v| v.clamp(0.0, 1.0), "mask clamp")?;
        let first = clamped.values()[0];
        if clamped.values().iter().all(|v| *v == first) {
            return Ok(SpatialMask::Uniform(first));
        }
        Ok(SpatialMask::Field(clamped))
    }

    pub fn uniform(value: f64) -> Self {
        SpatialMask::Uniform(if value.is_finite() { value.clamp(0.0, 1.0) } else { 0.0 })
    }

    pub fn is_uniform(&self) -> bool {
        matches!(self, SpatialMask::Uniform(_))
    }

    /// Multiplies every weight by `opacity` (clamped to `[0, 1]`).
    pub fn with_opacity(&self, opacity: f64) -> Result<Self> {
        let o = opacity.clamp(0.0, 1.0);
        match self {
            SpatialMask::Uniform(v) => Ok(SpatialMask::Uniform(v * o)),
            SpatialMask::Field(f) => SpatialMask::from_field(f.scale(o)?),
        }
    }

    pub fn to_field(&self, shape: Shape) -> Result<Field> {
        match self {
            SpatialMask::Uniform(v) => Field::filled(shape, *v),
            SpatialMask::Field(f) => {
                if f.shape() != shape {
                    return Err(Error::ShapeMismatch {
                        expected: shape,
                        found: f.shape(),
                    });
                }
                Ok(f.clone())
            }
        }
    }

    fn check_against(&self, shape: Shape) -> Result<()> {
        match self {
            SpatialMask::Uniform(_) => Ok(()),
            SpatialMask::Field(f) if f.shape() == shape => Ok(()),
            SpatialMask::Field(f) => Err(Error::ShapeMismatch {
                expected: shape,
                found: f.shape(),
            }),
        }
    }

    fn cmp_key(&self, other: &Self) -> Ordering {
        match (self, other) {
            (SpatialMask::Uniform(a), SpatialMask::Uniform(b)) => a.total_cmp(b),
            (SpatialMask::Uniform(_), SpatialMask::Field(_)) => Ordering::Less,
            (SpatialMask::Field(_), SpatialMask::Uniform(_)) => Ordering::Greater,
            (SpatialMask::Field(a), SpatialMask::Field(b)) => cmp_f64s(a.values(), b.values()),
        }
    }
}

fn cmp_f64s(a: &[f64], b: &[f64]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or_else(|| a.len().cmp(&b.len()))
}

/// Guidance scale function `s(t, u, v) = temporal(t) * mask(u, v)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gsf {
    pub temporal: TemporalProfile,
    pub mask: SpatialMask,
}

impl Gsf {
    pub fn new(temporal: TemporalProfile, mask: SpatialMask) -> Result<Self> {
        temporal.validate()?;
        Ok(Gsf { temporal, mask })
    }

    pub fn temporal(temporal: TemporalProfile) -> Result<Self> {
        Gsf::new(temporal, SpatialMask::default())
    }

    pub fn constant(m: f64) -> Result<Self> {
        Gsf::temporal(TemporalProfile::Constant { m })
    }

    fn cmp_key(&self, other: &Self) -> Ordering {
        cmp_f64s(&self.temporal.numbers(), &other.temporal.numbers()).then_with(|| self.mask.cmp_key(&other.mask))
    }
}

/// `s(t, u, v)`. `location` is `(row, col)` and is required for masked GSFs.
pub fn eval_gsf(gsf: &Gsf, t: f64, location: Option<(usize, usize)>) -> Result<f64> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::param(format!("t = {t} outside [0, 1]")));
    }
    let temporal = gsf.temporal.value(t);
    match (&gsf.mask, location) {
        (SpatialMask::Uniform(v), _) => Ok(temporal * v),
        (SpatialMask::Field(_), None) => Err(Error::param("masked GSF evaluated without a location")),
        (SpatialMask::Field(f), Some((r, c))) => f
            .at(r, c)
            .map(|m| temporal * m)
            .ok_or_else(|| Error::param(format!("location ({r}, {c}) outside the mask"))),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceTerm {
    pub condition: ConditionId,
    pub gsf: Gsf,
}

impl GuidanceTerm {
    pub fn new(condition: impl Into<ConditionId>, gsf: Gsf) -> Result<Self> {
        let condition = condition.into();
        if condition.is_null() {
            return Err(Error::param("a guidance term cannot target the null condition"));
        }
        Ok(GuidanceTerm { condition, gsf })
    }

    pub fn constant(condition: impl Into<ConditionId>, m: f64) -> Result<Self> {
        GuidanceTerm::new(condition, Gsf::constant(m)?)
    }
}

fn require_non_null(c: &ConditionId) -> Result<()> {
    if c.is_null() {
        return Err(Error::param("guidance toward the null condition is undefined"));
    }
    Ok(())
}

/// `f(x_t, t, c) - f(x_t, t, null)`.
pub fn guidance_term(
    model: &dyn Denoiser,
    x_t: &Field,
    step: usize,
    schedule: &NoiseSchedule,
    condition: &ConditionId,
) -> Result<Field> {
    require_non_null(condition)?;
    let ab = schedule.alpha_bar_at(step)?;
    let fc = model.epsilon(condition, x_t, ab)?;
    let fnull = model.epsilon(&ConditionId::null(), x_t, ab)?;
    fc.sub(&fnull)
}

/// Classifier-free guidance `f_null + s * (f_c - f_null)`, evaluated as
/// `(1 - s) f_null + s f_c` so that `s = 1` returns `f_c` exactly.
pub fn cfg(
    model: &dyn Denoiser,
    x_t: &Field,
    step: usize,
    schedule: &NoiseSchedule,
    condition: &ConditionId,
    s: f64,
) -> Result<Field> {
    require_non_null(condition)?;
    if !model.has_condition(condition) {
        return Err(Error::UnknownCondition(condition.to_string()));
    }
    let ab = schedule.alpha_bar_at(step)?;
    let fnull = model.epsilon(&ConditionId::null(), x_t, ab)?;
    if s == 0.0 {
        return Ok(fnull);
    }
    let fc = model.epsilon(condition, x_t, ab)?;
    fnull.zip_with(&fc, |n, c| (1.0 - s) * n + s * c, "cfg")
}

/// Everything one composed evaluation produced.
#[derive(Debug, Clone)]
pub struct Composition {
    pub epsilon: Field,
    pub null_epsilon: Field,
    /// Temporal scale of each term at this `t`, in the caller's term order.
    pub term_scales: Vec<f64>,
    /// Number of denoiser evaluations performed. Conditions whose summed
    /// scale is zero everywhere are not evaluated.
    pub oracle_calls: usize,
}

impl Composition {
    /// `epsilon - null_epsilon`: the total guidance applied.
    pub fn guidance(&self) -> Result<Field> {
        self.epsilon.sub(&self.null_epsilon)
    }
}

/// Composed prediction at sampling step `step`.
pub fn compose(
    model: &dyn Denoiser,
    x_t: &Field,
    step: usize,
    schedule: &NoiseSchedule,
    terms: &[GuidanceTerm],
) -> Result<Field> {
    let comp = compose_at(model, x_t, schedule.alpha_bar_at(step)?, schedule.t_of(step)?, terms)?;
    Ok(comp.epsilon)
}

enum ScaleAcc {
    Scalar(f64),
    PerLocation(Vec<f64>),
}

/// Composition at an explicit noise level and guidance clock.
pub fn compose_at(
    model: &dyn Denoiser,
    x_t: &Field,
    alpha_bar: f64,
    t: f64,
    terms: &[GuidanceTerm],
) -> Result<Composition> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::param(format!("t = {t} outside [0, 1]")));
    }
    for term in terms {
        require_non_null(&term.condition)?;
        if !model.has_condition(&term.condition) {
            return Err(Error::UnknownCondition(term.condition.to_string()));
        }
        term.gsf.mask.check_against(x_t.shape())?;
    }

    let mut order: Vec<usize> = (0..terms.len()).collect();
    order.sort_by(|&a, &b| {
        terms[a]
            .condition
            .cmp(&terms[b].condition)
            .then_with(|| terms[a].gsf.cmp_key(&terms[b].gsf))
    });

    let term_scales: Vec<f64> = terms.iter().map(|term| term.gsf.temporal.value(t)).collect();

    let n = x_t.len();
    let mut scales: BTreeMap<&ConditionId, ScaleAcc> = BTreeMap::new();
    for &i in &order {
        let term = &terms[i];
        let temporal = term_scales[i];
        let acc = scales.entry(&term.condition).or_insert(ScaleAcc::Scalar(0.0));
        match (&term.gsf.mask, &mut *acc) {
            (SpatialMask::Uniform(m), ScaleAcc::Scalar(s)) => *s += temporal * m,
            (SpatialMask::Uniform(m), ScaleAcc::PerLocation(v)) => {
                let add = temporal * m;
                v.iter_mut().for_each(|s| *s += add);
            }
            (SpatialMask::Field(mask), acc) => {
                if let ScaleAcc::Scalar(s) = *acc {
                    *acc = ScaleAcc::PerLocation(vec![s; n]);
                }
                if let ScaleAcc::PerLocation(v) = acc {
                    for (s, m) in v.iter_mut().zip(mask.values()) {
                        *s += temporal * m;
                    }
                }
            }
        }
    }

    scales.retain(|_, acc| match acc {
        // Zero-scale terms are dropped rather than added as `0 * f_c`, so
        // they can never perturb the output.
        ScaleAcc::Scalar(s) => *s != 0.0,
        ScaleAcc::PerLocation(v) => v.iter().any(|s| *s != 0.0),
    });

    // (1 - S) f_null + sum_c s_c f_c with S = sum_c s_c, per location.
    let mut total = vec![0.0; n];
    for acc in scales.values() {
        match acc {
            ScaleAcc::Scalar(s) => total.iter_mut().for_each(|t| *t += s),
            ScaleAcc::PerLocation(v) => total.iter_mut().zip(v).for_each(|(t, s)| *t += s),
        }
    }
    let null_eps = model.epsilon(&ConditionId::null(), x_t, alpha_bar)?;
    let mut out: Vec<f64> = null_eps
        .values()
        .iter()
        .zip(&total)
        .map(|(nv, s)| (1.0 - s) * nv)
        .collect();
    let mut oracle_calls = 1;
    for (condition, acc) in &scales {
        let fc = model.epsilon(condition, x_t, alpha_bar)?;
        oracle_calls += 1;
        let fcv = fc.values();
        match acc {
            ScaleAcc::Scalar(s) => out.iter_mut().zip(fcv).for_each(|(o, c)| *o += s * c),
            ScaleAcc::PerLocation(sv) => {
                for ((o, c), s) in out.iter_mut().zip(fcv).zip(sv) {
                    *o += s * c;
                }
            }
        }
    }
    // With one condition this is `(1 - s) f_null + s f_c`, matching `cfg` exactly.
    let epsilon = Field::new(x_t.shape(), out).map_err(|_| Error::NonFinite("compose"))?;
    Ok(Composition {
        epsilon,
        null_epsilon: null_eps,
        term_scales,
        oracle_calls,
    })
}

/// `|g(u, v)|` normalized by its maximum; all zeros when `g` is zero.
pub fn guidance_norm_map(g: &Field) -> Result<Field> {
    if !g.shape().is_grid() {
        return Err(Error::FlatShape { op: "guidance_norm_map" });
    }
    let max = g.max_abs();
    if max == 0.0 {
        return Ok(Field::zeros(g.shape()));
    }
    g.map(|v| v.abs() / max, "guidance_norm_map")
}
