//! Walk planning: magnitude and onset sweeps, two-style interpolation,
//! mask builders and the condition-blending baseline.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{axpy, Field, Shape};
use crate::guidance::{SpatialMask, TemporalProfile};
use crate::oracle::{ConditionId, ConditionModel, GaussianComponent};
use crate::runspec::{parse_document, BlendDoc, DerivedConditionDoc, MaskDoc, RunSpec, TermDoc};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FadeAxis {
    /// Ramp runs down the rows (varies with `u`).
    Row,
    /// Ramp runs across the columns (varies with `v`).
    Col,
}

/// Mask geometry. `u` indexes rows and `v` columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case")]
pub enum MaskBuilder {
    /// 1 on rows `u0..u1` and columns `v0..v1` (half-open), 0 elsewhere.
    Rect { u0: usize, v0: usize, u1: usize, v1: usize },
    /// 1 within `r0` of `(cu, cv)`, falling linearly to 0 at `r1`.
    Radial { cu: f64, cv: f64, r0: f64, r1: f64 },
    /// 1 at coordinate `from`, 0 at `to`, linear between and clamped outside.
    LinearFade { axis: FadeAxis, from: f64, to: f64 },
}

pub fn make_mask(shape: Shape, builder: &MaskBuilder) -> Result<SpatialMask> {
    let (h, w) = shape.dims2().ok_or(Error::FlatShape { op: "make_mask" })?;
    let field = match *builder {
        MaskBuilder::Rect { u0, v0, u1, v1 } => {
            if u0 >= u1 || v0 >= v1 {
                return Err(Error::param("rect mask is empty"));
            }
            if u1 > h || v1 > w {
                return Err(Error::param(format!("rect mask exceeds the {h}x{w} grid")));
            }
            Field::from_fn(h, w, |r, c| f64::from(u8::from((u0..u1).contains(&r) && (v0..v1).contains(&c))))?
        }
        MaskBuilder::Radial { cu, cv, r0, r1 } => {
            if ![cu, cv, r0, r1].iter().all(|v| v.is_finite()) {
                return Err(Error::param("radial mask parameters must be finite"));
            }
            if !(0.0..=(h - 1) as f64).contains(&cu) || !(0.0..=(w - 1) as f64).contains(&cv) {
                return Err(Error::param("radial mask center lies outside the grid"));
            }
            if r0 < 0.0 || r1 <= r0 {
                return Err(Error::param(format!("radial mask needs 0 <= r0 < r1, got {r0}, {r1}")));
            }
            Field::from_fn(h, w, |r, c| {
                let d = (r as f64 - cu).hypot(c as f64 - cv);
                ((r1 - d) / (r1 - r0)).clamp(0.0, 1.0)
            })?
        }
        MaskBuilder::LinearFade { axis, from, to } => {
            if !from.is_finite() || !to.is_finite() || from == to {
                return Err(Error::param("linear fade needs distinct finite endpoints"));
            }
            Field::from_fn(h, w, |r, c| {
                let p = match axis {
                    FadeAxis::Row => r,
                    FadeAxis::Col => c,
                } as f64;
                ((to - p) / (to - from)).clamp(0.0, 1.0)
            })?
        }
    };
    SpatialMask::from_field(field)
}

/// Registers `id` as the blend of single-Gaussian conditions `a` and `b`:
/// mean `(1 - lambda) mu_a + lambda mu_b`, variance blended the same way.
pub fn register_blend(
    model: &ConditionModel,
    id: ConditionId,
    a: &ConditionId,
    b: &ConditionId,
    lambda: f64,
) -> Result<ConditionModel> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::param(format!("lambda = {lambda} outside [0, 1]")));
    }
    let single = |c: &ConditionId| -> Result<(Field, f64)> {
        match model.single_gaussian(c)? {
            Some((mean, var)) => Ok((mean.clone(), var)),
            None => Err(Error::MixtureCondition(c.to_string())),
        }
    };
    let (mu_a, var_a) = single(a)?;
    let (mu_b, var_b) = single(b)?;
    let mean = axpy(1.0 - lambda, &mu_a, &mu_b.scale(lambda)?)?;
    let variance = (1.0 - lambda) * var_a + lambda * var_b;
    model.with_condition(id, vec![GaussianComponent::new(mean, variance, 1.0)])
}

/// Condition-blending baseline: returns the extended model and the new ID.
pub fn blend_conditions_baseline(
    model: &ConditionModel,
    a: &ConditionId,
    b: &ConditionId,
    lambda: f64,
) -> Result<(ConditionModel, ConditionId)> {
    let id = ConditionId::new(format!("blend({a},{b},{lambda})"));
    Ok((register_blend(model, id.clone(), a, b, lambda)?, id))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WalkParameter {
    Magnitude,
    Onset,
    MaskOpacity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WalkAxis {
    pub term: usize,
    pub parameter: WalkParameter,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WalkSpec {
    pub base: RunSpec,
    pub axes: Vec<WalkAxis>,
    #[serde(default = "yes")]
    pub shared_seed: bool,
}

fn yes() -> bool {
    true
}

impl WalkSpec {
    pub fn from_json(text: &str) -> Result<WalkSpec> {
        let spec: WalkSpec = parse_document(text)?;
        spec.base.validate()?;
        Ok(spec)
    }
}

/// One grid cell of a walk.
#[derive(Debug, Clone, PartialEq)]
pub struct WalkCell {
    /// Position along each axis.
    pub index: Vec<usize>,
    pub values: Vec<f64>,
    pub spec: RunSpec,
}

fn apply_axis(term: &mut TermDoc, parameter: WalkParameter, value: f64) -> Result<()> {
    match parameter {
        WalkParameter::Magnitude => term.temporal = term.temporal.with_magnitude(value),
        WalkParameter::Onset => term.temporal = term.temporal.with_onset(value)?,
        WalkParameter::MaskOpacity => {
            if !(0.0..=1.0).contains(&value) {
                return Err(Error::param(format!("mask opacity {value} outside [0, 1]")));
            }
            term.opacity = value;
        }
    }
    term.temporal.validate()
}

/// Cartesian product of the axes in row-major order (last axis fastest).
pub fn plan_walk_cells(spec: &WalkSpec) -> Result<Vec<WalkCell>> {
    if spec.axes.is_empty() || spec.axes.len() > 2 {
        return Err(Error::schema("$.axes", "a walk has one or two axes"));
    }
    for (i, axis) in spec.axes.iter().enumerate() {
        if axis.term >= spec.base.terms.len() {
            return Err(Error::schema(
                format!("$.axes[{i}].term"),
                format!("term {} does not exist in the base run", axis.term),
            ));
        }
        if axis.values.is_empty() || axis.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::schema(format!("$.axes[{i}].values"), "values must be finite and nonempty"));
        }
    }
    if spec.axes.len() == 2 && (spec.axes[0].term, spec.axes[0].parameter) == (spec.axes[1].term, spec.axes[1].parameter) {
        return Err(Error::schema("$.axes", "axes must sweep distinct terms or parameters"));
    }
    let dims: Vec<usize> = spec.axes.iter().map(|a| a.values.len()).collect();
    let total: usize = dims.iter().product();
    let mut cells = Vec::with_capacity(total);
    for flat in 0..total {
        let mut index = vec![0; dims.len()];
        let mut rest = flat;
        for (d, n) in dims.iter().enumerate().rev() {
            index[d] = rest % n;
            rest /= n;
        }
        let mut run = spec.base.clone();
        let mut values = Vec::with_capacity(dims.len());
        for (i, (axis, &k)) in spec.axes.iter().zip(&index).enumerate() {
            let v = axis.values[k];
            apply_axis(&mut run.terms[axis.term], axis.parameter, v)
                .map_err(|e| Error::schema(format!("$.axes[{i}].values[{k}]"), e.to_string()))?;
            values.push(v);
        }
        if !spec.shared_seed {
            run.sampler.seed = spec.base.sampler.seed.wrapping_add(flat as u64);
        }
        cells.push(WalkCell { index, values, spec: run });
    }
    Ok(cells)
}

pub fn plan_walk(spec: &WalkSpec) -> Result<Vec<RunSpec>> {
    Ok(plan_walk_cells(spec)?.into_iter().map(|c| c.spec).collect())
}

/// Temporal shape, mask and opacity shared by both interpolated style terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StyleTemplate {
    pub temporal: TemporalProfile,
    #[serde(default)]
    pub mask: MaskDoc,
    #[serde(default = "unit")]
    pub opacity: f64,
}

fn unit() -> f64 {
    1.0
}

impl Default for StyleTemplate {
    fn default() -> Self {
        StyleTemplate {
            temporal: TemporalProfile::Constant { m: 1.0 },
            mask: MaskDoc::Uniform,
            opacity: 1.0,
        }
    }
}

impl StyleTemplate {
    pub fn term(&self, condition: &str, magnitude: f64) -> TermDoc {
        TermDoc {
            condition: condition.to_string(),
            temporal: self.temporal.with_magnitude(magnitude),
            mask: self.mask.clone(),
            opacity: self.opacity,
        }
    }
}

/// Document accepted by `interp`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterpSpec {
    /// Run carrying the base terms, sampler and seed shared by every cell.
    pub base: RunSpec,
    pub a: String,
    pub b: String,
    pub m: f64,
    pub lambdas: Vec<f64>,
    #[serde(default)]
    pub style: StyleTemplate,
    /// Also plan the condition-blend baseline at each lambda.
    #[serde(default)]
    pub baseline: bool,
}

impl InterpSpec {
    pub fn from_json(text: &str) -> Result<InterpSpec> {
        let spec: InterpSpec = parse_document(text)?;
        spec.base.validate()?;
        Ok(spec)
    }
}

fn check_interp(a: &str, b: &str, m: f64, lambdas: &[f64]) -> Result<()> {
    if a == b {
        return Err(Error::param("interpolation needs two distinct styles"));
    }
    if !m.is_finite() {
        return Err(Error::param("magnitude must be finite"));
    }
    if let Some(l) = lambdas.iter().find(|l| !(0.0..=1.0).contains(*l)) {
        return Err(Error::param(format!("lambda {l} outside [0, 1]")));
    }
    Ok(())
}

/// One run per lambda with style magnitudes `m (1 - lambda)` for `a` and
/// `m lambda` for `b`, appended after the base run's terms.
pub fn interpolate_styles(
    base: &RunSpec,
    style: &StyleTemplate,
    a: &str,
    b: &str,
    m: f64,
    lambdas: &[f64],
) -> Result<Vec<RunSpec>> {
    check_interp(a, b, m, lambdas)?;
    Ok(lambdas
        .iter()
        .map(|&l| {
            let mut run = base.clone();
            run.terms.push(style.term(a, m * (1.0 - l)));
            run.terms.push(style.term(b, m * l));
            run
        })
        .collect())
}

/// Baseline counterpart: one blended condition guided at magnitude `m`.
pub fn blend_baseline_runs(
    base: &RunSpec,
    style: &StyleTemplate,
    a: &str,
    b: &str,
    m: f64,
    lambdas: &[f64],
) -> Result<Vec<RunSpec>> {
    check_interp(a, b, m, lambdas)?;
    Ok(lambdas
        .iter()
        .map(|&l| {
            let mut run = base.clone();
            let id = format!("blend_{}", run.derived_conditions.len());
            run.derived_conditions.push(DerivedConditionDoc {
                id: id.clone(),
                blend: BlendDoc {
                    a: a.to_string(),
                    b: b.to_string(),
                    lambda: l,
                },
            });
            run.terms.push(style.term(&id, m));
            run
        })
        .collect())
}
