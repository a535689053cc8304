//! Exact noise predictors for Gaussian-mixture data.
//!
//! Each condition selects a mixture of isotropic Gaussians over the whole
//! field. For a diffused input `x_t = sqrt(ab) x_0 + sqrt(1 - ab) eps`, the
//! Bayes-optimal noise estimate `E[eps | x_t, c]` has a closed form, which
//! makes this module the analytic stand-in for a trained conditional network.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{Field, Shape};
use crate::fieldio;
use crate::schedule::NoiseSchedule;

/// Log-responsibilities further than this below the maximum contribute exactly 0.
const RESPONSIBILITY_FLOOR: f64 = -745.0;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConditionId(String);

impl ConditionId {
    pub const NULL_TOKEN: &'static str = "null";

    pub fn new(name: impl Into<String>) -> Self {
        let name = name.into();
        if name == "∅" {
            ConditionId(Self::NULL_TOKEN.to_string())
        } else {
            ConditionId(name)
        }
    }

    pub fn null() -> Self {
        ConditionId(Self::NULL_TOKEN.to_string())
    }

    pub fn is_null(&self) -> bool {
        self.0 == Self::NULL_TOKEN
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ConditionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ConditionId {
    fn from(s: &str) -> Self {
        ConditionId::new(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianComponent {
    pub mean: Field,
    pub variance: f64,
    pub weight: f64,
}

impl GaussianComponent {
    pub fn new(mean: Field, variance: f64, weight: f64) -> Self {
        GaussianComponent { mean, variance, weight }
    }
}

/// Source of conditional noise predictions `f(x_t, t, c)`.
///
/// [`ConditionModel`] is the analytic implementation. Tabulated or external
/// predictors plug in here; the guidance engine and samplers only see this
/// trait.
pub trait Denoiser: Send + Sync {
    fn shape(&self) -> Shape;

    fn has_condition(&self, condition: &ConditionId) -> bool;

    /// Noise prediction for `x` at cumulative signal level `alpha_bar`.
    fn epsilon(&self, condition: &ConditionId, x: &Field, alpha_bar: f64) -> Result<Field>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionModel {
    shape: Shape,
    conditions: BTreeMap<ConditionId, Vec<GaussianComponent>>,
}

impl ConditionModel {
    /// Validates and normalizes component weights per condition.
    pub fn new(shape: Shape, conditions: BTreeMap<ConditionId, Vec<GaussianComponent>>) -> Result<Self> {
        shape.check()?;
        if !conditions.contains_key(&ConditionId::null()) {
            return Err(Error::MissingNullCondition);
        }
        let mut normalized = BTreeMap::new();
        for (id, comps) in conditions {
            normalized.insert(id.clone(), normalize_components(&id, shape, comps)?);
        }
        Ok(ConditionModel {
            shape,
            conditions: normalized,
        })
    }

    pub fn condition_ids(&self) -> impl Iterator<Item = &ConditionId> {
        self.conditions.keys()
    }

    pub fn components(&self, condition: &ConditionId) -> Result<&[GaussianComponent]> {
        self.conditions
            .get(condition)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::UnknownCondition(condition.to_string()))
    }

    /// Mixture mean `sum_j w_j mu_j`.
    pub fn mean(&self, condition: &ConditionId) -> Result<Field> {
        let comps = self.components(condition)?;
        let mut acc = vec![0.0; self.shape.volume()];
        for c in comps {
            for (a, m) in acc.iter_mut().zip(c.mean.values()) {
                *a += c.weight * m;
            }
        }
        Ok(Field::from_raw(self.shape, acc))
    }

    /// `(mean, variance)` when the condition is a single Gaussian.
    pub fn single_gaussian(&self, condition: &ConditionId) -> Result<Option<(&Field, f64)>> {
        let comps = self.components(condition)?;
        Ok(match comps {
            [only] => Some((&only.mean, only.variance)),
            _ => None,
        })
    }

    /// A copy of the model with one more condition registered.
    pub fn with_condition(&self, id: ConditionId, components: Vec<GaussianComponent>) -> Result<Self> {
        if self.conditions.contains_key(&id) {
            return Err(Error::param(format!("condition `{id}` already registered")));
        }
        let comps = normalize_components(&id, self.shape, components)?;
        let mut conditions = self.conditions.clone();
        conditions.insert(id, comps);
        Ok(ConditionModel {
            shape: self.shape,
            conditions,
        })
    }

    /// Independent draws `x_0 ~ p(x | condition)`.
    pub fn sample_direct(&self, condition: &ConditionId, n: usize, seed: u64) -> Result<Vec<Field>> {
        use crate::noise::{draw_noise, uniform_stream, NoiseKey, Stream};
        use rand::Rng;
        let comps = self.components(condition)?;
        (0..n as u64)
            .map(|lane| {
                let mut pick_rng = uniform_stream(NoiseKey::new(seed, u64::MAX, Stream::Diagnostics, lane));
                let u: f64 = pick_rng.random();
                let mut acc = 0.0;
                let comp = comps
                    .iter()
                    .find(|c| {
                        acc += c.weight;
                        u < acc
                    })
                    .unwrap_or_else(|| comps.last().expect("nonempty"));
                let z = draw_noise(NoiseKey::new(seed, 0, Stream::Diagnostics, lane), self.shape);
                crate::field::axpy(comp.variance.sqrt(), &z, &comp.mean)
            })
            .collect()
    }
}

fn normalize_components(
    id: &ConditionId,
    shape: Shape,
    mut comps: Vec<GaussianComponent>,
) -> Result<Vec<GaussianComponent>> {
    if comps.is_empty() {
        return Err(Error::param(format!("condition `{id}` has no components")));
    }
    for (i, c) in comps.iter().enumerate() {
        if c.mean.shape() != shape {
            return Err(Error::ShapeMismatch {
                expected: shape,
                found: c.mean.shape(),
            });
        }
        if !(c.variance > 0.0 && c.variance.is_finite()) {
            return Err(Error::param(format!(
                "condition `{id}` component {i}: variance must be positive, got {}",
                c.variance
            )));
        }
        if !(c.weight > 0.0 && c.weight.is_finite()) {
            return Err(Error::param(format!(
                "condition `{id}` component {i}: weight must be positive, got {}",
                c.weight
            )));
        }
    }
    let total: f64 = comps.iter().map(|c| c.weight).sum();
    comps.iter_mut().for_each(|c| c.weight /= total);
    Ok(comps)
}

impl Denoiser for ConditionModel {
    fn shape(&self) -> Shape {
        self.shape
    }

    fn has_condition(&self, condition: &ConditionId) -> bool {
        self.conditions.contains_key(condition)
    }

    fn epsilon(&self, condition: &ConditionId, x: &Field, alpha_bar: f64) -> Result<Field> {
        let comps = self.components(condition)?;
        if x.shape() != self.shape {
            return Err(Error::ShapeMismatch {
                expected: self.shape,
                found: x.shape(),
            });
        }
        if !(alpha_bar >= 0.0 && alpha_bar < 1.0) {
            return Err(Error::param(format!("alpha_bar {alpha_bar} outside [0, 1)")));
        }
        let signal = alpha_bar.sqrt();
        let noise = (1.0 - alpha_bar).sqrt();
        let xs = x.values();

        if let [only] = comps {
            let v = alpha_bar * only.variance + (1.0 - alpha_bar);
            let k = noise / v;
            let out = xs
                .iter()
                .zip(only.mean.values())
                .map(|(&xi, &mi)| k * (xi - signal * mi))
                .collect();
            return Ok(Field::from_raw(self.shape, out));
        }

        let d = xs.len() as f64;
        let vars: Vec<f64> = comps.iter().map(|c| alpha_bar * c.variance + (1.0 - alpha_bar)).collect();
        let dist2: Vec<f64> = comps
            .iter()
            .map(|c| {
                xs.iter()
                    .zip(c.mean.values())
                    .map(|(&xi, &mi)| {
                        let r = xi - signal * mi;
                        r * r
                    })
                    .sum()
            })
            .collect();
        let log_resp: Vec<f64> = comps
            .iter()
            .zip(vars.iter().zip(&dist2))
            .map(|(c, (&v, &d2))| c.weight.ln() - 0.5 * d * v.ln() - d2 / (2.0 * v))
            .collect();
        let max = log_resp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let unnorm: Vec<f64> = if max.is_finite() {
            log_resp
                .iter()
                .map(|&l| if l - max < RESPONSIBILITY_FLOOR { 0.0 } else { (l - max).exp() })
                .collect()
        } else {
            far_field_responsibilities(xs, comps, signal, &vars)
        };
        let z: f64 = unnorm.iter().sum();

        let mut out = vec![0.0; xs.len()];
        for (j, (c, &u)) in comps.iter().zip(&unnorm).enumerate() {
            if u == 0.0 {
                continue;
            }
            let k = (u / z) * noise / vars[j];
            for ((o, &xi), &mi) in out.iter_mut().zip(xs).zip(c.mean.values()) {
                *o += k * (xi - signal * mi);
            }
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("exact_epsilon"));
        }
        Ok(Field::from_raw(self.shape, out))
    }
}

/// Limit of the responsibilities when every squared distance overflows:
/// all mass goes to the component(s) with the smallest rescaled distance.
fn far_field_responsibilities(xs: &[f64], comps: &[GaussianComponent], signal: f64, vars: &[f64]) -> Vec<f64> {
    let scale = comps
        .iter()
        .flat_map(|c| xs.iter().zip(c.mean.values()).map(|(&xi, &mi)| (xi - signal * mi).abs()))
        .fold(0.0, f64::max);
    let scaled: Vec<f64> = comps
        .iter()
        .zip(vars)
        .map(|(c, v)| {
            let d2: f64 = xs
                .iter()
                .zip(c.mean.values())
                .map(|(&xi, &mi)| {
                    let r = (xi - signal * mi) / scale;
                    r * r
                })
                .sum();
            d2 / v
        })
        .collect();
    let best = scaled.iter().cloned().fold(f64::INFINITY, f64::min);
    scaled.iter().map(|q| if *q == best { 1.0 } else { 0.0 }).collect()
}

/// `E[eps | x_t, c]` at sampling step `step` of `schedule`.
pub fn exact_epsilon(
    model: &dyn Denoiser,
    condition: &ConditionId,
    x_t: &Field,
    step: usize,
    schedule: &NoiseSchedule,
) -> Result<Field> {
    model.epsilon(condition, x_t, schedule.alpha_bar_at(step)?)
}

// ---- model documents ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeDoc {
    Grid([usize; 2]),
    Flat(usize),
}

impl ShapeDoc {
    pub fn to_shape(&self) -> Result<Shape> {
        match *self {
            ShapeDoc::Grid([h, w]) => Shape::grid(h, w),
            ShapeDoc::Flat(d) => Shape::flat(d),
        }
    }

    pub fn from_shape(shape: Shape) -> Self {
        match shape {
            Shape::Grid { h, w } => ShapeDoc::Grid([h, w]),
            Shape::Flat { d } => ShapeDoc::Flat(d),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MeanDoc {
    Inline(Vec<f64>),
    File { file: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentDoc {
    pub mean: MeanDoc,
    pub variance: f64,
    #[serde(default = "one")]
    pub weight: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionDoc {
    pub id: String,
    pub components: Vec<ComponentDoc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDocument {
    pub shape: ShapeDoc,
    pub conditions: Vec<ConditionDoc>,
}

/// Parses and validates a JSON model document. Mean file references are
/// resolved relative to `base_dir`.
pub fn load_model(document: &str, base_dir: Option<&Path>) -> Result<ConditionModel> {
    let doc: ModelDocument = crate::runspec::parse_document(document)?;
    model_from_document(&doc, base_dir)
}

pub fn model_from_document(doc: &ModelDocument, base_dir: Option<&Path>) -> Result<ConditionModel> {
    let shape = doc
        .shape
        .to_shape()
        .map_err(|e| Error::schema("$.shape", e.to_string()))?;
    let mut conditions = BTreeMap::new();
    for (ci, cond) in doc.conditions.iter().enumerate() {
        let path = format!("$.conditions[{ci}]");
        let id = ConditionId::new(cond.id.clone());
        if id.as_str().is_empty() {
            return Err(Error::schema(format!("{path}.id"), "empty condition id"));
        }
        if conditions.contains_key(&id) {
            return Err(Error::schema(format!("{path}.id"), format!("duplicate condition `{id}`")));
        }
        if cond.components.is_empty() {
            return Err(Error::schema(format!("{path}.components"), "condition has no components"));
        }
        let mut comps = Vec::with_capacity(cond.components.len());
        for (k, comp) in cond.components.iter().enumerate() {
            let cpath = format!("{path}.components[{k}]");
            let mean = match &comp.mean {
                MeanDoc::Inline(values) => Field::new(shape, values.clone())
                    .map_err(|e| Error::schema(format!("{cpath}.mean"), e.to_string()))?,
                MeanDoc::File { file } => {
                    let p = base_dir.map(|b| b.join(file)).unwrap_or_else(|| file.into());
                    let f = fieldio::read_field(&p).map_err(|e| Error::schema(format!("{cpath}.mean"), e.to_string()))?;
                    if f.shape() != shape {
                        return Err(Error::schema(
                            format!("{cpath}.mean"),
                            format!("mean file has shape {}, model is {shape}", f.shape()),
                        ));
                    }
                    f
                }
            };
            if !(comp.variance > 0.0 && comp.variance.is_finite()) {
                return Err(Error::schema(
                    format!("{cpath}.variance"),
                    format!("variance must be positive, got {}", comp.variance),
                ));
            }
            if !(comp.weight > 0.0 && comp.weight.is_finite()) {
                return Err(Error::schema(
                    format!("{cpath}.weight"),
                    format!("weight must be positive, got {}", comp.weight),
                ));
            }
            comps.push(GaussianComponent::new(mean, comp.variance, comp.weight));
        }
        conditions.insert(id, comps);
    }
    if !conditions.contains_key(&ConditionId::null()) {
        return Err(Error::schema("$.conditions", "missing null condition `null`"));
    }
    ConditionModel::new(shape, conditions)
}
