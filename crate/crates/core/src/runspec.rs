//! RunSpec documents: parsing, validation, canonical form and resolution
//! into a model, guidance terms and a sampler configuration.

use std::collections::{BTreeSet, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::builtin::{builtin_model, BUILTIN_NAMES};
use crate::error::{Error, Result};
use crate::field::Shape;
use crate::fieldio::read_field;
use crate::guidance::{Gsf, GuidanceTerm, SpatialMask, TemporalProfile};
use crate::oracle::{load_model, ConditionId, ConditionModel, Denoiser};
use crate::sampler::{RuleParams, SamplerConfig, StepRuleRegistry};
use crate::schedule::{linear_beta_schedule, scaled_linear_defaults};
use crate::walk::{make_mask, register_blend, MaskBuilder};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    /// Builtin model name, or a path to a model document.
    pub model: String,
    #[serde(default)]
    pub terms: Vec<TermDoc>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub derived_conditions: Vec<DerivedConditionDoc>,
    pub sampler: SamplerDoc,
    #[serde(default)]
    pub outputs: OutputsDoc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TermDoc {
    pub condition: String,
    pub temporal: TemporalProfile,
    #[serde(default)]
    pub mask: MaskDoc,
    #[serde(default = "one")]
    pub opacity: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskDoc {
    #[default]
    Uniform,
    /// GWF1 file, relative to the spec's directory.
    File(String),
    Builder(MaskBuilder),
    /// Mask previously uploaded to the artifact store.
    MaskId(String),
}

/// A condition registered at run time as the blend of two single-Gaussian conditions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DerivedConditionDoc {
    pub id: String,
    pub blend: BlendDoc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlendDoc {
    pub a: String,
    pub b: String,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerDoc {
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    pub steps: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta_min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta_max: Option<f64>,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Emit {
    Fields,
    Images,
    Metrics,
    Normmaps,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputsDoc {
    #[serde(default = "one_usize")]
    pub samples: usize,
    #[serde(default)]
    pub record_trajectory: bool,
    #[serde(default = "default_emit")]
    pub emit: BTreeSet<Emit>,
    #[serde(default = "one_usize")]
    pub trajectory_stride: usize,
}

fn one_usize() -> usize {
    1
}

fn default_emit() -> BTreeSet<Emit> {
    BTreeSet::from([Emit::Fields])
}

impl Default for OutputsDoc {
    fn default() -> Self {
        OutputsDoc {
            samples: 1,
            record_trajectory: false,
            emit: default_emit(),
            trajectory_stride: 1,
        }
    }
}

/// Parses a JSON document, reporting the failing path on schema errors.
pub(crate) fn parse_document<T: serde::de::DeserializeOwned>(text: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let path = if path == "." { "$".to_string() } else { format!("$.{path}") };
        Error::schema(path, e.into_inner().to_string())
    })
}

fn check_finite(path: String, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::schema(path, format!("expected a finite number, got {v}")))
    }
}

impl RunSpec {
    pub fn from_json(text: &str) -> Result<RunSpec> {
        let spec: RunSpec = parse_document(text)?;
        spec.validate()?;
        Ok(spec)
    }

    /// Checks that need no model or filesystem access.
    pub fn validate(&self) -> Result<()> {
        if self.model.trim().is_empty() {
            return Err(Error::schema("$.model", "model must not be empty"));
        }
        for (i, term) in self.terms.iter().enumerate() {
            let at = |f: &str| format!("$.terms[{i}].{f}");
            if ConditionId::new(term.condition.as_str()).is_null() {
                return Err(Error::schema(at("condition"), "terms cannot target the null condition"));
            }
            term.temporal
                .validate()
                .map_err(|e| Error::schema(at("temporal"), e.to_string()))?;
            if !(0.0..=1.0).contains(&term.opacity) {
                return Err(Error::schema(at("opacity"), "opacity must lie in [0, 1]"));
            }
        }
        let mut ids = HashSet::new();
        for (i, d) in self.derived_conditions.iter().enumerate() {
            let at = |f: &str| format!("$.derived_conditions[{i}].{f}");
            if ConditionId::new(d.id.as_str()).is_null() || !ids.insert(d.id.as_str()) {
                return Err(Error::schema(at("id"), format!("derived condition id `{}` is reserved or repeated", d.id)));
            }
            check_finite(at("blend.lambda"), d.blend.lambda)?;
            if !(0.0..=1.0).contains(&d.blend.lambda) {
                return Err(Error::schema(at("blend.lambda"), "lambda must lie in [0, 1]"));
            }
        }
        let s = &self.sampler;
        if s.steps < 2 {
            return Err(Error::schema("$.sampler.steps", "at least 2 steps are required"));
        }
        if let Some(eta) = s.eta {
            check_finite("$.sampler.eta".into(), eta)?;
        }
        let (lo, hi) = self.betas();
        if !(lo > 0.0 && lo <= hi && hi < 1.0) {
            return Err(Error::schema(
                "$.sampler",
                format!("need 0 < beta_min <= beta_max < 1, got {lo}, {hi}"),
            ));
        }
        if self.outputs.samples == 0 {
            return Err(Error::schema("$.outputs.samples", "at least one sample is required"));
        }
        if self.outputs.trajectory_stride == 0 {
            return Err(Error::schema("$.outputs.trajectory_stride", "stride must be at least 1"));
        }
        Ok(())
    }

    pub fn betas(&self) -> (f64, f64) {
        let (lo, hi) = scaled_linear_defaults(self.sampler.steps);
        (self.sampler.beta_min.unwrap_or(lo), self.sampler.beta_max.unwrap_or(hi))
    }

    /// Same run with every default made explicit.
    pub fn normalized(&self) -> RunSpec {
        let mut out = self.clone();
        let (lo, hi) = self.betas();
        out.sampler.beta_min = Some(lo);
        out.sampler.beta_max = Some(hi);
        if out.sampler.kind == "ddim" && out.sampler.eta.is_none() {
            out.sampler.eta = Some(0.0);
        }
        out
    }

    /// Sorted-key JSON of the normalized spec; equal runs give equal strings.
    pub fn canonical_json(&self) -> String {
        let mut value = serde_json::to_value(self.normalized()).expect("RunSpec serializes");
        normalize_zeros(&mut value);
        value.to_string()
    }
}

fn normalize_zeros(v: &mut serde_json::Value) {
    match v {
        serde_json::Value::Number(n) if n.as_f64() == Some(0.0) && n.is_f64() => {
            *v = serde_json::json!(0.0);
        }
        serde_json::Value::Array(items) => items.iter_mut().for_each(normalize_zeros),
        serde_json::Value::Object(map) => map.values_mut().for_each(normalize_zeros),
        _ => {}
    }
}

/// Where models, mask files and uploaded masks come from.
#[derive(Debug, Clone, Default)]
pub struct Resources {
    /// Directory relative paths in the spec resolve against.
    pub base_dir: Option<PathBuf>,
    /// Directory of `<name>.json` model documents addressable by name.
    pub model_dir: Option<PathBuf>,
    /// Directory of uploaded `<mask_id>.gwf` files.
    pub mask_dir: Option<PathBuf>,
    pub rules: StepRuleRegistry,
}

impl Resources {
    pub fn with_base_dir(base_dir: impl Into<PathBuf>) -> Self {
        Resources {
            base_dir: Some(base_dir.into()),
            ..Default::default()
        }
    }

    fn relative(&self, p: &str) -> PathBuf {
        match &self.base_dir {
            Some(b) if Path::new(p).is_relative() => b.join(p),
            _ => PathBuf::from(p),
        }
    }

    /// Builtins first, then `model_dir/<name>.json`, then a path.
    pub fn model(&self, name: &str) -> Result<ConditionModel> {
        if BUILTIN_NAMES.contains(&name) {
            return builtin_model(name);
        }
        if let Some(dir) = &self.model_dir {
            let candidate = dir.join(format!("{name}.json"));
            if is_plain_name(name) && candidate.is_file() {
                return load_model_file(&candidate);
            }
        }
        let path = self.relative(name);
        if path.is_file() {
            return load_model_file(&path);
        }
        Err(Error::schema("$.model", format!("`{name}` is neither a builtin model nor a readable file")))
    }

    pub fn mask(&self, doc: &MaskDoc, shape: Shape) -> Result<SpatialMask> {
        match doc {
            MaskDoc::Uniform => Ok(SpatialMask::default()),
            MaskDoc::Builder(b) => make_mask(shape, b),
            MaskDoc::File(p) => SpatialMask::from_field(read_field(&self.relative(p))?),
            MaskDoc::MaskId(id) => {
                if !is_plain_name(id) {
                    return Err(Error::param(format!("invalid mask id `{id}`")));
                }
                let dir = self
                    .mask_dir
                    .as_ref()
                    .ok_or_else(|| Error::param("no mask store is configured"))?;
                let path = dir.join(format!("{id}.gwf"));
                if !path.is_file() {
                    return Err(Error::param(format!("unknown mask id `{id}`")));
                }
                SpatialMask::from_field(read_field(&path)?)
            }
        }
    }
}

fn is_plain_name(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

fn load_model_file(path: &Path) -> Result<ConditionModel> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    load_model(&text, path.parent())
}

/// A spec turned into runnable parts.
#[derive(Debug, Clone)]
pub struct ResolvedRun {
    pub model: ConditionModel,
    pub terms: Vec<GuidanceTerm>,
    pub config: SamplerConfig,
}

pub fn resolve(spec: &RunSpec, res: &Resources) -> Result<ResolvedRun> {
    spec.validate()?;
    let mut model = res.model(&spec.model)?;
    for (i, d) in spec.derived_conditions.iter().enumerate() {
        let id = ConditionId::new(d.id.as_str());
        if model.has_condition(&id) {
            return Err(Error::schema(
                format!("$.derived_conditions[{i}].id"),
                format!("condition `{id}` already exists"),
            ));
        }
        model = register_blend(&model, id, &d.blend.a.as_str().into(), &d.blend.b.as_str().into(), d.blend.lambda)
            .map_err(|e| Error::schema(format!("$.derived_conditions[{i}].blend"), e.to_string()))?;
    }
    let shape = model.shape();
    let mut terms = Vec::with_capacity(spec.terms.len());
    for (i, t) in spec.terms.iter().enumerate() {
        let condition = ConditionId::new(t.condition.as_str());
        if !model.has_condition(&condition) {
            return Err(Error::schema(
                format!("$.terms[{i}].condition"),
                format!("unknown condition `{condition}`"),
            ));
        }
        let mask = res
            .mask(&t.mask, shape)
            .and_then(|m| m.with_opacity(t.opacity))
            .map_err(|e| match e {
                Error::Io(_) => e,
                other => Error::schema(format!("$.terms[{i}].mask"), other.to_string()),
            })?;
        if let SpatialMask::Field(f) = &mask {
            if f.shape() != shape {
                return Err(Error::schema(
                    format!("$.terms[{i}].mask"),
                    format!("mask shape {} does not match model shape {shape}", f.shape()),
                ));
            }
        }
        terms.push(GuidanceTerm::new(condition, Gsf::new(t.temporal.clone(), mask)?)?);
    }
    let (lo, hi) = spec.betas();
    let schedule =
        linear_beta_schedule(spec.sampler.steps, lo, hi).map_err(|e| Error::schema("$.sampler", e.to_string()))?;
    let rule = res
        .rules
        .build(&spec.sampler.kind, &RuleParams { eta: spec.sampler.eta })
        .map_err(|e| Error::schema("$.sampler.kind", e.to_string()))?;
    let mut config = SamplerConfig::new(rule, schedule, spec.sampler.seed, spec.outputs.samples);
    if spec.outputs.record_trajectory {
        config = config.with_trajectory(spec.outputs.trajectory_stride);
    }
    Ok(ResolvedRun { model, terms, config })
}
