//! Named diagnostic suites run over artifact directories.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use guidewalk_core::dct::low_band_share;
use guidewalk_core::diagnostics::{
    effective_mean, energy_permutation_test, layout_preservation, mean_field_error, MetricReport,
};
use guidewalk_core::fieldio::read_field;
use guidewalk_core::runspec::{MaskDoc, ResolvedRun};
use guidewalk_core::{resolve, ConditionId, Field, Resources, RunSpec, TemporalProfile};
use serde::{Deserialize, Serialize};

use crate::error::{Result, ServiceError};
use crate::exec::{RunManifest, SpecContext};

/// Permutations used by the unconditional suite.
pub const PERMUTATIONS: usize = 299;
pub const ALPHA: f64 = 0.01;

/// A finished run read back from its directory.
#[derive(Debug, Clone)]
pub struct StoredRun {
    pub dir: PathBuf,
    pub spec: RunSpec,
    pub manifest: RunManifest,
}

impl StoredRun {
    pub fn load(dir: &Path) -> Result<StoredRun> {
        let manifest = RunManifest::load(dir)?;
        let text = std::fs::read_to_string(dir.join("runspec.json"))?;
        let spec = RunSpec::from_json(&text)?;
        Ok(StoredRun {
            dir: dir.to_path_buf(),
            spec,
            manifest,
        })
    }

    pub fn samples(&self) -> Result<Vec<Field>> {
        self.manifest
            .samples
            .iter()
            .map(|s| {
                let file = s
                    .field
                    .as_ref()
                    .ok_or_else(|| ServiceError::validation("run did not emit sample fields"))?;
                Ok(read_field(&self.dir.join(file))?)
            })
            .collect()
    }

    /// Rebuilds model and terms, reading masks back from the run directory.
    pub fn resolve(&self, ctx: &SpecContext) -> Result<ResolvedRun> {
        let mut spec = self.spec.clone();
        for m in &self.manifest.term_masks {
            let term = &mut spec.terms[m.term];
            term.mask = MaskDoc::File(self.dir.join(&m.file).to_string_lossy().into_owned());
            term.opacity = 1.0;
        }
        let res = Resources {
            base_dir: ctx.base_dir.clone(),
            model_dir: ctx.model_dir.clone(),
            mask_dir: self.dir.parent().map(|p| p.join("masks")),
            ..Default::default()
        };
        Ok(resolve(&spec, &res)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub index: Vec<usize>,
    pub values: Vec<f64>,
    pub run_id: String,
}

/// `manifest.json` of a walk directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridManifest {
    pub walk_id: String,
    pub axes: serde_json::Value,
    pub cells: Vec<GridCell>,
}

impl GridManifest {
    pub fn load(dir: &Path) -> Result<GridManifest> {
        let text = std::fs::read_to_string(dir.join("manifest.json"))
            .map_err(|e| ServiceError::NotFound(format!("{}: {e}", dir.display())))?;
        serde_json::from_str(&text).map_err(|e| ServiceError::validation(format!("not a walk directory: {e}")))
    }

    /// Run directories live two levels up, at the store root.
    pub fn run(&self, dir: &Path, cell: &GridCell) -> Result<StoredRun> {
        let root = dir
            .parent()
            .and_then(Path::parent)
            .ok_or_else(|| ServiceError::validation("walk directory is not inside a store"))?;
        StoredRun::load(&root.join(&cell.run_id))
    }
}

pub trait DiagnoseSuite: Send + Sync {
    fn name(&self) -> &'static str;
    fn run(&self, dir: &Path, ctx: &SpecContext) -> Result<Vec<MetricReport>>;
}

/// Sampled mean against the closed-form effective mean.
pub struct GaussianOracle;

impl DiagnoseSuite for GaussianOracle {
    fn name(&self) -> &'static str {
        "gaussian_oracle"
    }

    fn run(&self, dir: &Path, ctx: &SpecContext) -> Result<Vec<MetricReport>> {
        let run = StoredRun::load(dir)?;
        let resolved = run.resolve(ctx)?;
        if let Some(t) = resolved
            .terms
            .iter()
            .find(|t| !matches!(t.gsf.temporal, TemporalProfile::Constant { .. }))
        {
            return Err(ServiceError::validation(format!(
                "gaussian_oracle needs constant temporal profiles, term `{}` is {}",
                t.condition,
                t.gsf.temporal.kind_name()
            )));
        }
        let target = effective_mean(&resolved.model, &resolved.terms, 0.0)?;
        let samples = run.samples()?;
        let err = mean_field_error(&samples, &target)?;
        Ok(vec![MetricReport::at_most("mu_eff_error", err, 0.1)
            .with_meta("run_id", &run.manifest.run_id)
            .with_meta("samples", samples.len())])
    }
}

/// Energy-distance permutation test of an unguided run against direct draws.
pub struct Unconditional;

impl DiagnoseSuite for Unconditional {
    fn name(&self) -> &'static str {
        "unconditional"
    }

    fn run(&self, dir: &Path, ctx: &SpecContext) -> Result<Vec<MetricReport>> {
        let run = StoredRun::load(dir)?;
        if !run.spec.terms.is_empty() {
            return Err(ServiceError::validation("unconditional suite needs a run without guidance terms"));
        }
        let resolved = run.resolve(ctx)?;
        let samples = run.samples()?;
        let seed = run.spec.sampler.seed;
        let direct = resolved
            .model
            .sample_direct(&ConditionId::null(), samples.len(), seed.wrapping_add(1))?;
        let test = energy_permutation_test(&samples, &direct, PERMUTATIONS, seed)?;
        Ok(vec![MetricReport::at_least("energy_p_value", test.p_value, ALPHA)
            .with_meta("statistic", test.statistic)
            .with_meta("permutations", test.permutations)
            .with_meta("samples", samples.len())])
    }
}

/// Layout change of every walk cell against the first cell, same seeds.
pub struct Layout;

impl DiagnoseSuite for Layout {
    fn name(&self) -> &'static str {
        "layout"
    }

    fn run(&self, dir: &Path, _ctx: &SpecContext) -> Result<Vec<MetricReport>> {
        let grid = GridManifest::load(dir)?;
        let (first, rest) = grid
            .cells
            .split_first()
            .ok_or_else(|| ServiceError::validation("walk has no cells"))?;
        let reference = grid.run(dir, first)?.samples()?;
        let cutoff = layout_cutoff(&reference[0])?;
        let mut reports = Vec::new();
        for cell in rest {
            let samples = grid.run(dir, cell)?.samples()?;
            let mut total = 0.0;
            for (a, b) in reference.iter().zip(&samples) {
                total += layout_preservation(a, b, cutoff)?;
            }
            let value = total / reference.len().min(samples.len()) as f64;
            reports.push(
                MetricReport::at_most(format!("layout_preservation{:?}", cell.index), value, 1.0)
                    .with_meta("values", &cell.values)
                    .with_meta("run_id", &cell.run_id)
                    .with_meta("cutoff", cutoff),
            );
        }
        Ok(reports)
    }
}

/// Coarse-to-fine check on a run's norm maps.
pub struct NormMaps;

impl DiagnoseSuite for NormMaps {
    fn name(&self) -> &'static str {
        "normmaps"
    }

    fn run(&self, dir: &Path, _ctx: &SpecContext) -> Result<Vec<MetricReport>> {
        let run = StoredRun::load(dir)?;
        let maps = &run.manifest.normmaps;
        if maps.is_empty() {
            return Err(ServiceError::validation("run did not emit norm maps"));
        }
        let nearest = |t: f64| {
            maps.iter()
                .min_by(|a, b| (a.t - t).abs().total_cmp(&(b.t - t).abs()))
                .expect("nonempty")
        };
        let (early, late) = (nearest(1.0), nearest(0.2));
        let first = read_field(&run.dir.join(&early.field))?;
        let cutoff = layout_cutoff(&first)?;
        let share_early = low_band_share(&first, cutoff)?;
        let share_late = low_band_share(&read_field(&run.dir.join(&late.field))?, cutoff)?;
        Ok(vec![MetricReport::above("low_band_share_gap", share_early - share_late, 0.0)
            .with_meta("t_early", early.t)
            .with_meta("t_late", late.t)
            .with_meta("share_early", share_early)
            .with_meta("share_late", share_late)
            .with_meta("cutoff", cutoff)])
    }
}

/// Quarter of the shorter side, the layout band used throughout.
pub fn layout_cutoff(f: &Field) -> Result<usize> {
    let (h, w) = f
        .shape()
        .dims2()
        .ok_or_else(|| ServiceError::validation("layout metrics need grid-shaped samples"))?;
    Ok((h.min(w) / 4).max(1))
}

#[derive(Clone)]
pub struct SuiteRegistry {
    suites: BTreeMap<&'static str, Arc<dyn DiagnoseSuite>>,
}

impl Default for SuiteRegistry {
    fn default() -> Self {
        let mut r = SuiteRegistry { suites: BTreeMap::new() };
        r.register(Arc::new(GaussianOracle));
        r.register(Arc::new(Unconditional));
        r.register(Arc::new(Layout));
        r.register(Arc::new(NormMaps));
        r
    }
}

impl SuiteRegistry {
    pub fn register(&mut self, suite: Arc<dyn DiagnoseSuite>) {
        self.suites.insert(suite.name(), suite);
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.suites.keys().copied().collect()
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn DiagnoseSuite>> {
        self.suites.get(name).cloned().ok_or_else(|| {
            ServiceError::validation(format!("unknown suite `{name}`; known: {}", self.names().join(", ")))
        })
    }
}
