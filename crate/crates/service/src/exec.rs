//! The single execution path behind `sample`, walks and `POST /runs`.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use guidewalk_core::diagnostics::{effective_mean, mean_field_error, norm_map_series, reports_to_json, MetricReport};
use guidewalk_core::fieldio::{encode_field, render_pgm, GrayRange};
use guidewalk_core::oracle::ShapeDoc;
use guidewalk_core::runspec::{Emit, ResolvedRun};
use guidewalk_core::sampler::{run_sampling_with_progress, Trajectory};
use guidewalk_core::{resolve, Denoiser, Field, Resources, RunSpec, SpatialMask, TemporalProfile};
use serde::{Deserialize, Serialize};

use crate::error::{Result, ServiceError};
use crate::store::{run_id, Store};

/// Where relative paths and named model documents are looked up.
#[derive(Debug, Clone, Default)]
pub struct SpecContext {
    pub base_dir: Option<PathBuf>,
    pub model_dir: Option<PathBuf>,
}

impl SpecContext {
    pub fn resources(&self, store: &Store) -> Resources {
        Resources {
            base_dir: self.base_dir.clone(),
            model_dir: self.model_dir.clone(),
            mask_dir: Some(store.mask_dir()),
            ..Default::default()
        }
    }
}

/// A validated run, ready to execute.
#[derive(Debug, Clone)]
pub struct PreparedRun {
    pub run_id: String,
    pub spec: RunSpec,
    pub resolved: ResolvedRun,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RunOutcome {
    pub run_id: String,
    pub dir: PathBuf,
    /// False when the run already existed in the store.
    pub created: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub file: String,
    pub range: GrayRange,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub index: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub image: Option<ImageEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepEntry {
    pub step: usize,
    pub t: f64,
    pub field: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub image: Option<ImageEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryEntry {
    pub step: usize,
    pub t: f64,
    pub term_scales: Vec<f64>,
    pub latent: String,
    pub epsilon: String,
    pub guidance: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskEntry {
    pub term: usize,
    pub file: String,
}

/// `manifest.json` of a run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub model: String,
    pub shape: ShapeDoc,
    pub steps: usize,
    pub samples: Vec<SampleEntry>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub term_masks: Vec<MaskEntry>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub normmaps: Vec<StepEntry>,
    /// Recorded steps of sample 0.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub trajectory: Vec<TrajectoryEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<String>,
}

impl RunManifest {
    pub fn load(dir: &Path) -> Result<RunManifest> {
        let text = std::fs::read_to_string(dir.join("manifest.json"))
            .map_err(|e| ServiceError::NotFound(format!("{}: {e}", dir.display())))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Validates and resolves a spec without running it.
pub fn prepare(store: &Store, spec: &RunSpec, ctx: &SpecContext) -> Result<PreparedRun> {
    let resolved = resolve(spec, &ctx.resources(store))?;
    Ok(PreparedRun {
        run_id: run_id(spec),
        spec: spec.normalized(),
        resolved,
    })
}

/// Runs a prepared spec unless its directory already exists.
pub fn execute(store: &Store, run: &PreparedRun, progress: &(dyn Fn(u64, u64) + Sync)) -> Result<RunOutcome> {
    let dir = store.run_dir(&run.run_id);
    let created = store.commit_dir(&dir, |staging| write_run(staging, run, progress))?;
    Ok(RunOutcome {
        run_id: run.run_id.clone(),
        dir,
        created,
    })
}

pub fn run_spec(store: &Store, spec: &RunSpec, ctx: &SpecContext) -> Result<RunOutcome> {
    execute(store, &prepare(store, spec, ctx)?, &|_, _| {})
}

/// Runs specs on `jobs` worker threads; results keep input order.
pub fn run_many(store: &Store, specs: &[RunSpec], ctx: &SpecContext, jobs: usize) -> Result<Vec<RunOutcome>> {
    let prepared: Vec<PreparedRun> = specs.iter().map(|s| prepare(store, s, ctx)).collect::<Result<_>>()?;
    let slots: Vec<Mutex<Option<Result<RunOutcome>>>> = prepared.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..jobs.clamp(1, prepared.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(run) = prepared.get(i) else { break };
                let out = execute(store, run, &|_, _| {});
                *slots[i].lock().expect("slot lock") = Some(out);
            });
        }
    });
    slots
        .into_iter()
        .map(|s| s.into_inner().expect("slot lock").expect("every slot is filled"))
        .collect()
}

fn write_bytes(dir: &Path, rel: &str, bytes: &[u8]) -> Result<()> {
    let path = dir.join(rel);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

fn write_field(dir: &Path, rel: &str, field: &Field) -> Result<String> {
    write_bytes(dir, rel, &encode_field(field))?;
    Ok(rel.to_string())
}

fn write_image(dir: &Path, rel: &str, field: &Field) -> Result<Option<ImageEntry>> {
    if !field.shape().is_grid() {
        return Ok(None);
    }
    let (bytes, range) = render_pgm(field)?;
    write_bytes(dir, rel, &bytes)?;
    Ok(Some(ImageEntry {
        file: rel.to_string(),
        range,
    }))
}

fn write_run(dir: &Path, run: &PreparedRun, progress: &(dyn Fn(u64, u64) + Sync)) -> Result<()> {
    let spec = &run.spec;
    let ResolvedRun { model, terms, config } = &run.resolved;
    let emit = &spec.outputs.emit;
    let want_normmaps = emit.contains(&Emit::Normmaps);
    let mut config = config.clone();
    if want_normmaps && !config.record_trajectory {
        config = config.with_trajectory(spec.outputs.trajectory_stride);
    }
    config = config.with_trajectory_lanes(1);
    let out = run_sampling_with_progress(model, terms, &config, progress)?;

    write_bytes(dir, "runspec.json", format!("{}\n", spec.canonical_json()).as_bytes())?;
    let mut manifest = RunManifest {
        run_id: run.run_id.clone(),
        model: spec.model.clone(),
        shape: ShapeDoc::from_shape(model.shape()),
        steps: config.schedule.num_steps(),
        samples: Vec::new(),
        term_masks: Vec::new(),
        normmaps: Vec::new(),
        trajectory: Vec::new(),
        metrics: None,
    };
    for (i, sample) in out.samples.iter().enumerate() {
        let field = if emit.contains(&Emit::Fields) {
            Some(write_field(dir, &format!("samples/sample_{i:04}.gwf"), sample)?)
        } else {
            None
        };
        let image = if emit.contains(&Emit::Images) {
            write_image(dir, &format!("images/sample_{i:04}.pgm"), sample)?
        } else {
            None
        };
        manifest.samples.push(SampleEntry { index: i, field, image });
    }
    for (i, term) in terms.iter().enumerate() {
        if let SpatialMask::Field(mask) = &term.gsf.mask {
            let file = write_field(dir, &format!("terms/mask_{i:02}.gwf"), mask)?;
            manifest.term_masks.push(MaskEntry { term: i, file });
        }
    }
    let first: Option<&Trajectory> = out.trajectories.as_ref().and_then(|t| t.first());
    if let Some(traj) = first {
        if want_normmaps {
            let steps = traj.steps.iter().map(|s| s.step);
            for (step, (t, map)) in steps.zip(norm_map_series(traj)?) {
                let field = write_field(dir, &format!("normmaps/step_{step:04}.gwf"), &map)?;
                let image = write_image(dir, &format!("normmaps/step_{step:04}.pgm"), &map)?;
                manifest.normmaps.push(StepEntry { step, t, field, image });
            }
        }
        if spec.outputs.record_trajectory {
            for s in &traj.steps {
                let k = s.step;
                manifest.trajectory.push(TrajectoryEntry {
                    step: k,
                    t: s.t,
                    term_scales: s.term_scales.clone(),
                    latent: write_field(dir, &format!("trajectory/latent_{k:04}.gwf"), &s.latent)?,
                    epsilon: write_field(dir, &format!("trajectory/epsilon_{k:04}.gwf"), &s.epsilon)?,
                    guidance: write_field(dir, &format!("trajectory/guidance_{k:04}.gwf"), &s.guidance)?,
                });
            }
        }
    }
    if emit.contains(&Emit::Metrics) {
        let reports = run_metrics(&run.resolved, &out.samples)?;
        write_bytes(dir, "metrics.json", format!("{}\n", reports_to_json(&reports)).as_bytes())?;
        manifest.metrics = Some("metrics.json".into());
    }
    let text = serde_json::to_string_pretty(&manifest)?;
    write_bytes(dir, "manifest.json", format!("{text}\n").as_bytes())
}

/// Metrics that have a closed-form reference for this run.
pub fn run_metrics(run: &ResolvedRun, samples: &[Field]) -> Result<Vec<MetricReport>> {
    let mut reports = Vec::new();
    let constant = run
        .terms
        .iter()
        .all(|t| matches!(t.gsf.temporal, TemporalProfile::Constant { .. }));
    if constant {
        if let Ok(target) = effective_mean(&run.model, &run.terms, 0.0) {
            let err = mean_field_error(samples, &target)?;
            reports.push(MetricReport::at_most("mu_eff_error", err, 0.1).with_meta("samples", samples.len()));
        }
    }
    Ok(reports)
}
