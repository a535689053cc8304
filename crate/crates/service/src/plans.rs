//! Walks and interpolations: plan, run every cell, write a grid manifest.

use std::path::PathBuf;

use guidewalk_core::walk::{blend_baseline_runs, interpolate_styles, plan_walk_cells, InterpSpec, WalkSpec};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::exec::{run_many, SpecContext};
use crate::store::{sha256_hex, Store};
use crate::suites::{GridCell, GridManifest};

#[derive(Debug, Clone, Serialize)]
pub struct GridOutcome {
    pub id: String,
    pub dir: PathBuf,
    pub run_ids: Vec<String>,
}

fn write_manifest<T: Serialize>(store: &Store, dir: &std::path::Path, manifest: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest)?;
    store.commit_dir(dir, |staging| Ok(std::fs::write(staging.join("manifest.json"), format!("{text}\n"))?))?;
    Ok(())
}

pub fn run_walk(store: &Store, spec: &WalkSpec, ctx: &SpecContext, jobs: usize) -> Result<GridOutcome> {
    let cells = plan_walk_cells(spec)?;
    let specs: Vec<_> = cells.iter().map(|c| c.spec.clone()).collect();
    let outcomes = run_many(store, &specs, ctx, jobs)?;
    let axes = serde_json::to_value(&spec.axes)?;
    let grid: Vec<GridCell> = cells
        .iter()
        .zip(&outcomes)
        .map(|(c, o)| GridCell {
            index: c.index.clone(),
            values: c.values.clone(),
            run_id: o.run_id.clone(),
        })
        .collect();
    let id = sha256_hex(serde_json::to_string(&(("walk", &axes), &grid))?.as_bytes());
    let dir = store.root().join("walks").join(&id);
    write_manifest(
        store,
        &dir,
        &GridManifest {
            walk_id: id.clone(),
            axes,
            cells: grid,
        },
    )?;
    Ok(GridOutcome {
        id,
        dir,
        run_ids: outcomes.into_iter().map(|o| o.run_id).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterpCell {
    pub lambda: f64,
    pub run_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline_run_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterpManifest {
    pub interp_id: String,
    pub a: String,
    pub b: String,
    pub m: f64,
    pub cells: Vec<InterpCell>,
}

pub fn run_interp(store: &Store, spec: &InterpSpec, ctx: &SpecContext, jobs: usize) -> Result<GridOutcome> {
    let guided = interpolate_styles(&spec.base, &spec.style, &spec.a, &spec.b, spec.m, &spec.lambdas)?;
    let mut all = guided.clone();
    if spec.baseline {
        all.extend(blend_baseline_runs(&spec.base, &spec.style, &spec.a, &spec.b, spec.m, &spec.lambdas)?);
    }
    let outcomes = run_many(store, &all, ctx, jobs)?;
    let n = guided.len();
    let cells: Vec<InterpCell> = spec
        .lambdas
        .iter()
        .enumerate()
        .map(|(i, &lambda)| InterpCell {
            lambda,
            run_id: outcomes[i].run_id.clone(),
            baseline_run_id: outcomes.get(n + i).map(|o| o.run_id.clone()),
        })
        .collect();
    let id = sha256_hex(serde_json::to_string(&("interp", &spec.a, &spec.b, spec.m, &cells))?.as_bytes());
    let dir = store.root().join("interps").join(&id);
    write_manifest(
        store,
        &dir,
        &InterpManifest {
            interp_id: id.clone(),
            a: spec.a.clone(),
            b: spec.b.clone(),
            m: spec.m,
            cells,
        },
    )?;
    Ok(GridOutcome {
        id,
        dir,
        run_ids: outcomes.into_iter().map(|o| o.run_id).collect(),
    })
}
