//! Command-line surface. Exit codes: 0 success, 1 a metric failed,
//! 2 invalid input, 3 runtime failure.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use guidewalk_core::diagnostics::reports_to_json;
use guidewalk_core::walk::{InterpSpec, WalkSpec};
use guidewalk_core::RunSpec;
use serde_json::json;

use crate::error::{Result, ServiceError};
use crate::exec::{run_spec, SpecContext};
use crate::http::{serve, AppState};
use crate::plans::{run_interp, run_walk};
use crate::store::Store;
use crate::suites::SuiteRegistry;

#[derive(Debug, Parser)]
#[command(name = "guidewalk", version, about = "Guided diffusion sampling against analytic denoisers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one RunSpec into the artifact store.
    Sample {
        spec: PathBuf,
        #[arg(long, env = "GUIDEWALK_STORE")]
        out: PathBuf,
        #[arg(long, env = "GUIDEWALK_MODELS")]
        models: Option<PathBuf>,
    },
    /// Run every cell of a WalkSpec.
    Walk {
        spec: PathBuf,
        #[arg(long, env = "GUIDEWALK_STORE")]
        out: PathBuf,
        #[arg(long, env = "GUIDEWALK_MODELS")]
        models: Option<PathBuf>,
        /// Cells executed concurrently.
        #[arg(long, default_value_t = default_jobs())]
        jobs: usize,
    },
    /// Run a two-style interpolation.
    Interp {
        spec: PathBuf,
        #[arg(long, env = "GUIDEWALK_STORE")]
        out: PathBuf,
        #[arg(long, env = "GUIDEWALK_MODELS")]
        models: Option<PathBuf>,
        #[arg(long, default_value_t = default_jobs())]
        jobs: usize,
    },
    /// Run a metric suite over a run or walk directory.
    Diagnose {
        dir: PathBuf,
        #[arg(long)]
        suite: String,
        #[arg(long, env = "GUIDEWALK_MODELS")]
        models: Option<PathBuf>,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, env = "GUIDEWALK_STORE")]
        store: PathBuf,
        #[arg(long, env = "GUIDEWALK_MODELS")]
        models: Option<PathBuf>,
    },
}

fn default_jobs() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

fn read_doc(path: &Path) -> Result<(String, SpecContext)> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ServiceError::validation(format!("cannot read {}: {e}", path.display())))?;
    let base_dir = path.parent().map(|p| {
        if p.as_os_str().is_empty() {
            PathBuf::from(".")
        } else {
            p.to_path_buf()
        }
    });
    Ok((text, SpecContext { base_dir, model_dir: None }))
}

/// Executes a parsed command and returns the process exit code.
pub fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Sample { spec, out, models } => {
            let (text, mut ctx) = read_doc(&spec)?;
            ctx.model_dir = models;
            let spec = RunSpec::from_json(&text)?;
            let store = Store::open(out)?;
            let outcome = run_spec(&store, &spec, &ctx)?;
            println!("{}", json!({ "run_id": outcome.run_id, "dir": outcome.dir, "created": outcome.created }));
            Ok(0)
        }
        Command::Walk { spec, out, models, jobs } => {
            let (text, mut ctx) = read_doc(&spec)?;
            ctx.model_dir = models;
            let spec = WalkSpec::from_json(&text)?;
            let store = Store::open(out)?;
            let outcome = run_walk(&store, &spec, &ctx, jobs)?;
            println!("{}", serde_json::to_string(&outcome)?);
            Ok(0)
        }
        Command::Interp { spec, out, models, jobs } => {
            let (text, mut ctx) = read_doc(&spec)?;
            ctx.model_dir = models;
            let spec = InterpSpec::from_json(&text)?;
            let store = Store::open(out)?;
            let outcome = run_interp(&store, &spec, &ctx, jobs)?;
            println!("{}", serde_json::to_string(&outcome)?);
            Ok(0)
        }
        Command::Diagnose { dir, suite, models } => {
            let suite = SuiteRegistry::default().get(&suite)?;
            let ctx = SpecContext {
                base_dir: Some(PathBuf::from(".")),
                model_dir: models,
            };
            let reports = suite.run(&dir, &ctx)?;
            println!("{}", reports_to_json(&reports));
            Ok(if reports.iter().all(|r| r.pass) { 0 } else { 1 })
        }
        Command::Serve { port, store, models } => {
            let store = Store::open(store)?;
            let state = AppState::new(store, SpecContext { base_dir: None, model_dir: models });
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(serve(state, port))?;
            Ok(0)
        }
    }
}
