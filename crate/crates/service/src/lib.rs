//! Batch CLI and HTTP service for guided sampling runs.
//!
//! Both surfaces go through [`exec::prepare`] and [`exec::execute`], which
//! write one immutable directory per run into a content-addressed [`Store`].

pub mod cli;
pub mod error;
pub mod exec;
pub mod http;
pub mod plans;
pub mod store;
pub mod suites;

pub use error::{Result, ServiceError};
pub use exec::{execute, prepare, run_many, run_spec, RunManifest, RunOutcome, SpecContext};
pub use store::{run_id, Store};
