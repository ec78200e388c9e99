//! Declarative run-matrix execution on top of `featgeom`: a JSON matrix of
//! run specs is executed stage by stage into a content-addressed workspace,
//! and the completed runs are summarized as CSV reports.

pub mod commands;
pub mod error;
pub mod pipeline;
pub mod reports;
pub mod spec;
pub mod workspace;

pub use error::{CliError, Result};
pub use pipeline::{execute_matrix, execute_run, RunResult, RunStatus};
pub use reports::emit_reports;
pub use spec::{load_run_matrix, parse_run_matrix, RunMatrix, RunSpec};
