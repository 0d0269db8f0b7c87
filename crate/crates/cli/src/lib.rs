//! Command-line driver for `xplain-core`: single analyses, method grids,
//! parameter sweeps, bounding-box ratios, perturbation curves and the
//! setup-versus-run benchmark.
//!
//! Exit codes: 0 success, 2 usage or configuration, 3 load, 4 compile or
//! incompatibility, 5 runtime or domain.

pub mod cli;
pub mod error;
pub mod files;
pub mod method_spec;
pub mod workflows;

pub use cli::run;
pub use error::{CliError, CliResult};
