//! CLI errors and their exit codes.

use thiserror::Error;
use xplain_core::Error as CoreError;

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_LOAD: i32 = 3;
pub const EXIT_COMPILE: i32 = 4;
pub const EXIT_RUNTIME: i32 = 5;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("load error: {0}")]
    Load(CoreError),

    #[error("compile error: {0}")]
    Compile(CoreError),

    #[error("runtime error: {0}")]
    Runtime(CoreError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Load(_) => EXIT_LOAD,
            CliError::Compile(_) => EXIT_COMPILE,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Tags a core result with the stage it came from. Configuration errors are
/// usage errors at every stage.
pub trait Stage<T> {
    fn at_load(self) -> CliResult<T>;
    fn at_compile(self) -> CliResult<T>;
    fn at_runtime(self) -> CliResult<T>;
}

fn tag(e: CoreError, f: fn(CoreError) -> CliError) -> CliError {
    match e {
        CoreError::Config(msg) => CliError::Usage(msg),
        other => f(other),
    }
}

impl<T> Stage<T> for xplain_core::Result<T> {
    fn at_load(self) -> CliResult<T> {
        self.map_err(|e| tag(e, CliError::Load))
    }

    fn at_compile(self) -> CliResult<T> {
        self.map_err(|e| tag(e, CliError::Compile))
    }

    fn at_runtime(self) -> CliResult<T> {
        self.map_err(|e| tag(e, CliError::Runtime))
    }
}
