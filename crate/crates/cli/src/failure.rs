//! Process outcome classes and their exit codes.

use std::fmt;

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_STAGE: u8 = 3;

#[derive(Debug)]
pub enum Failure {
    /// Bad arguments, unreadable inputs, invalid config. Nothing was written.
    Config(anyhow::Error),
    Stage {
        stage: String,
        source: anyhow::Error,
    },
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Config(_) => EXIT_CONFIG,
            Failure::Stage { .. } => EXIT_STAGE,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Config(e) => write!(f, "config error: {e:#}"),
            Failure::Stage { stage, source } => write!(f, "stage `{stage}` failed: {source:#}"),
        }
    }
}

pub type CliResult<T> = Result<T, Failure>;

pub trait Classify<T> {
    fn config(self) -> CliResult<T>;
    fn stage(self, name: &str) -> CliResult<T>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn config(self) -> CliResult<T> {
        self.map_err(|e| Failure::Config(e.into()))
    }

    fn stage(self, name: &str) -> CliResult<T> {
        self.map_err(|e| Failure::Stage {
            stage: name.to_string(),
            source: e.into(),
        })
    }
}

pub fn config_err<T>(msg: impl fmt::Display) -> CliResult<T> {
    Err(Failure::Config(anyhow::anyhow!("{msg}")))
}
