//! Pipeline plumbing behind the `partgrasp` binary: run config, object specs,
//! the grasp file format and the exit-code mapping.

pub mod commands;
pub mod config;
pub mod grasps;

use std::fmt;
use std::path::Path;

pub const EXIT_IO: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_MISSING_CHECKPOINT: u8 = 3;
pub const EXIT_VERSION: u8 = 4;
pub const EXIT_UNRESOLVABLE: u8 = 5;
pub const EXIT_INVALID: u8 = 6;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Io(String),
    MissingCheckpoint(String),
    Core(partgrasp::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        use partgrasp::Error as E;
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Io(_) => EXIT_IO,
            CliError::MissingCheckpoint(_) => EXIT_MISSING_CHECKPOINT,
            CliError::Core(e) => match e {
                E::Io(_) | E::GenerationFailed(_) | E::NonFinite { .. } | E::Unstable { .. } => EXIT_IO,
                E::VersionMismatch { .. } => EXIT_VERSION,
                E::UnresolvablePrompt(_) => EXIT_UNRESOLVABLE,
                E::InvalidInput(_)
                | E::UnknownCategory { .. }
                | E::CapacityExceeded { .. }
                | E::Malformed { .. }
                | E::Json(_) => EXIT_INVALID,
            },
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage: {m}"),
            CliError::Io(m) => write!(f, "i/o: {m}"),
            CliError::MissingCheckpoint(p) => write!(f, "checkpoint not found: {p}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<partgrasp::Error> for CliError {
    fn from(e: partgrasp::Error) -> Self {
        CliError::Core(e)
    }
}

/// Fails fast when `path` cannot be read.
pub fn require_input(path: &Path) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Io(format!("{}: no such file", path.display())))
    }
}

/// Fails fast when the directory that would hold `path` does not exist.
pub fn require_output(path: &Path) -> Result<(), CliError> {
    match path.parent() {
        Some(d) if !d.as_os_str().is_empty() && !d.is_dir() => {
            Err(CliError::Io(format!("{}: no such directory", d.display())))
        }
        _ => Ok(()),
    }
}

pub fn require_checkpoint(path: &Path) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::MissingCheckpoint(path.display().to_string()))
    }
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    std::fs::write(path, bytes).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}
