//! Stage-by-stage pipeline driver over the `atlasprompt` library.
//!
//! A run lives in a work directory holding `config.json`, `manifest.json`
//! and one subdirectory per stage. Each stage records the hash of its inputs
//! and the sha256 of every file it wrote; re-running a stage whose inputs are
//! unchanged is a no-op.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub mod config;
pub mod manifest;
pub mod pipeline;
mod data;
pub mod stages;

pub use config::PipelineConfig;
pub use manifest::{RunManifest, StageRecord};
pub use pipeline::{Pipeline, StageOutcome};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Phantom,
    Register,
    Prompt,
    Train,
    Infer,
    Fuse,
    Evaluate,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Phantom,
        Stage::Register,
        Stage::Prompt,
        Stage::Train,
        Stage::Infer,
        Stage::Fuse,
        Stage::Evaluate,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Phantom => "phantom",
            Stage::Register => "register",
            Stage::Prompt => "prompt",
            Stage::Train => "train",
            Stage::Infer => "infer",
            Stage::Fuse => "fuse",
            Stage::Evaluate => "evaluate",
            Stage::Report => "report",
        }
    }

    /// Stages whose outputs this one reads.
    pub fn upstream(self) -> &'static [Stage] {
        match self {
            Stage::Phantom => &[],
            Stage::Register => &[Stage::Phantom],
            Stage::Prompt => &[Stage::Register],
            Stage::Train => &[Stage::Phantom, Stage::Register],
            Stage::Infer => &[Stage::Phantom, Stage::Register, Stage::Prompt, Stage::Train],
            Stage::Fuse => &[Stage::Infer],
            Stage::Evaluate => &[Stage::Phantom, Stage::Fuse],
            Stage::Report => &[Stage::Phantom, Stage::Evaluate],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| format!("unknown stage '{s}'"))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("stage order violation: {0}")]
    StageOrder(String),

    #[error("stale artifact: {0}")]
    Stale(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] atlasprompt::Error),
}

impl CliError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// Process exit status: 2 configuration, 3 stage order or stale input,
    /// 4 numerical failure, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        use atlasprompt::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::StageOrder(_) | CliError::Stale(_) => 3,
            CliError::Core(E::Numerical(_) | E::Diverged { .. }) => 4,
            _ => 1,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
