//! Command-line surface: configuration parsing, checkpoint I/O re-exports and
//! the figure renderers used by the `foveate` binary.

mod config;
mod viz;

pub use config::{documented_keys, parse_config, render_config};
pub use viz::{viz_gaze, viz_shift, GazeOverlay, ZoomSquare, SHIFT_SEPARATOR};

pub use crate::model::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("io: {0}")]
    Io(String),
    #[error("config parse: {0}")]
    Parse(String),
    #[error("bad override: {0}")]
    Override(String),
    #[error("unknown config key `{key}`{}", .suggestion.as_ref().map(|s| format!(" (did you mean `{s}`?)")).unwrap_or_default())]
    UnknownKey {
        key: String,
        suggestion: Option<String>,
    },
    #[error("config type mismatch: {0}")]
    Type(String),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("figure: {0}")]
    Figure(String),
    #[error(transparent)]
    Pipeline(#[from] crate::pipeline::PipelineError),
}
