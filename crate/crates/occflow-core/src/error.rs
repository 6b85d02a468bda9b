//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Back-projection or reprojection hit a point at or behind the camera.
    #[error("non-positive camera depth ({0})")]
    NonPositiveDepth(f64),

    /// A ray direction could not be normalized.
    #[error("degenerate ray: zero-length direction")]
    DegenerateRay,

    /// Ray misses the grid volume entirely.
    #[error("ray does not intersect the grid volume")]
    NoIntersection,

    /// Log-range loss received a non-positive range.
    #[error("non-positive range in log-range loss ({0})")]
    NonPositiveRange(f64),

    /// A metric was asked to average over an empty set of valid pixels.
    #[error("empty evaluation set: no valid pixels/rays after masking")]
    EmptyEvalSet,

    /// Backward-in-time supervision has no earlier frame to use.
    #[error("single frame: no earlier frame available for backward supervision")]
    SingleFrame,

    /// Stage 2 needs optical-flow cues the workspace does not provide.
    #[error("stage 2 requested but workspace has no flow cue maps")]
    MissingFlowCues,

    /// Optimization produced a NaN or infinite gradient.
    #[error("non-finite gradient at iteration {iter} ({context})")]
    NonFiniteGradient { iter: usize, context: String },

    /// Workspace manifest is malformed or references missing files.
    #[error("manifest: {0}")]
    Manifest(String),

    /// A file codec rejected its input; names the offending path.
    #[error("codec error in `{path}`: {msg}")]
    Codec { path: String, msg: String },

    /// Grids/maps with incompatible shapes were combined.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// Run configuration failed validation.
    #[error("config: {0}")]
    Config(String),

    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Shorthand for codec failures.
    pub fn codec(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Codec {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
