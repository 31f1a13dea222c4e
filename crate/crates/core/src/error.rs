use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("loss is not connected to a gradient tape")]
    Untracked,

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("unknown class index {class} (model has {classes} classes)")]
    UnknownClass { class: usize, classes: usize },

    #[error("step index {t} outside schedule 0..={max}")]
    StepOutOfRange { t: usize, max: usize },

    #[error("policy ran out of choices at step {0}")]
    ControllerExhausted(usize),

    #[error("zero-norm input: cosine similarity undefined")]
    ZeroNorm,

    #[error("OLS at step {t} is underdetermined: {regressors} regressors but only {rows} observation rows; need at least {needed} trajectories")]
    Underdetermined {
        t: usize,
        rows: usize,
        regressors: usize,
        needed: usize,
    },

    #[error("missing history entry: {branch} score at step {t}")]
    MissingHistory { branch: &'static str, t: usize },

    #[error("training diverged at step {step}")]
    Diverged { step: usize },

    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    /// Process exit code for the CLI: 2 config, 3 missing artifact, 4 numerical, 1 other.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::InvalidArgument(_) | Error::UnknownClass { .. } | Error::StepOutOfRange { .. } => 2,
            Error::MissingArtifact(_) => 3,
            Error::NonFinite(_)
            | Error::Diverged { .. }
            | Error::ZeroNorm
            | Error::Underdetermined { .. } => 4,
            _ => 1,
        }
    }
}
