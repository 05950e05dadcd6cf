use thiserror::Error;

/// Errors produced by every layer of the crate, from tensor construction up
/// to the training loop.
#[derive(Debug, Error)]
pub enum SibError {
    #[error("shape mismatch in `{op}`: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("domain error in `{op}`: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("contract violation in `{op}`: {detail}")]
    Contract { op: &'static str, detail: String },

    /// Invalid run configuration. The message lists every violation found,
    /// separated by `; `.
    #[error("config error: {0}")]
    Config(String),

    #[error("parse error at byte {offset}: {detail}")]
    Parse { offset: u64, detail: String },

    #[error("data error for `{path}`: {detail}")]
    Data { path: String, detail: String },

    #[error(
        "non-finite loss at epoch {epoch}, batch {batch}: \
         l_ce={l_ce}, l_fg={l_fg}, l_bg={l_bg}"
    )]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        l_ce: f64,
        l_fg: f64,
        l_bg: f64,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SibError>;

impl SibError {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        SibError::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub fn domain(op: &'static str, detail: impl Into<String>) -> Self {
        SibError::Domain {
            op,
            detail: detail.into(),
        }
    }

    pub fn contract(op: &'static str, detail: impl Into<String>) -> Self {
        SibError::Contract {
            op,
            detail: detail.into(),
        }
    }
}
