use std::path::PathBuf;

use thiserror::Error;

use crate::autodiff::ParamStore;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("backward already run on this graph; build a fresh graph")]
    GraphConsumed,

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite gradient for parameter `{param}`")]
    NonFiniteGradient { param: String },

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("sequence of length {len} exceeds max_context {max}")]
    ContextOverflow { len: usize, max: usize },

    #[error("prompt overflows max_context by {overflow} tokens")]
    PromptOverflow { overflow: usize },

    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("task `{task}` has {pool} examples but {needed} are required")]
    PoolTooSmall {
        task: String,
        pool: usize,
        needed: usize,
    },

    #[error("support of size {k} needs {needed} orderings; use the monte-carlo path")]
    TooManyOrderings { k: usize, needed: u128 },

    #[error("exhaustive enumeration needs {needed} evaluations, budget is {budget}; use monte-carlo mode")]
    BudgetExceeded { needed: u128, budget: u128 },

    #[error("metric undefined: {0}")]
    UndefinedMetric(&'static str),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("non-finite loss at epoch {epoch}, step {step}")]
    Divergence {
        epoch: usize,
        step: usize,
        last_good: Box<ParamStore>,
    },

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
