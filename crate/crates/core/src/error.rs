use thiserror::Error;

/// Errors surfaced by the training framework.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: `{lhs_name}` has shape {lhs:?}, `{rhs_name}` has shape {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs_name: String,
        rhs_name: String,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("unfed input `{0}`")]
    UnfedInput(String),

    #[error("backward requires a scalar loss node, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-derivative backward present: node `{0}` is a gradient reversal")]
    NonDerivativeBackward(String),

    #[error(
        "infeasible alignment: {frames} frames cannot emit {labels} labels \
         ({min_frames} frames required)"
    )]
    InfeasibleAlignment {
        frames: usize,
        labels: usize,
        min_frames: usize,
    },

    #[error("enumeration budget exceeded: {paths} paths > {budget}")]
    EnumerationBudget { paths: u128, budget: u128 },

    #[error("reference label sequence is empty")]
    EmptyReference,

    #[error("numerical collapse: {0}")]
    NumericalCollapse(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("corpus error: {0}")]
    Corpus(String),

    #[error("training aborted at step {step}: non-finite {component} ({value})")]
    NanAbort {
        step: u64,
        component: String,
        value: f64,
    },

    #[error("probe error: {0}")]
    Probe(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures of numerics (as opposed to user or config mistakes).
    /// The CLI maps these to a distinct exit code.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NanAbort { .. } | Error::NumericalCollapse(_) | Error::NonScalarLoss(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
