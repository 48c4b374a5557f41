use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum HsclError {
    #[error("degenerate embedding: vector norm {0:e} is below the 1e-12 guard")]
    DegenerateEmbedding(f64),

    #[error("anchor without positives (view {0})")]
    AnchorWithoutPositives(usize),

    #[error("all-zero weights")]
    AllZeroWeights,

    #[error("loss divergence at epoch {epoch}, step {step}: {detail}")]
    LossDivergence {
        epoch: usize,
        step: u64,
        detail: String,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("model is untrained")]
    Untrained,

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("infeasible scenario: {0}")]
    InfeasibleScenario(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl HsclError {
    /// True for failures caused by the numerics (divergence, NaN, degenerate vectors)
    /// rather than by bad input or I/O.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            HsclError::DegenerateEmbedding(_)
                | HsclError::LossDivergence { .. }
                | HsclError::NonFinite(_)
                | HsclError::AllZeroWeights
        )
    }
}

pub type Result<T> = std::result::Result<T, HsclError>;
