use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WellError {
    #[error("input error: {0}")]
    Input(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("incompatible target: {0}")]
    Compatibility(String),
    #[error("unreachable direction: {0}")]
    Unreachable(String),
    #[error("ill-conditioned Gram matrix (condition {cond:.3e}): {context}")]
    IllConditioned { cond: f64, context: String },
    #[error("degenerate family (Gram condition {cond:.3e}); increase eta")]
    DegenerateFamily { cond: f64 },
    #[error("newton failed in {stage} after {} iterations, residuals {history:?}", history.len())]
    NewtonFailed { stage: String, history: Vec<f64> },
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl WellError {
    /// Attach a stage tag to an error raised deeper in the pipeline.
    pub fn in_stage(self, stage: &str) -> WellError {
        match self {
            WellError::NewtonFailed { stage: s, history } => WellError::NewtonFailed {
                stage: format!("{stage}/{s}"),
                history,
            },
            WellError::Numerical(m) => WellError::Numerical(format!("[{stage}] {m}")),
            WellError::Precondition(m) => WellError::Precondition(format!("[{stage}] {m}")),
            WellError::Input(m) => WellError::Input(format!("[{stage}] {m}")),
            WellError::IllConditioned { cond, context } => WellError::IllConditioned {
                cond,
                context: format!("[{stage}] {context}"),
            },
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, WellError>;
