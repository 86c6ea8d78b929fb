use thiserror::Error;

/// Errors raised by the numerical routines in this crate.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied value violates an operation's precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Array shapes disagree.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A matrix that must be symmetric positive (semi)definite is not.
    #[error("matrix is not {kind}: {detail}")]
    NotPositive { kind: &'static str, detail: String },

    /// A time argument lies outside the admissible range for the operation.
    #[error("time {t} outside admissible range {range}")]
    TimeRange { t: f64, range: &'static str },

    /// A NaN or infinity appeared during SDE integration.
    #[error("non-finite state at integration step {step} (t = {t})")]
    NonFiniteState { step: usize, t: f64 },

    /// A NaN or infinity appeared in a loss evaluation.
    #[error("non-finite loss at batch row {row}")]
    NonFiniteLoss { row: usize },

    /// Training loss exceeded the divergence guard.
    #[error("training diverged at step {step}: loss {loss:e}")]
    Diverged { step: usize, loss: f64 },

    /// The Gaussian flow left the admissible state space.
    #[error("flow aborted at l = {l}: {detail}")]
    FlowAborted { l: f64, detail: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// True for failures caused by numerics (divergence, NaN) rather than by
    /// bad input; the CLI maps these to a distinct exit status.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFiniteState { .. }
                | Error::NonFiniteLoss { .. }
                | Error::Diverged { .. }
                | Error::FlowAborted { .. }
        )
    }
}
