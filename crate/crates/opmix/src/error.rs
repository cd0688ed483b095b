//! Crate-wide error type.
//!
//! Library functions return [`Result`]; panics are reserved for internal
//! invariant violations (indexing bugs), never for bad caller input.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied value violated a precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// KL(p || q) is undefined: q has zero mass where p is positive.
    #[error("kl divergence undefined: '{domain}' has positive source mass but zero target mass")]
    DivergenceUndefined { domain: String },

    /// Too few (or affinely dependent) design points to identify a law fit.
    #[error("underdetermined fit: {0}")]
    UnderdeterminedFit(String),

    /// Training loss became non-finite.
    #[error("training diverged at step {step}: loss = {loss}")]
    TrainingDiverged { step: usize, loss: f64 },

    /// The mixture solver produced a non-finite iterate or objective.
    #[error("solver diverged: {0}")]
    SolverDiverged(String),

    /// A requested computation exceeds a hard size cap.
    #[error("resource limit: {what} = {requested} exceeds cap {cap}")]
    ResourceLimit {
        what: &'static str,
        requested: usize,
        cap: usize,
    },

    /// A persisted artifact failed structural validation (bad magic, checksum, truncation).
    #[error("corrupt artifact: {0}")]
    CorruptArtifact(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// Error annotated with the continual stage it occurred in.
    #[error("stage {stage}: {source}")]
    Stage {
        stage: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn at_stage(self, stage: usize) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
