//! Crate-level error type for the high-level drivers.

use crate::algebra::AlgebraError;
use crate::checkpoint::CheckpointError;
use crate::forward::StepError;
use crate::problem::ProblemError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Algebra(#[from] AlgebraError),
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error(transparent)]
    Step(#[from] StepError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, Error>;
