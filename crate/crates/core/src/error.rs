use thiserror::Error;

use crate::schedule::Violation;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("config error: {0}")]
    Config(String),

    /// A query row finished without attending to any key.
    #[error("degenerate row {row}: no visible keys were absorbed")]
    DegenerateRow { row: usize },

    #[error("invalid schedule: {} violation(s), first: {}", .0.len(), .0[0])]
    Schedule(Vec<Violation>),

    #[error("state error: {0}")]
    State(String),

    #[error("transport error: {0}")]
    Transport(String),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
