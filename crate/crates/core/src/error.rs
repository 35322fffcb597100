use thiserror::Error;

use crate::factor_graph::{FactorId, VariableId};

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("variable {0:?} expects dimension {expected}, got {got}", expected = .1, got = .2)]
    DimensionMismatch(VariableId, usize, usize),

    #[error("factor references missing variable {0:?}")]
    MissingVariable(VariableId),

    #[error("factor {0:?} is malformed: {1}")]
    MalformedFactor(Option<FactorId>, String),

    #[error("frame mismatch: {0}")]
    FrameMismatch(String),

    #[error("graph has no prior or fixed variable; gauge is unconstrained")]
    GaugeFreedom,

    #[error("graph has no factors")]
    EmptyGraph,

    #[error("plan validation failed for `{id}`: {reason}")]
    PlanValidation { id: String, reason: String },

    #[error("parse error in {context}: {source}")]
    Parse {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("structural error: {0}")]
    Structural(String),

    #[error("simulation error: {0}")]
    Simulation(String),

    #[error("merge refused: {0}")]
    MergeRefused(String),

    #[error("generation failed: {0}")]
    Generation(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
