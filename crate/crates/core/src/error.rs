use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{kind} id {id} not found")]
    IdNotFound { kind: &'static str, id: usize },

    #[error("triplet ({0}, {1}, {2}) already present")]
    DuplicateTriplet(usize, usize, usize),

    #[error("need {needed} irrelevant entities but only {available} are available")]
    NotEnoughIrrelevant { needed: usize, available: usize },

    #[error("dataset generation failed: {0}")]
    GenerationFailed(String),

    #[error("sequence has no maskable token")]
    NothingToMask,

    #[error("no mention aligns with a node of the subgraph")]
    NoAlignablePair,

    #[error("shape error: {0}")]
    Shape(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("rank deficient: {0}")]
    Rank(String),

    #[error("sequence of {len} rows exceeds maximum length {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("invalid span {start}..{end} over {len} rows")]
    Span {
        start: usize,
        end: usize,
        len: usize,
    },

    #[error("no positions to score")]
    NothingToScore,

    #[error("node {0} has no source label")]
    LabelMissing(usize),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("report is empty: {0}")]
    EmptyReport(String),

    #[error("parse error in {path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable tag, used by the CLI error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::IdNotFound { .. } => "IdNotFound",
            Error::DuplicateTriplet(..) => "DuplicateTriplet",
            Error::NotEnoughIrrelevant { .. } => "NotEnoughIrrelevant",
            Error::GenerationFailed(_) => "GenerationFailed",
            Error::NothingToMask => "NothingToMask",
            Error::NoAlignablePair => "NoAlignablePair",
            Error::Shape(_) => "ShapeError",
            Error::DegenerateInput(_) => "DegenerateInput",
            Error::Rank(_) => "RankError",
            Error::SequenceTooLong { .. } => "SequenceTooLong",
            Error::Span { .. } => "SpanError",
            Error::NothingToScore => "NothingToScore",
            Error::LabelMissing(_) => "LabelMissing",
            Error::Config(_) => "ConfigError",
            Error::Checkpoint(_) => "CheckpointError",
            Error::EmptyReport(_) => "EmptyReport",
            Error::Parse { .. } => "ParseError",
            Error::Io(_) => "IoError",
            Error::Json(_) => "JsonError",
        }
    }
}
