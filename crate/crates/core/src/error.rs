use thiserror::Error;

use crate::env::ActionId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("state at depth {depth} has reached the depth limit {max_depth}")]
    DepthExceeded { depth: usize, max_depth: usize },
    #[error("state is already answered; no further steps are possible")]
    AlreadyAnswered,
    #[error("action {0} is not legal in this state")]
    IllegalAction(ActionId),
    #[error("action {0} is not a terminal action")]
    NotTerminal(ActionId),
    #[error("prefix is not a legal step sequence for question {question_id}: {source}")]
    IllegalPrefix {
        question_id: u64,
        #[source]
        source: Box<Error>,
    },
    #[error("node {0} has already been expanded")]
    AlreadyExpanded(usize),
    #[error("node {0} is terminal and cannot be expanded")]
    TerminalNode(usize),
    #[error("forest for question {0} has not been labeled")]
    UnlabeledForest(u64),
    #[error("unknown question id {0}")]
    UnknownQuestion(u64),
    #[error("empty batch")]
    EmptyBatch,
    #[error("empty dataset")]
    EmptyDataset,
    #[error("no pretrain checkpoint available for the svpo stage")]
    MissingCheckpoint,
    #[error("held-out question {0} also appears in the training set")]
    Overlap(u64),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
    #[error("{path}: {source}")]
    Read {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn read(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::Read {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn illegal_prefix(question_id: u64, source: Error) -> Self {
        Error::IllegalPrefix {
            question_id,
            source: Box::new(source),
        }
    }

    /// Wraps an error with the name of the pipeline stage that produced it.
    pub fn in_stage(self, stage: &'static str) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage,
                source: Box::new(e),
            },
        }
    }

    pub fn is_config(&self) -> bool {
        match self {
            Error::Config(_) => true,
            Error::Stage { source, .. } => source.is_config(),
            _ => false,
        }
    }
}
