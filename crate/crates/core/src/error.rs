use thiserror::Error;

use crate::sim::ScenarioError;
use crate::walkthrough::WalkthroughError;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty trajectory")]
    EmptyTrajectory,
    #[error("invalid turn: {0}")]
    InvalidTurn(String),
    #[error("non-finite reward")]
    NonFiniteReward,
    #[error("context overflow: {len} tokens exceeds context length {max}")]
    ContextOverflow { len: usize, max: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("gradient overflow")]
    GradientOverflow,
    #[error("non-finite logits")]
    NonFiniteLogits,
    #[error("episode finished")]
    EpisodeFinished,
    #[error("episode still running")]
    EpisodeRunning,
    #[error("group of size {0} has no relative advantage (need at least 2)")]
    GroupTooSmall(usize),
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite gradient at update {0}")]
    NonFiniteGradient(usize),
    #[error("non-finite parameters after update {0}")]
    NonFiniteParameters(usize),
    #[error("non-finite loss at update {0}")]
    NonFiniteLoss(usize),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("replay line {line}: {message}")]
    Replay { line: usize, message: String },
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Walkthrough(#[from] WalkthroughError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
