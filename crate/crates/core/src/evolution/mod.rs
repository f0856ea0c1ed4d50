//! Operation-priority evolutionary search, with vanilla-EA and random-search
//! baselines sharing the same loop, history schema and checkpoints.

mod evaluators;
mod search;
mod stats;

pub use evaluators::{FnEvaluator, SyntheticFitness, TrainingEvaluator};
pub use search::{
    candidate_seed, read_history, run_persistent, Algorithm, Candidate, Checkpoint, Evaluation, Evaluator,
    HistoryRecord, Search, SearchConfig, SearchState, CHECKPOINT_FILE, CHECKPOINT_VERSION, EVALUATOR_FILE,
    HISTORY_FILE,
};
pub use stats::{ucb, UcbStats};

use thiserror::Error;

use crate::search_space::SearchSpaceError;

#[derive(Debug, Error)]
pub enum EvolutionError {
    #[error("invalid search config: {0}")]
    Config(String),
    #[error("score {0} is outside [0, 1]")]
    ScoreOutOfRange(f64),
    #[error("kernel size {0} is not in the menu")]
    Kernel(usize),
    #[error("population is empty: every candidate failed evaluation")]
    EmptyPopulation,
    #[error(transparent)]
    Space(#[from] SearchSpaceError),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("history error: {0}")]
    History(String),
    #[error("evaluator error: {0}")]
    Evaluator(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EvolutionError>;
