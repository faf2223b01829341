//! Dataset handles and mixing, the training loop, hyperparameter search, the
//! ablation runner and run-directory output.

mod data;
mod experiments;
mod run;
mod train;

pub use data::{mix_datasets, mix_splits, DatasetHandle, Mix, MixOptions, Sample, SampleRef, Sources};
pub use experiments::{
    ablation_configs, compare, hyperparam_search, run_ablation, search_epochs, AblationRow, LeaderboardEntry, SearchGrid,
    SearchResult,
};
pub use run::{
    open_sources, read_history_csv, run_train, write_ablation, write_combined_history, write_comparison,
    write_history_csv, write_learning_curves, write_leaderboard, RunSummary, HISTORY_CSV_HEADER,
};
pub use train::{
    evaluate_model, train, DataPaths, EpochRecord, ExperimentConfig, LossConfig, LrDecay, OptimizerConfig,
    OptimizerKind, TrainOutcome, TrainingHistory,
};

use thiserror::Error;

use crate::grid::pnm::PnmError;
use crate::losses::LossError;
use crate::model::ModelError;
use crate::synth::SynthError;

#[derive(Error, Debug)]
pub enum HarnessError {
    #[error("dataset {0} has no samples")]
    EmptyDataset(String),

    #[error("scale factor {0} must be positive and finite")]
    BadFactor(f64),

    #[error("invalid experiment config: {0}")]
    BadConfig(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("non-finite model output while evaluating epoch {0}")]
    NonFiniteOutput(usize),

    #[error("{path}: {message}")]
    Io { path: String, message: String },

    #[error(transparent)]
    Model(#[from] ModelError),

    #[error(transparent)]
    Loss(#[from] LossError),

    #[error(transparent)]
    Synth(#[from] SynthError),

    #[error(transparent)]
    Pnm(#[from] PnmError),
}

pub(crate) fn io_err(path: &std::path::Path, e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Io { path: path.display().to_string(), message: e.to_string() }
}
