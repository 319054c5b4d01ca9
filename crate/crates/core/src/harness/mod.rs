//! Experiment orchestration: configs, runs, grid search and reports.

mod config;
mod grid;
mod report;
mod run;
#[cfg(test)]
mod tests;

pub use config::{ExperimentConfig, HyperGrid};
pub use grid::{grid_search, select_best, GridOptions, GridOutcome};
pub use report::{cells, format_mean_std, mean_std, report, Cell, ReportFormat, ReportOptions, Summary};
pub use run::{
    evaluate, evaluate_packed, run_experiment, run_experiment_with_model, run_with_callback, DataSplits, EpochMetrics,
    Failure, RunRecord, SealedTest,
};
