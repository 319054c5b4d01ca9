use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, HyperGrid};
use super::report::{mean_std, Summary};
use super::run::{run_experiment, DataSplits, RunRecord};
use crate::data::Dataset;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridOptions {
    /// Fresh-seed re-runs of the winning configuration.
    pub repeats: usize,
    /// Epochs per grid point; the re-runs use the configured epochs.
    pub grid_epochs: Option<usize>,
}

impl Default for GridOptions {
    fn default() -> Self {
        Self {
            repeats: 5,
            grid_epochs: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridOutcome {
    pub best: ExperimentConfig,
    pub search: Vec<RunRecord>,
    pub repeats: Vec<RunRecord>,
    /// Test accuracy over the successful re-runs.
    pub summary: Summary,
}

/// Picks the best validation accuracy; ties go to the smaller learning rate,
/// then to the earlier-listed γ or α.
pub fn select_best<'a>(records: &'a [RunRecord], grid: &HyperGrid) -> Result<&'a RunRecord> {
    records
        .iter()
        .filter(|r| !r.failed())
        .max_by(|a, b| {
            a.best_val_accuracy()
                .partial_cmp(&b.best_val_accuracy())
                .unwrap_or(Ordering::Equal)
                .then_with(|| {
                    b.config
                        .learning_rate
                        .partial_cmp(&a.config.learning_rate)
                        .unwrap_or(Ordering::Equal)
                })
                .then_with(|| grid.extra_rank(&b.config).cmp(&grid.extra_rank(&a.config)))
                .then(Ordering::Greater)
        })
        .ok_or(Error::AllRunsFailed)
}

fn run_all(configs: &[ExperimentConfig], train_file: &Dataset, test: &Dataset) -> Result<Vec<RunRecord>> {
    configs
        .par_iter()
        .map(|cfg| run_experiment(cfg, &DataSplits::new(cfg, train_file, test.clone())?))
        .collect()
}

/// Searches `grid` around `base`, then re-runs the winner with seeds
/// `base.seed + 0..repeats`.
pub fn grid_search(
    base: &ExperimentConfig,
    grid: &HyperGrid,
    opts: &GridOptions,
    train_file: &Dataset,
    test: &Dataset,
) -> Result<GridOutcome> {
    let mut points = grid.points(base);
    if points.is_empty() {
        return Err(Error::Config("empty hyperparameter grid".into()));
    }
    if let Some(e) = opts.grid_epochs {
        for p in &mut points {
            p.epochs = e;
        }
    }
    let search = run_all(&points, train_file, test)?;
    let mut best = select_best(&search, grid)?.config.clone();
    best.epochs = base.epochs;
    let reruns: Vec<ExperimentConfig> = (0..opts.repeats as u64)
        .map(|r| ExperimentConfig {
            seed: base.seed + r,
            ..best.clone()
        })
        .collect();
    let repeats = run_all(&reruns, train_file, test)?;
    let accs: Vec<f64> = repeats.iter().filter_map(|r| r.test_accuracy).collect();
    let (mean, std) = mean_std(&accs);
    Ok(GridOutcome {
        best,
        search,
        repeats,
        summary: Summary {
            mean,
            std,
            runs: accs.len(),
        },
    })
}
