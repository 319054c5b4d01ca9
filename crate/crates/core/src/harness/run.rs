use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::algorithms::TrainingStrategy;
use crate::binarize::clip_latent;
use crate::data::{split_train_val, BatchPipeline, Dataset, Normalization};
use crate::error::{Error, Result};
use crate::graph::{build_model, ModelGraph};
use crate::optim::AdamState;
use crate::packed::PackedModel;
use crate::tensor::{softmax_cross_entropy, Rng, Tensor};

const EVAL_BATCH: usize = 1000;

/// The test split, readable only by the final evaluation of a run.
#[derive(Clone, Debug)]
pub struct SealedTest(Dataset);

impl SealedTest {
    pub fn new(test: Dataset) -> Self {
        Self(test)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Training and validation splits plus the sealed test split.
#[derive(Clone, Debug)]
pub struct DataSplits {
    pub train: Dataset,
    pub val: Dataset,
    test: SealedTest,
    pub normalization: Normalization,
}

impl DataSplits {
    /// Splits `train_file` by `cfg.train_fraction` with a generator derived
    /// from the seed, so every run with that seed sees the same split.
    pub fn new(cfg: &ExperimentConfig, train_file: &Dataset, test: Dataset) -> Result<Self> {
        let source = match cfg.max_train_samples {
            Some(n) => train_file.take(n)?,
            None => train_file.clone(),
        };
        let mut rng = Rng::new(cfg.seed ^ 0x5b117);
        let (train, val) = split_train_val(&source, cfg.train_fraction, &mut rng)?;
        let normalization = Normalization::fit(&train);
        Ok(Self {
            train,
            val,
            test: SealedTest::new(test),
            normalization,
        })
    }

    pub fn load(cfg: &ExperimentConfig, root: &Path) -> Result<Self> {
        let (train, test) = cfg.dataset.load(root)?;
        Self::new(cfg, &train, test)
    }

    pub fn test_len(&self) -> usize {
        self.test.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub epoch: usize,
    pub step: usize,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub epochs: Vec<EpochMetrics>,
    /// Absent when the run failed.
    pub test_accuracy: Option<f64>,
    pub test_loss: Option<f64>,
    /// Peak bytes of retained trace buffers over all steps.
    pub peak_buffer_bytes: usize,
    pub peak_buffer_segments: usize,
    pub wall_seconds: f64,
    pub normalization: Normalization,
    pub failure: Option<Failure>,
}

impl RunRecord {
    pub fn failed(&self) -> bool {
        self.failure.is_some()
    }

    /// Best validation accuracy over the epochs; `-1` for a failed run.
    pub fn best_val_accuracy(&self) -> f64 {
        if self.failed() {
            return -1.0;
        }
        self.epochs
            .iter()
            .map(|e| e.val_accuracy)
            .fold(f64::NEG_INFINITY, f64::max)
            .max(-1.0)
    }
}

/// Mean loss and accuracy of `model` over a dataset, in eval mode.
pub fn evaluate(model: &ModelGraph<f32>, ds: &Dataset, norm: &Normalization) -> Result<(f64, f64)> {
    evaluate_with(ds, norm, model.num_classes, &|x| model.predict(x))
}

/// As [`evaluate`], for a packed deployment model.
pub fn evaluate_packed(model: &PackedModel, ds: &Dataset, norm: &Normalization) -> Result<(f64, f64)> {
    evaluate_with(ds, norm, model.num_classes, &|x| model.forward(x))
}

fn evaluate_with(
    ds: &Dataset,
    norm: &Normalization,
    classes: usize,
    predict: &dyn Fn(&Tensor<f32>) -> Result<Tensor<f32>>,
) -> Result<(f64, f64)> {
    let pipeline = BatchPipeline::eval(EVAL_BATCH, norm.clone());
    let mut rng = Rng::new(0);
    let (mut loss, mut correct) = (0.0, 0usize);
    for idx in pipeline.epoch(ds.len(), &mut rng) {
        let (x, y) = pipeline.batch(ds, &idx, &mut rng)?;
        let logits = predict(&x)?;
        let (l, _) = softmax_cross_entropy(&logits, &Tensor::one_hot(&y, classes)?)?;
        loss += l as f64 * y.len() as f64;
        correct += logits.argmax_rows().iter().zip(&y).filter(|(p, t)| p == t).count();
    }
    let n = ds.len().max(1) as f64;
    Ok((loss / n, correct as f64 / n))
}

fn is_divergence(e: &Error) -> bool {
    match e {
        Error::NonFiniteGradient { .. } | Error::NonFinite { .. } => true,
        Error::AtNode { source, .. } => is_divergence(source),
        _ => false,
    }
}

/// Trains one configuration and evaluates it once on the test split.
pub fn run_experiment(cfg: &ExperimentConfig, data: &DataSplits) -> Result<RunRecord> {
    Ok(run_experiment_with_model(cfg, data)?.0)
}

/// As [`run_experiment`], also returning the trained model.
pub fn run_experiment_with_model(cfg: &ExperimentConfig, data: &DataSplits) -> Result<(RunRecord, ModelGraph<f32>)> {
    run_with_callback(cfg, data, &mut |_| true)
}

/// Runs epochs until `on_epoch` returns false or the configured count is reached.
pub fn run_with_callback(
    cfg: &ExperimentConfig,
    data: &DataSplits,
    on_epoch: &mut dyn FnMut(&EpochMetrics) -> bool,
) -> Result<(RunRecord, ModelGraph<f32>)> {
    cfg.validate()?;
    let start = Instant::now();
    let mut rng = Rng::new(cfg.seed);
    let mut model: ModelGraph<f32> = build_model(&cfg.arch_spec(), &mut rng.fork())?;
    if model.input_shape != data.train.image_shape() {
        return Err(Error::Config(format!(
            "model expects {:?}, data has {:?}",
            model.input_shape,
            data.train.image_shape()
        )));
    }
    let strategy = TrainingStrategy::new(cfg.algorithm, &model, cfg.strategy_params(), &mut rng.fork())?;
    let mut adam = AdamState::new(&model, cfg.adam());
    let mut data_rng = rng.fork();
    let min_batch = if cfg.algorithm == crate::algorithms::AlgorithmKind::Hsic {
        4
    } else {
        1
    };
    let pipeline = BatchPipeline::train(cfg.batch_size, cfg.augment.clone(), data.normalization.clone())?
        .with_min_batch(min_batch);

    let mut record = RunRecord {
        config: cfg.clone(),
        seed: cfg.seed,
        epochs: Vec::new(),
        test_accuracy: None,
        test_loss: None,
        peak_buffer_bytes: 0,
        peak_buffer_segments: 0,
        wall_seconds: 0.0,
        normalization: data.normalization.clone(),
        failure: None,
    };
    'epochs: for epoch in 0..cfg.epochs {
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for (step, idx) in pipeline.epoch(data.train.len(), &mut data_rng).into_iter().enumerate() {
            let (x, y) = pipeline.batch(&data.train, &idx, &mut data_rng)?;
            adam.begin_step();
            let outcome = strategy.step(&mut model, &x, &y, &mut |m, g| {
                adam.update_segment(m, &g)?;
                if cfg.clip_latent {
                    for (node, _) in &g.params {
                        let n = &mut m.nodes[*node];
                        if n.binarize_weights {
                            clip_latent(&mut n.params[0]);
                        }
                    }
                }
                Ok(())
            });
            let stats = match outcome {
                Ok(s) if s.loss.is_finite() => s,
                Ok(s) => {
                    record.failure = Some(Failure {
                        epoch,
                        step,
                        message: format!("loss became {}", s.loss),
                    });
                    break 'epochs;
                }
                Err(e) if is_divergence(&e) => {
                    record.failure = Some(Failure {
                        epoch,
                        step,
                        message: e.to_string(),
                    });
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            record.peak_buffer_bytes = record.peak_buffer_bytes.max(stats.buffers.peak_bytes);
            record.peak_buffer_segments = record.peak_buffer_segments.max(stats.buffers.peak_segments);
            loss_sum += stats.loss * y.len() as f64;
            correct += stats.correct;
            seen += y.len();
        }
        let (val_loss, val_accuracy) = evaluate(&model, &data.val, &data.normalization)?;
        let metrics = EpochMetrics {
            epoch,
            train_loss: loss_sum / seen.max(1) as f64,
            train_accuracy: correct as f64 / seen.max(1) as f64,
            val_loss,
            val_accuracy,
        };
        let keep_going = on_epoch(&metrics);
        record.epochs.push(metrics);
        if !keep_going {
            break;
        }
    }
    if !record.failed() {
        let (loss, acc) = evaluate(&model, &data.test.0, &data.normalization)?;
        record.test_loss = Some(loss);
        record.test_accuracy = Some(acc);
    }
    record.wall_seconds = start.elapsed().as_secs_f64();
    Ok((record, model))
}
