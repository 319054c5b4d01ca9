use super::*;
use crate::algorithms::AlgorithmKind;
use crate::data::{AugmentConfig, DatasetId};
use crate::graph::Architecture;
use std::path::Path;

fn quick(algorithm: AlgorithmKind) -> ExperimentConfig {
    ExperimentConfig {
        dataset: DatasetId::Synthetic,
        depth: 2,
        width: 32,
        epochs: 2,
        batch_size: 32,
        algorithm,
        augment: AugmentConfig::none(),
        max_train_samples: Some(400),
        ..ExperimentConfig::default()
    }
}

fn splits(cfg: &ExperimentConfig) -> DataSplits {
    DataSplits::load(cfg, Path::new("")).unwrap()
}

#[test]
fn defaults_follow_the_protocol() {
    let c = ExperimentConfig::default();
    assert_eq!(c.batch_size, 128);
    assert_eq!(c.weight_decay, 1e-5);
    assert_eq!((c.adam_beta1, c.adam_beta2), (0.9, 0.999));
    assert_eq!(c.train_fraction, 0.9);
    assert_eq!(c.epochs, 20);
    let sizes: Vec<usize> = AlgorithmKind::ALL
        .iter()
        .map(|&a| {
            HyperGrid::default()
                .points(&ExperimentConfig {
                    algorithm: a,
                    ..c.clone()
                })
                .len()
        })
        .collect();
    assert_eq!(sizes, vec![3, 3, 3, 9, 9]);
}

#[test]
fn toml_round_trips_and_fills_defaults() {
    let c = quick(AlgorithmKind::Hsic);
    assert_eq!(ExperimentConfig::from_toml(&c.to_toml()).unwrap(), c);
    let partial =
        ExperimentConfig::from_toml("algorithm = \"sigprop-tl\"\nalpha = 1.0\narch = \"conv-plain\"\n").unwrap();
    assert_eq!(partial.algorithm, AlgorithmKind::SigpropTl);
    assert_eq!(partial.arch, Architecture::ConvPlain);
    assert_eq!(partial.batch_size, 128);
    assert!(ExperimentConfig::from_toml("bach_size = 3").is_err());
    assert!(ExperimentConfig::from_toml("train_fraction = 1.0").is_err());
}

#[test]
fn untrained_models_sit_near_chance() {
    let mut accs = Vec::new();
    for seed in 0..6 {
        let cfg = ExperimentConfig {
            epochs: 0,
            seed,
            ..quick(AlgorithmKind::Bp)
        };
        let r = run_experiment(&cfg, &splits(&cfg)).unwrap();
        assert!(r.epochs.is_empty());
        accs.push(r.test_accuracy.unwrap());
    }
    let (mean, _) = mean_std(&accs);
    assert!((mean - 0.25).abs() < 0.15, "{accs:?}");
}

#[test]
fn runs_are_deterministic() {
    for kind in AlgorithmKind::ALL {
        let cfg = quick(kind);
        let data = splits(&cfg);
        let mut a = run_experiment(&cfg, &data).unwrap();
        let mut b = run_experiment(&cfg, &data).unwrap();
        a.wall_seconds = 0.0;
        b.wall_seconds = 0.0;
        assert_eq!(a, b, "{kind}");
        let fmt = ReportFormat::Csv;
        assert_eq!(
            report(&[a.clone()], fmt, ReportOptions::default()).unwrap(),
            report(&[b], fmt, ReportOptions::default()).unwrap()
        );
        assert!(!a.failed());
    }
}

#[test]
fn training_learns_the_synthetic_task() {
    let cfg = ExperimentConfig {
        epochs: 4,
        ..quick(AlgorithmKind::Bp)
    };
    let r = run_experiment(&cfg, &splits(&cfg)).unwrap();
    assert!(r.test_accuracy.unwrap() > 0.9, "{:?}", r.test_accuracy);
    assert_eq!(r.epochs.len(), 4);
}

#[test]
fn divergence_marks_the_run_failed() {
    let cfg = ExperimentConfig {
        learning_rate: 1e30,
        ..quick(AlgorithmKind::Bp)
    };
    let r = run_experiment(&cfg, &splits(&cfg)).unwrap();
    let f = r.failure.as_ref().expect("run should diverge");
    assert_eq!(f.epoch, 0);
    assert!(r.test_accuracy.is_none());
    assert_eq!(r.best_val_accuracy(), -1.0);
}

#[test]
fn local_learning_keeps_fewer_buffers() {
    let peak = |kind, depth| {
        let cfg = ExperimentConfig {
            epochs: 1,
            depth,
            max_train_samples: Some(64),
            ..quick(kind)
        };
        run_experiment(&cfg, &splits(&cfg)).unwrap().peak_buffer_bytes
    };
    assert!(peak(AlgorithmKind::Drtp, 6) < peak(AlgorithmKind::Bp, 6));
    let bp: Vec<usize> = (1..5).map(|d| peak(AlgorithmKind::Bp, d)).collect();
    assert!(bp.windows(2).all(|w| w[0] <= w[1]), "{bp:?}");
}

fn record(acc: f64, seed: u64) -> RunRecord {
    let cfg = quick(AlgorithmKind::Bp);
    RunRecord {
        config: ExperimentConfig { seed, ..cfg },
        seed,
        epochs: vec![EpochMetrics {
            epoch: 0,
            train_loss: 1.0,
            train_accuracy: acc,
            val_loss: 1.0,
            val_accuracy: acc,
        }],
        test_accuracy: Some(acc),
        test_loss: Some(1.0),
        peak_buffer_bytes: 1 << 20,
        peak_buffer_segments: 3,
        wall_seconds: 1.5,
        normalization: crate::data::Normalization::identity(1),
        failure: None,
    }
}

#[test]
fn report_aggregates_seeds_with_population_std() {
    let recs: Vec<RunRecord> = (0..5).map(|i| record(0.60 + 0.01 * i as f64, i)).collect();
    let c = cells(&recs, ReportOptions::default());
    assert_eq!(c.len(), 1);
    assert_eq!(c[0].test_accuracy, "62.0 (1.41)");
    let csv = report(&recs, ReportFormat::Csv, ReportOptions::default()).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[0].starts_with("dataset,model,binarization,algorithm,runs"));
    let json = report(&recs, ReportFormat::Json, ReportOptions::default()).unwrap();
    let back: Vec<Cell> = serde_json::from_str(&json).unwrap();
    assert_eq!(back, c);
    let table = report(&recs[..1], ReportFormat::Table, ReportOptions { include_timing: true }).unwrap();
    assert_eq!(table.lines().count(), 3);
    assert!(table.contains("seconds"));
    assert!(report(&[], ReportFormat::Csv, ReportOptions::default()).is_err());
}

#[test]
fn ties_prefer_smaller_learning_rate_then_earlier_values() {
    let grid = HyperGrid::default();
    let mut recs: Vec<RunRecord> = grid
        .points(&quick(AlgorithmKind::Hsic))
        .into_iter()
        .map(|cfg| RunRecord {
            config: cfg,
            ..record(0.5, 0)
        })
        .collect();
    let best = select_best(&recs, &grid).unwrap();
    assert_eq!((best.config.learning_rate, best.config.gamma), (1e-5, 2.0));
    recs[1].epochs[0].val_accuracy = 0.6;
    let best = select_best(&recs, &grid).unwrap();
    assert_eq!((best.config.learning_rate, best.config.gamma), (1e-3, 20.0));
    for r in &mut recs {
        r.failure = Some(Failure {
            epoch: 0,
            step: 0,
            message: "nan".into(),
        });
    }
    assert!(matches!(select_best(&recs, &grid), Err(crate::Error::AllRunsFailed)));
}

#[test]
fn single_point_grid_returns_that_point() {
    let base = ExperimentConfig {
        epochs: 1,
        seed: 10,
        ..quick(AlgorithmKind::Dfa)
    };
    let grid = HyperGrid {
        learning_rates: vec![3e-3],
        ..HyperGrid::default()
    };
    let (train, test) = DatasetId::Synthetic.load(Path::new("")).unwrap();
    let out = grid_search(
        &base,
        &grid,
        &GridOptions {
            repeats: 2,
            grid_epochs: None,
        },
        &train,
        &test,
    )
    .unwrap();
    assert_eq!(out.search.len(), 1);
    assert_eq!(out.best.learning_rate, 3e-3);
    assert_eq!(out.repeats.iter().map(|r| r.seed).collect::<Vec<_>>(), vec![10, 11]);
    assert_eq!(out.summary.runs, 2);
}

#[test]
fn latent_clipping_is_opt_in() {
    let base = ExperimentConfig {
        depth: 3,
        binarize_weights: true,
        learning_rate: 0.5,
        epochs: 1,
        ..quick(AlgorithmKind::Bp)
    };
    let max_latent = |cfg: &ExperimentConfig| {
        let (_, model) = run_experiment_with_model(cfg, &splits(cfg)).unwrap();
        model
            .nodes
            .iter()
            .filter(|n| n.binarize_weights)
            .flat_map(|n| n.params[0].data().to_vec())
            .fold(0.0f32, |m, v| m.max(v.abs()))
    };
    assert!(max_latent(&base) > 1.0);
    assert!(
        max_latent(&ExperimentConfig {
            clip_latent: true,
            ..base
        }) <= 1.0
    );
}
