use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use bitprop::algorithms::AlgorithmKind;
use bitprop::data::{data_root, DatasetId, Normalization};
use bitprop::harness::{
    evaluate, evaluate_packed, grid_search, report, run_experiment_with_model, DataSplits, ExperimentConfig,
    GridOptions, GridOutcome, HyperGrid, ReportFormat, ReportOptions, RunRecord,
};
use bitprop::packed::{benchmark_kernels, export_packed, PackedModel};
use bitprop::{Architecture, Model32};
use clap::{Args, Parser, Subcommand};

/// Train, evaluate and package binary neural networks.
#[derive(Parser)]
#[command(name = "bitprop", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration and write its run record and model.
    Train {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Grid-search the learning rate and the algorithm's own hyperparameter,
    /// then re-run the best point with fresh seeds.
    Grid {
        #[command(flatten)]
        run: RunArgs,
        /// Re-runs of the selected configuration.
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        /// Epochs per grid point; re-runs use --epochs.
        #[arg(long)]
        grid_epochs: Option<usize>,
    },
    /// Test accuracy of a latent (BGR1) or packed (BGRP) model file.
    Eval {
        #[arg(long)]
        model_file: PathBuf,
        #[arg(long)]
        dataset: Option<DatasetId>,
        /// Run record whose normalization the model was trained with; without
        /// it, normalization is fitted on the whole training file.
        #[arg(long)]
        record: Option<PathBuf>,
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
    /// Convert a latent model file into a packed deployment file.
    Export {
        #[arg(long)]
        model_file: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Time the XNOR-popcount kernel against the float matrix product.
    Bench {
        #[arg(long, default_value_t = 128)]
        m: usize,
        #[arg(long, default_value_t = 1024)]
        k: usize,
        #[arg(long, default_value_t = 512)]
        n: usize,
        #[arg(long, default_value_t = 20)]
        repeats: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Aggregate run records or grid outcomes into a results table.
    Report {
        /// Record files (`train` output) or grid outcome files (`grid` output).
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, default_value = "table")]
        format: ReportFormat,
        /// Add mean wall-clock seconds per cell.
        #[arg(long)]
        timing: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// TOML file with any subset of the experiment fields; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<DatasetId>,
    #[arg(long)]
    arch: Option<Architecture>,
    #[arg(long)]
    algo: Option<AlgorithmKind>,
    #[arg(long)]
    binary_weights: bool,
    #[arg(long)]
    binary_acts: bool,
    #[arg(long, overrides_with = "no_skip")]
    skip: bool,
    #[arg(long, overrides_with = "skip")]
    no_skip: bool,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Train on only the first n samples of the training file.
    #[arg(long)]
    max_train_samples: Option<usize>,
    /// Dataset root; defaults to $BNN_DATA_DIR, then ./data.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
}

impl RunArgs {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                ExperimentConfig::from_toml(&text)?
            }
            None => ExperimentConfig::default(),
        };
        if let Some(d) = self.dataset {
            if self.config.is_none() || d != cfg.dataset {
                cfg.augment = d.default_augment();
            }
            cfg.dataset = d;
        }
        set(&mut cfg.arch, self.arch);
        set(&mut cfg.algorithm, self.algo);
        cfg.binarize_weights |= self.binary_weights;
        cfg.binary_activations |= self.binary_acts;
        if self.skip {
            cfg.skip_connections = true;
        }
        if self.no_skip {
            cfg.skip_connections = false;
        }
        set(&mut cfg.depth, self.depth);
        set(&mut cfg.width, self.width);
        set(&mut cfg.learning_rate, self.lr);
        set(&mut cfg.gamma, self.gamma);
        set(&mut cfg.alpha, self.alpha);
        set(&mut cfg.epochs, self.epochs);
        set(&mut cfg.batch_size, self.batch_size);
        set(&mut cfg.seed, self.seed);
        if self.max_train_samples.is_some() {
            cfg.max_train_samples = self.max_train_samples;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn train(run: &RunArgs) -> Result<()> {
    let cfg = run.config()?;
    let root = data_root(run.data_dir.as_deref());
    let splits = DataSplits::load(&cfg, &root)?;
    let (record, model) = run_experiment_with_model(&cfg, &splits)?;
    fs::create_dir_all(&run.out)?;
    write_json(&run.out.join("record.json"), &record)?;
    model.save(run.out.join("model.bgr1"))?;
    for e in &record.epochs {
        println!(
            "epoch {:>3}  train {:.4} ({:.4})  val {:.4} ({:.4})",
            e.epoch + 1,
            e.train_accuracy,
            e.train_loss,
            e.val_accuracy,
            e.val_loss
        );
    }
    match (&record.failure, record.test_accuracy) {
        (Some(f), _) => println!("failed at epoch {} step {}: {}", f.epoch + 1, f.step, f.message),
        (None, Some(acc)) => println!("test accuracy {acc:.4}"),
        (None, None) => {}
    }
    println!("wrote {}", run.out.display());
    Ok(())
}

fn grid(run: &RunArgs, repeats: usize, grid_epochs: Option<usize>) -> Result<()> {
    let cfg = run.config()?;
    let root = data_root(run.data_dir.as_deref());
    let (train_file, test) = cfg.dataset.load(&root)?;
    let opts = GridOptions { repeats, grid_epochs };
    let outcome = grid_search(&cfg, &HyperGrid::default(), &opts, &train_file, &test)?;
    fs::create_dir_all(&run.out)?;
    write_json(&run.out.join("grid.json"), &outcome)?;
    let csv = report(&outcome.repeats, ReportFormat::Csv, ReportOptions::default())?;
    fs::write(run.out.join("summary.csv"), csv)?;
    let b = &outcome.best;
    println!(
        "best: lr {} gamma {} alpha {}  test {:.4} ± {:.4} over {} runs",
        b.learning_rate, b.gamma, b.alpha, outcome.summary.mean, outcome.summary.std, outcome.summary.runs
    );
    println!("wrote {}", run.out.display());
    Ok(())
}

enum LoadedModel {
    Latent(Model32),
    Packed(PackedModel),
}

fn load_model(path: &Path) -> Result<LoadedModel> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(match bytes.get(..4) {
        Some(b"BGRP") => LoadedModel::Packed(PackedModel::from_bytes(&bytes)?),
        _ => LoadedModel::Latent(Model32::from_bytes(&bytes)?),
    })
}

fn eval(model_file: &Path, dataset: Option<DatasetId>, record: Option<&Path>, data_dir: Option<&Path>) -> Result<()> {
    let model = load_model(model_file)?;
    let record: Option<RunRecord> = match record {
        Some(p) => {
            Some(serde_json::from_str(&fs::read_to_string(p)?).with_context(|| format!("parsing {}", p.display()))?)
        }
        None => None,
    };
    let dataset = match (dataset, &record) {
        (Some(d), _) => d,
        (None, Some(r)) => r.config.dataset,
        (None, None) => bail!("--dataset is required without --record"),
    };
    let (train_file, test) = dataset.load(&data_root(data_dir))?;
    let norm = match record {
        Some(r) => r.normalization,
        None => Normalization::fit(&train_file),
    };
    let (kind, (loss, acc)) = match &model {
        LoadedModel::Latent(m) => ("latent", evaluate(m, &test, &norm)?),
        LoadedModel::Packed(p) => ("packed", evaluate_packed(p, &test, &norm)?),
    };
    println!("{kind} model on {dataset} test split: accuracy {acc:.4}, loss {loss:.4}");
    Ok(())
}

fn export(model_file: &Path, out: &Path) -> Result<()> {
    let model = Model32::load(model_file)?;
    let packed = export_packed(&model);
    packed.save(out)?;
    println!(
        "{} binary layers ({} XNOR), {} bytes of packed weights in place of {} float bytes",
        packed.binary_layer_count(),
        packed.xnor_layer_count(),
        packed.binary_payload_bytes(),
        packed.binary_float_bytes()
    );
    println!("wrote {}", out.display());
    Ok(())
}

fn read_records(inputs: &[PathBuf]) -> Result<Vec<RunRecord>> {
    let mut records = Vec::new();
    for path in inputs {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        if let Ok(r) = serde_json::from_str::<RunRecord>(&text) {
            records.push(r);
        } else {
            let g: GridOutcome = serde_json::from_str(&text)
                .with_context(|| format!("{} is neither a run record nor a grid outcome", path.display()))?;
            records.extend(g.repeats);
        }
    }
    Ok(records)
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train { run } => train(&run),
        Command::Grid {
            run,
            repeats,
            grid_epochs,
        } => grid(&run, repeats, grid_epochs),
        Command::Eval {
            model_file,
            dataset,
            record,
            data_dir,
        } => eval(&model_file, dataset, record.as_deref(), data_dir.as_deref()),
        Command::Export { model_file, out } => export(&model_file, &out),
        Command::Bench { m, k, n, repeats, seed } => {
            let b = benchmark_kernels(m, k, n, repeats, seed)?;
            println!("{m}x{k} · {k}x{n}");
            println!("float  {:>10.3} ms", b.float_seconds * 1e3);
            println!("packed {:>10.3} ms", b.packed_seconds * 1e3);
            println!("speedup {:.2}x", b.speedup());
            Ok(())
        }
        Command::Report {
            inputs,
            format,
            timing,
            out,
        } => {
            let records = read_records(&inputs)?;
            if records.is_empty() {
                bail!("no run records found");
            }
            let text = report(&records, format, ReportOptions { include_timing: timing })?;
            match out {
                Some(p) => fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?,
                None => print!("{text}"),
            }
            Ok(())
        }
    }
}
