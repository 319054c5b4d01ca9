use serde::{Deserialize, Serialize};

use crate::algorithms::{AlgorithmKind, SigmaPolicy, StrategyParams};
use crate::data::{AugmentConfig, DatasetId};
use crate::error::{Error, Result};
use crate::graph::{ActKind, ArchSpec, Architecture};
use crate::optim::AdamConfig;

/// One training run. Every field has a default, so a config file only needs
/// the fields it changes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetId,
    pub arch: Architecture,
    pub depth: usize,
    pub width: usize,
    /// Mixer patch side.
    pub patch: usize,
    pub binarize_weights: bool,
    pub binary_activations: bool,
    pub skip_connections: bool,
    /// Overrides the hidden activation implied by the binarization flags.
    pub activation: Option<ActKind>,
    pub algorithm: AlgorithmKind,
    /// Adam learning rate μ.
    pub learning_rate: f64,
    /// HSIC label weight γ.
    pub gamma: f64,
    /// SigpropTL feedback scale α.
    pub alpha: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    /// Share of the training file used for training; the rest validates.
    pub train_fraction: f64,
    pub augment: AugmentConfig,
    /// Use only the first `n` samples of the training file.
    pub max_train_samples: Option<usize>,
    pub drtp_negate: bool,
    /// Clamp binarized layers' latent weights to `[-1, 1]` after each update.
    pub clip_latent: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        let strategy = StrategyParams::default();
        Self {
            dataset: DatasetId::Mnist,
            arch: Architecture::MlpPlain,
            depth: 3,
            width: 512,
            patch: 4,
            binarize_weights: false,
            binary_activations: false,
            skip_connections: true,
            activation: None,
            algorithm: AlgorithmKind::Bp,
            learning_rate: adam.learning_rate,
            gamma: strategy.hsic_gamma,
            alpha: strategy.sigprop_alpha,
            epochs: 20,
            batch_size: 128,
            seed: 0,
            weight_decay: adam.weight_decay,
            adam_beta1: adam.beta1,
            adam_beta2: adam.beta2,
            train_fraction: 0.9,
            augment: DatasetId::Mnist.default_augment(),
            max_train_samples: None,
            drtp_negate: strategy.drtp_negate,
            clip_latent: false,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad(format!("train_fraction {} must lie in (0, 1)", self.train_fraction));
        }
        if self.weight_decay < 0.0 || self.gamma < 0.0 || self.alpha < 0.0 {
            return bad("weight_decay, gamma and alpha must be non-negative".into());
        }
        if self.algorithm == AlgorithmKind::Hsic && self.batch_size < 4 {
            return bad("hsic needs batches of at least 4".into());
        }
        self.augment.validate()
    }

    pub fn arch_spec(&self) -> ArchSpec {
        let mut spec = ArchSpec::new(self.arch, &self.dataset.input_shape(), self.dataset.num_classes())
            .with_size(self.depth, self.width)
            .with_binarization(self.binarize_weights, self.binary_activations)
            .with_skips(self.skip_connections)
            .with_patch(self.patch);
        spec.activation = self.activation;
        spec
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }

    pub fn strategy_params(&self) -> StrategyParams {
        StrategyParams {
            hsic_gamma: self.gamma,
            hsic_sigma: SigmaPolicy::Median,
            sigprop_alpha: self.alpha,
            drtp_negate: self.drtp_negate,
        }
    }

    /// Short label of the binarization setting.
    pub fn binarization_label(&self) -> &'static str {
        match (self.binarize_weights, self.binary_activations) {
            (false, false) => "float",
            (true, false) => "binary-weights",
            (false, true) => "binary-acts",
            (true, true) => "binary",
        }
    }
}

/// Hyperparameter values searched per algorithm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperGrid {
    pub learning_rates: Vec<f64>,
    pub gammas: Vec<f64>,
    pub alphas: Vec<f64>,
}

impl Default for HyperGrid {
    fn default() -> Self {
        Self {
            learning_rates: vec![1e-3, 1e-4, 1e-5],
            gammas: vec![2.0, 20.0, 200.0],
            alphas: vec![1.0, 0.1, 0.01],
        }
    }
}

impl HyperGrid {
    /// Learning rate only, or learning rate × γ for HSIC, × α for SigpropTL.
    pub fn points(&self, base: &ExperimentConfig) -> Vec<ExperimentConfig> {
        let extra: Vec<Option<f64>> = match base.algorithm {
            AlgorithmKind::Hsic => self.gammas.iter().copied().map(Some).collect(),
            AlgorithmKind::SigpropTl => self.alphas.iter().copied().map(Some).collect(),
            _ => vec![None],
        };
        let mut out = Vec::new();
        for &lr in &self.learning_rates {
            for &e in &extra {
                let mut cfg = base.clone();
                cfg.learning_rate = lr;
                match (base.algorithm, e) {
                    (AlgorithmKind::Hsic, Some(g)) => cfg.gamma = g,
                    (AlgorithmKind::SigpropTl, Some(a)) => cfg.alpha = a,
                    _ => {}
                }
                out.push(cfg);
            }
        }
        out
    }

    /// Position of the algorithm-specific value in its list, for tie-breaking.
    pub(crate) fn extra_rank(&self, cfg: &ExperimentConfig) -> usize {
        let list = match cfg.algorithm {
            AlgorithmKind::Hsic => (&self.gammas, cfg.gamma),
            AlgorithmKind::SigpropTl => (&self.alphas, cfg.alpha),
            _ => return 0,
        };
        list.0.iter().position(|&v| v == list.1).unwrap_or(usize::MAX)
    }
}
