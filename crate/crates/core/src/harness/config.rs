use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{PersonalizationSpec, SynthSpec};
use crate::error::{bail, Error, Result};
use crate::model::ViTConfig;
use crate::probe::{SamplingMode, DEFAULT_MARGIN_FRACTION};
use crate::pruner::{Criterion, PruneSchedule};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic(SynthSpec),
    /// CIFAR-10 binary batch files (`data_batch_*.bin`, `test_batch.bin`).
    Cifar10 { paths: Vec<PathBuf> },
}

fn default_train_fraction() -> f64 {
    0.8
}

fn default_eval_batch() -> usize {
    64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// Share of examples in the training split; the rest is held out for
    /// evaluation.
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    #[serde(default = "default_eval_batch")]
    pub eval_batch_size: usize,
}

fn default_batch() -> usize {
    32
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Load this checkpoint instead of training.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
}

fn default_random_number() -> usize {
    4
}

fn default_margin() -> f64 {
    DEFAULT_MARGIN_FRACTION
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    /// Layers ablated together per trial.
    #[serde(default = "default_random_number")]
    pub random_number: usize,
    /// Defaults to `3 * ceil(layers / random_number)`.
    #[serde(default)]
    pub num_trials: Option<usize>,
    /// Margin as a fraction of the baseline loss.
    #[serde(default = "default_margin")]
    pub margin: f64,
    /// Solo re-observations of Personalized layers; defaults to one per layer.
    #[serde(default)]
    pub refine_budget: Option<usize>,
    #[serde(default)]
    pub sampling: SamplingMode,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            random_number: default_random_number(),
            num_trials: None,
            margin: default_margin(),
            refine_budget: None,
            sampling: SamplingMode::default(),
        }
    }
}

fn default_rounds() -> usize {
    10
}

fn default_one() -> usize {
    1
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneConfig {
    pub prob: f64,
    #[serde(default)]
    pub criterion: Criterion,
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    #[serde(default = "default_one")]
    pub finetune_epochs: usize,
    pub lr: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_true")]
    pub prune_personalized: bool,
    /// With `prune_personalized` off, raise `prob` so total compression
    /// matches what pruning every tier at `prob` would reach.
    #[serde(default = "default_true")]
    pub compensate: bool,
}

impl PruneConfig {
    pub fn schedule(&self, prob: f64, seed: u64) -> PruneSchedule {
        PruneSchedule {
            prob,
            criterion: self.criterion,
            rounds: self.rounds,
            finetune_epochs: self.finetune_epochs,
            lr: self.lr,
            batch_size: self.batch_size,
            prune_personalized: self.prune_personalized,
            seed,
        }
    }
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("tierprune-out")
}

/// One experiment: data, model, pretraining, probing and pruning settings.
/// Every stage seed is derived from `seed` mixed with the stage's own seed
/// field, so changing `seed` alone reruns everything on fresh randomness.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ViTConfig,
    pub data: DataConfig,
    pub personalization: PersonalizationSpec,
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub probe: ProbeConfig,
    pub prune: PruneConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            e => e,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        match &self.data.source {
            DataSource::Synthetic(s) => {
                s.validate()?;
                if s.image_size != self.model.image_size || s.num_classes != self.model.num_classes {
                    bail!(Config, "synthetic data ({} px, {} classes) does not fit the model ({} px, {} classes)",
                        s.image_size, s.num_classes, self.model.image_size, self.model.num_classes);
                }
            }
            DataSource::Cifar10 { paths } => {
                if paths.is_empty() {
                    bail!(Config, "cifar10 source needs at least one file");
                }
                if self.model.image_size != 32 || self.model.num_classes != 10 {
                    bail!(Config, "cifar10 needs a 32 px, 10-class model");
                }
            }
        }
        if !(self.data.train_fraction > 0.0 && self.data.train_fraction < 1.0) {
            bail!(Config, "train_fraction must lie in (0, 1), got {}", self.data.train_fraction);
        }
        if self.data.eval_batch_size == 0 {
            bail!(Config, "eval_batch_size must be positive");
        }
        self.personalization.validate(self.model.num_classes)?;
        if self.pretrain.checkpoint.is_none() && self.pretrain.epochs > 0 && !(self.pretrain.lr > 0.0) {
            bail!(Config, "pretrain lr must be positive, got {}", self.pretrain.lr);
        }
        if self.pretrain.batch_size == 0 {
            bail!(Config, "pretrain batch_size must be positive");
        }
        let layers = self.model.num_groups();
        if self.probe.random_number == 0 || self.probe.random_number > layers {
            bail!(Config, "random_number {} must lie in 1..={layers}", self.probe.random_number);
        }
        if self.probe.num_trials == Some(0) {
            bail!(Config, "num_trials must be positive");
        }
        if !(self.probe.margin >= 0.0 && self.probe.margin.is_finite()) {
            bail!(Config, "margin must be finite and nonnegative, got {}", self.probe.margin);
        }
        self.prune.schedule(self.prune.prob, 0).validate()
    }
}
