//! Experiment orchestration: configuration, the end-to-end pipeline, sweeps
//! and report files.

mod config;
mod report;
mod sweep;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::time::Instant;

pub use config::{DataConfig, DataSource, ExperimentConfig, PretrainConfig, ProbeConfig, PruneConfig};
pub use report::{
    emit_report, load_report, percent, read_csv, read_json, BaselineSummary, DatasetSummary, ExperimentReport,
    PretrainSummary, ProbeSummary, ReportFormat, HISTORY_CSV, REPORT_JSON, SCHEMA_VERSION, SUMMARY_CSV,
};
pub use sweep::{sweep, SweepAxis, SweepCell, SweepTable, SWEEP_CSV};

use crate::data::{load_cifar10_bin, personalize, split, synth_dataset, Dataset};
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::model::{accuracy, dataset_loss, load_checkpoint, save_checkpoint, train, TrainConfig, VisionTransformer};
use crate::probe::{
    append_trial_log, baseline_loss, classify, default_num_trials, observe_all, refine_personalized, sample_trials,
};
use crate::pruner::{compensated_prob, compression, iterative_prune};

pub const TRIAL_LOG: &str = "trials.csv";
pub const CHECKPOINT_FILE: &str = "model.tprn";
pub const THREADS_ENV: &str = "TIERPRUNE_THREADS";

// stage tags mixed into the experiment seed
const SEED_DATA: u64 = 1;
const SEED_SPLIT: u64 = 2;
const SEED_USER: u64 = 3;
const SEED_MODEL: u64 = 4;
const SEED_PRETRAIN: u64 = 5;
const SEED_PROBE: u64 = 6;
const SEED_PRUNE: u64 = 7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stage {
    Config,
    Data,
    Pretrain,
    Probe,
    Prune,
    Report,
}

impl Stage {
    /// Process exit code for a failure in this stage.
    pub fn exit_code(self) -> i32 {
        match self {
            Stage::Config => 10,
            Stage::Data => 11,
            Stage::Pretrain => 12,
            Stage::Probe => 13,
            Stage::Prune => 14,
            Stage::Report => 15,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Config => "config",
            Stage::Data => "data",
            Stage::Pretrain => "pretrain",
            Stage::Probe => "probe",
            Stage::Prune => "prune",
            Stage::Report => "report",
        }
    }
}

/// An error tagged with the pipeline stage it came from.
#[derive(Debug)]
pub struct StageError {
    pub stage: Stage,
    pub source: Error,
}

impl fmt::Display for StageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} stage failed: {}", self.stage.name(), self.source)
    }
}

impl std::error::Error for StageError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.source)
    }
}

trait AtStage<T> {
    fn at(self, stage: Stage) -> Result<T, StageError>;
}

impl<T> AtStage<T> for Result<T> {
    fn at(self, stage: Stage) -> Result<T, StageError> {
        self.map_err(|source| StageError { stage, source })
    }
}

/// Worker count for probe trials: `TIERPRUNE_THREADS` if set to a positive
/// integer, otherwise the available parallelism.
pub fn thread_budget() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Datasets and the pretrained model, shared by every run that differs only
/// in probe or prune settings.
#[derive(Clone, Debug)]
pub struct Prepared {
    key: ExperimentConfig,
    pub train: Dataset,
    pub eval: Dataset,
    /// User splits carry the model's original class ids.
    pub user_train: Dataset,
    pub user_eval: Dataset,
    pub model: VisionTransformer,
    pub pretrain: PretrainSummary,
    pub timings: BTreeMap<String, f64>,
}

/// The fields `prepare` depends on; the others are blanked.
fn preparation_key(cfg: &ExperimentConfig) -> ExperimentConfig {
    let mut key = cfg.clone();
    key.probe = ProbeConfig::default();
    key.prune.prob = 0.0;
    key.prune.criterion = Default::default();
    key.prune.rounds = 0;
    key.prune.finetune_epochs = 0;
    key.prune.lr = 0.0;
    key.prune.batch_size = 1;
    key.prune.prune_personalized = true;
    key.prune.compensate = true;
    key.output_dir = Default::default();
    key
}

fn load_data(cfg: &ExperimentConfig) -> Result<Dataset> {
    match &cfg.data.source {
        DataSource::Synthetic(spec) => {
            let mut spec = spec.clone();
            spec.seed = derive_seed(derive_seed(cfg.seed, SEED_DATA), spec.seed);
            synth_dataset(&spec)
        }
        DataSource::Cifar10 { paths } => load_cifar10_bin(paths),
    }
}

/// Loads or synthesizes data, splits it, derives the user subsets and
/// pretrains (or loads) the model.
pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared, StageError> {
    cfg.validate().at(Stage::Config)?;
    let mut timings = BTreeMap::new();
    let start = Instant::now();
    let full = load_data(cfg).at(Stage::Data)?;
    let (train_split, eval_split) =
        split(&full, cfg.data.train_fraction, derive_seed(cfg.seed, SEED_SPLIT)).at(Stage::Data)?;
    let mut spec = cfg.personalization.clone();
    spec.seed = derive_seed(derive_seed(cfg.seed, SEED_USER), spec.seed);
    let user_train = personalize(&train_split, &spec).at(Stage::Data)?.with_original_labels();
    spec.seed = derive_seed(spec.seed, 1);
    let user_eval = personalize(&eval_split, &spec).at(Stage::Data)?.with_original_labels();
    timings.insert("data".into(), start.elapsed().as_secs_f64());

    let start = Instant::now();
    let batch = cfg.data.eval_batch_size;
    let (model, history) = match &cfg.pretrain.checkpoint {
        Some(path) => {
            let model = load_checkpoint(path).at(Stage::Pretrain)?;
            let (mut got, mut want) = (model.config().clone(), cfg.model.clone());
            got.seed = 0;
            want.seed = 0;
            if got != want {
                return Err(Error::Config(format!("checkpoint {} has model {got:?}, config wants {want:?}", path.display())))
                    .at(Stage::Pretrain);
            }
            (model, Vec::new())
        }
        None => {
            let mut model_cfg = cfg.model.clone();
            model_cfg.seed = derive_seed(derive_seed(cfg.seed, SEED_MODEL), model_cfg.seed);
            let mut model = VisionTransformer::new(model_cfg).at(Stage::Pretrain)?;
            let tc = TrainConfig {
                epochs: cfg.pretrain.epochs,
                lr: cfg.pretrain.lr,
                batch_size: cfg.pretrain.batch_size,
                seed: derive_seed(cfg.seed, SEED_PRETRAIN),
            };
            let history = if tc.epochs > 0 { train(&mut model, &train_split, &tc).at(Stage::Pretrain)? } else { Vec::new() };
            (model, history)
        }
    };
    let eval_accuracy = accuracy(&model, &eval_split, batch).at(Stage::Pretrain)?;
    log::info!("pretrained model: eval accuracy {eval_accuracy:.4}");
    timings.insert("pretrain".into(), start.elapsed().as_secs_f64());
    Ok(Prepared {
        key: preparation_key(cfg),
        train: train_split,
        eval: eval_split,
        user_train,
        user_eval,
        model,
        pretrain: PretrainSummary { history, eval_accuracy },
        timings,
    })
}

/// Probes and prunes a copy of `prep.model` according to `cfg`, writing the
/// trial log, final checkpoint and CSV + JSON reports into `out_dir`.
///
/// `cfg` must agree with the config `prep` was built from in everything but
/// probe and prune settings and the output directory.
pub fn run_prepared(prep: &Prepared, cfg: &ExperimentConfig, out_dir: &Path) -> Result<ExperimentReport, StageError> {
    cfg.validate().at(Stage::Config)?;
    if preparation_key(cfg) != prep.key {
        return Err(Error::Usage("config differs from the one the prepared state was built from".into()))
            .at(Stage::Config);
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e)).at(Stage::Report)?;
    let mut timings = prep.timings.clone();
    let batch = cfg.data.eval_batch_size;
    let mut model = prep.model.clone();

    let start = Instant::now();
    let threshold = baseline_loss(&model, &prep.user_train, cfg.probe.margin, batch).at(Stage::Probe)?;
    let baseline = BaselineSummary {
        threshold,
        accuracy: accuracy(&model, &prep.user_eval, batch).at(Stage::Probe)?,
        eval_loss: dataset_loss(&model, &prep.user_eval, batch).at(Stage::Probe)?,
    };
    let layers = model.num_groups();
    let k = cfg.probe.random_number;
    let n = cfg.probe.num_trials.unwrap_or_else(|| default_num_trials(layers, k));
    let mut trials = sample_trials(layers, k, n, derive_seed(cfg.seed, SEED_PROBE), cfg.probe.sampling).at(Stage::Probe)?;
    let observed = observe_all(&model, &prep.user_train, &mut trials, batch, thread_budget());
    // keep whatever was observed, even when the probe fails afterwards
    let log_path = out_dir.join(TRIAL_LOG);
    if log_path.exists() {
        std::fs::remove_file(&log_path).map_err(|e| Error::io(&log_path, e)).at(Stage::Report)?;
    }
    append_trial_log(&log_path, 0, &trials).at(Stage::Report)?;
    let failed_trials = observed.at(Stage::Probe)?;
    let raw = classify(&trials, &threshold, layers).at(Stage::Probe)?;
    let budget = cfg.probe.refine_budget.unwrap_or(layers);
    let tiers = refine_personalized(&mut model, &prep.user_train, &raw, &threshold, budget, batch).at(Stage::Probe)?;
    let counts = tiers.counts();
    log::info!("tiers: {counts:?}");
    let probe = ProbeSummary {
        trials: trials.len(),
        failed_trials,
        refine_observations: tiers.solo_losses().len(),
        counts,
        tiers: tiers.tiers().to_vec(),
    };
    timings.insert("probe".into(), start.elapsed().as_secs_f64());

    let start = Instant::now();
    let p = &cfg.prune;
    let effective_prob = if !p.prune_personalized && p.compensate {
        compensated_prob(&model, &tiers, p.prob, p.rounds).at(Stage::Prune)?
    } else {
        p.prob
    };
    let schedule = p.schedule(effective_prob, derive_seed(cfg.seed, SEED_PRUNE));
    let history = iterative_prune(&mut model, &prep.user_train, Some(&prep.user_eval), &tiers, &schedule).at(Stage::Prune)?;
    timings.insert("prune".into(), start.elapsed().as_secs_f64());

    let start = Instant::now();
    save_checkpoint(&model, out_dir.join(CHECKPOINT_FILE)).at(Stage::Report)?;
    let user_classes = {
        let mut c = cfg.personalization.kept_classes.clone();
        c.sort_unstable();
        c.dedup();
        c
    };
    let report = ExperimentReport {
        schema_version: SCHEMA_VERSION,
        tool_version: concat!("tierprune ", env!("CARGO_PKG_VERSION")).to_string(),
        config: cfg.clone(),
        dataset: DatasetSummary {
            train: prep.train.len(),
            eval: prep.eval.len(),
            user_train: prep.user_train.len(),
            user_eval: prep.user_eval.len(),
            user_classes,
        },
        pretrain: prep.pretrain.clone(),
        baseline,
        probe,
        effective_prob,
        final_compression: compression(&model),
        final_accuracy: history.final_accuracy(),
        history,
        timings: BTreeMap::new(),
    };
    emit_report(&report, out_dir, ReportFormat::Csv).at(Stage::Report)?;
    timings.insert("report".into(), start.elapsed().as_secs_f64());
    let report = ExperimentReport { timings, ..report };
    emit_report(&report, out_dir, ReportFormat::Json).at(Stage::Report)?;
    Ok(report)
}

/// The whole pipeline for one config, writing into `cfg.output_dir`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport, StageError> {
    let prep = prepare(cfg)?;
    run_prepared(&prep, cfg, &cfg.output_dir)
}
