use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{percent, prepare, run_prepared, ExperimentConfig, ExperimentReport, Stage, StageError};
use crate::error::{bail, Error, Result};

pub const SWEEP_CSV: &str = "sweep.csv";

/// Settings a sweep can vary. All of them leave data and pretraining alone,
/// so one pretrained model serves every cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    PruneRate,
    RandomNumber,
    Criterion,
    PrunePersonalized,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::PruneRate => "prune_rate",
            SweepAxis::RandomNumber => "random_number",
            SweepAxis::Criterion => "criterion",
            SweepAxis::PrunePersonalized => "prune_personalized",
        }
    }

    /// `base` with this axis set to `value`.
    pub fn apply(self, base: &ExperimentConfig, value: &str) -> Result<ExperimentConfig> {
        let mut cfg = base.clone();
        let bad = |what: &str| Error::Config(format!("{} value {value:?} is not {what}", self.name()));
        match self {
            SweepAxis::PruneRate => cfg.prune.prob = value.parse().map_err(|_| bad("a number"))?,
            SweepAxis::RandomNumber => cfg.probe.random_number = value.parse().map_err(|_| bad("an integer"))?,
            SweepAxis::Criterion => cfg.prune.criterion = value.parse()?,
            SweepAxis::PrunePersonalized => cfg.prune.prune_personalized = value.parse().map_err(|_| bad("true or false"))?,
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prune_rate" => Ok(SweepAxis::PruneRate),
            "random_number" => Ok(SweepAxis::RandomNumber),
            "criterion" => Ok(SweepAxis::Criterion),
            "prune_personalized" => Ok(SweepAxis::PrunePersonalized),
            _ => bail!(Config, "unknown sweep axis {s:?}, expected prune_rate, random_number, criterion or prune_personalized"),
        }
    }
}

#[derive(Debug)]
pub struct SweepCell {
    pub value: String,
    pub outcome: Result<ExperimentReport, StageError>,
}

#[derive(Debug)]
pub struct SweepTable {
    pub axis: SweepAxis,
    pub cells: Vec<SweepCell>,
}

const SWEEP_HEADER: [&str; 17] = [
    "axis",
    "value",
    "status",
    "prob",
    "effective_prob",
    "criterion",
    "random_number",
    "prune_personalized",
    "personalized",
    "generic",
    "buffer",
    "baseline_accuracy",
    "final_compression",
    "final_accuracy",
    "compression_pct",
    "accuracy_pct",
    "error",
];

impl SweepTable {
    pub fn failures(&self) -> usize {
        self.cells.iter().filter(|c| c.outcome.is_err()).count()
    }

    /// One row per cell; failed cells keep their value and error message.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let csv_err = |e: csv::Error| Error::Format(format!("{}: {e}", path.display()));
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        w.write_record(SWEEP_HEADER).map_err(csv_err)?;
        for cell in &self.cells {
            let row: Vec<String> = match &cell.outcome {
                Ok(r) => {
                    let c = &r.config;
                    vec![
                        self.axis.to_string(),
                        cell.value.clone(),
                        "ok".into(),
                        c.prune.prob.to_string(),
                        r.effective_prob.to_string(),
                        c.prune.criterion.to_string(),
                        c.probe.random_number.to_string(),
                        c.prune.prune_personalized.to_string(),
                        r.probe.counts.personalized.to_string(),
                        r.probe.counts.generic.to_string(),
                        r.probe.counts.other.to_string(),
                        r.baseline.accuracy.to_string(),
                        r.final_compression.to_string(),
                        r.final_accuracy.to_string(),
                        percent(r.final_compression),
                        percent(r.final_accuracy),
                        String::new(),
                    ]
                }
                Err(e) => {
                    let mut row = vec![String::new(); SWEEP_HEADER.len()];
                    row[0] = self.axis.to_string();
                    row[1] = cell.value.clone();
                    row[2] = "failed".into();
                    row[16] = e.to_string();
                    row
                }
            };
            w.write_record(&row).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Runs `base` once per value of `axis`, sharing one prepared model. Each
/// cell writes into `<output_dir>/<axis>-<value>/`; `sweep.csv` in
/// `output_dir` collects one row per cell. A failing cell is recorded and
/// the sweep moves on; only a failure to prepare aborts.
pub fn sweep(base: &ExperimentConfig, axis: SweepAxis, values: &[String]) -> Result<SweepTable, StageError> {
    if values.is_empty() {
        return Err(StageError {
            stage: Stage::Config,
            source: Error::Config("sweep needs at least one value".into()),
        });
    }
    let prep = prepare(base)?;
    let mut cells = Vec::with_capacity(values.len());
    for value in values {
        let outcome = axis
            .apply(base, value)
            .map_err(|source| StageError { stage: Stage::Config, source })
            .and_then(|cfg| run_prepared(&prep, &cfg, &base.output_dir.join(format!("{axis}-{value}"))));
        if let Err(e) = &outcome {
            log::warn!("sweep cell {axis}={value} failed: {e}");
        }
        cells.push(SweepCell {
            value: value.clone(),
            outcome,
        });
    }
    let table = SweepTable { axis, cells };
    std::fs::create_dir_all(&base.output_dir)
        .map_err(|e| Error::io(&base.output_dir, e))
        .map_err(|source| StageError { stage: Stage::Report, source })?;
    table
        .write_csv(&base.output_dir.join(SWEEP_CSV))
        .map_err(|source| StageError { stage: Stage::Report, source })?;
    Ok(table)
}
