use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::ExperimentConfig;
use crate::error::{bail, Error, Result};
use crate::model::EpochRecord;
use crate::probe::{ThresholdSpec, Tier, TierCounts};
use crate::pruner::{read_history_csv, write_history_csv, PruneHistory};

pub const SCHEMA_VERSION: u32 = 1;
pub const SUMMARY_CSV: &str = "summary.csv";
pub const HISTORY_CSV: &str = "history.csv";
pub const REPORT_JSON: &str = "report.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub train: usize,
    pub eval: usize,
    pub user_train: usize,
    pub user_eval: usize,
    pub user_classes: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainSummary {
    /// Empty when the model came from a checkpoint.
    pub history: Vec<EpochRecord>,
    pub eval_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineSummary {
    /// Loss on the user training split; the probe threshold.
    pub threshold: ThresholdSpec,
    /// Accuracy of the unpruned model on the user eval split.
    pub accuracy: f64,
    pub eval_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeSummary {
    pub trials: usize,
    pub failed_trials: usize,
    pub refine_observations: usize,
    pub counts: TierCounts,
    /// Tier per layer number.
    pub tiers: Vec<Tier>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub schema_version: u32,
    pub tool_version: String,
    pub config: ExperimentConfig,
    pub dataset: DatasetSummary,
    pub pretrain: PretrainSummary,
    pub baseline: BaselineSummary,
    pub probe: ProbeSummary,
    /// Base rate actually used; differs from `config.prune.prob` when
    /// compensating for spared Personalized layers.
    pub effective_prob: f64,
    pub history: PruneHistory,
    pub final_compression: f64,
    pub final_accuracy: f64,
    /// Wall-clock seconds per stage. Never written to CSV.
    #[serde(default)]
    pub timings: BTreeMap<String, f64>,
}

impl ExperimentReport {
    pub fn without_timings(&self) -> Self {
        Self {
            timings: BTreeMap::new(),
            ..self.clone()
        }
    }
}

/// Percentage with one decimal, e.g. `0.448 -> "44.8"`.
pub fn percent(fraction: f64) -> String {
    format!("{:.1}", fraction * 100.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Csv,
    Json,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            _ => bail!(Config, "unknown report format {s:?}, expected csv or json"),
        }
    }
}

impl fmt::Display for ReportFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReportFormat::Csv => "csv",
            ReportFormat::Json => "json",
        })
    }
}

/// Keys added to `summary.csv` for readability and ignored when parsing.
const DERIVED_KEYS: [&str; 2] = ["compression_pct", "accuracy_pct"];

fn flatten(prefix: &str, value: &Value, out: &mut Vec<(String, String)>) {
    match value {
        Value::Object(map) if !map.is_empty() => {
            for (k, v) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        _ => out.push((prefix.to_string(), value.to_string())),
    }
}

fn unflatten(rows: Vec<(String, Value)>) -> Result<Value> {
    let mut root = Map::new();
    for (key, value) in rows {
        let mut parts: Vec<&str> = key.split('.').collect();
        let last = parts.pop().expect("split yields one part");
        let mut node = &mut root;
        for part in parts {
            node = match node.entry(part).or_insert_with(|| Value::Object(Map::new())) {
                Value::Object(m) => m,
                _ => bail!(Format, "summary key {key:?} nests under a scalar"),
            };
        }
        node.insert(last.to_string(), value);
    }
    Ok(Value::Object(root))
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::Format(format!("{}: {e}", path.display()))
}

/// `summary.csv` holds one `key,value` row per scalar of the report (dotted
/// keys, JSON-encoded values) except the round history and timings, followed
/// by `compression_pct` and `accuracy_pct`. `history.csv` holds the rounds.
pub fn write_csv(report: &ExperimentReport, dir: &Path) -> Result<()> {
    let mut value = serde_json::to_value(report).map_err(|e| Error::Format(e.to_string()))?;
    let obj = value.as_object_mut().expect("report is an object");
    obj.remove("history");
    obj.remove("timings");
    let mut rows = Vec::new();
    flatten("", &value, &mut rows);
    rows.push((DERIVED_KEYS[0].into(), percent(report.final_compression)));
    rows.push((DERIVED_KEYS[1].into(), percent(report.final_accuracy)));

    let path = dir.join(SUMMARY_CSV);
    let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
    w.write_record(["key", "value"]).map_err(csv_err(&path))?;
    for (k, v) in &rows {
        w.write_record([k, v]).map_err(csv_err(&path))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    write_history_csv(&report.history, dir.join(HISTORY_CSV))
}

pub fn read_csv(dir: &Path) -> Result<ExperimentReport> {
    let path = dir.join(SUMMARY_CSV);
    let mut r = csv::Reader::from_path(&path).map_err(csv_err(&path))?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err(&path))?;
        if rec.len() != 2 {
            bail!(Format, "{}: expected key,value rows", path.display());
        }
        if DERIVED_KEYS.contains(&&rec[0]) {
            continue;
        }
        let v: Value = serde_json::from_str(&rec[1])
            .map_err(|e| Error::Format(format!("{}: value of {}: {e}", path.display(), &rec[0])))?;
        rows.push((rec[0].to_string(), v));
    }
    let mut value = unflatten(rows)?;
    let history = read_history_csv(dir.join(HISTORY_CSV))?;
    let obj = value.as_object_mut().expect("object");
    obj.insert("history".into(), serde_json::to_value(history).map_err(|e| Error::Format(e.to_string()))?);
    serde_json::from_value(value).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn write_json(report: &ExperimentReport, dir: &Path) -> Result<()> {
    let path = dir.join(REPORT_JSON);
    let mut text = serde_json::to_string_pretty(report).map_err(|e| Error::Format(e.to_string()))?;
    text.push('\n');
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn read_json(dir: &Path) -> Result<ExperimentReport> {
    let path = dir.join(REPORT_JSON);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let report: ExperimentReport =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if report.schema_version != SCHEMA_VERSION {
        bail!(Format, "{}: schema version {} is not {SCHEMA_VERSION}", path.display(), report.schema_version);
    }
    Ok(report)
}

/// Writes the report into `dir` in the given format, creating `dir` if needed.
pub fn emit_report(report: &ExperimentReport, dir: &Path, format: ReportFormat) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    match format {
        ReportFormat::Csv => write_csv(report, dir),
        ReportFormat::Json => write_json(report, dir),
    }
}

/// Loads a report from `dir`, preferring `report.json` over the CSV pair.
pub fn load_report(dir: &Path) -> Result<ExperimentReport> {
    if dir.join(REPORT_JSON).exists() {
        read_json(dir)
    } else {
        read_csv(dir)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percent_has_one_decimal() {
        assert_eq!(percent(0.448), "44.8");
        assert_eq!(percent(0.0), "0.0");
        assert_eq!(percent(1.0), "100.0");
    }

    #[test]
    fn flatten_unflatten_roundtrip() {
        let v: Value = serde_json::from_str(r#"{"a":{"b":1,"c":[1,2],"d":null},"e":"x","f":{"g":{"h":0.5}}}"#).unwrap();
        let mut rows = Vec::new();
        flatten("", &v, &mut rows);
        let keys: Vec<&str> = rows.iter().map(|(k, _)| k.as_str()).collect();
        assert_eq!(keys, ["a.b", "a.c", "a.d", "e", "f.g.h"]);
        let parsed = rows.into_iter().map(|(k, s)| (k, serde_json::from_str(&s).unwrap())).collect();
        assert_eq!(unflatten(parsed).unwrap(), v);
    }
}
