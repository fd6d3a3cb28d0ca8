//! Tier-aware iterative magnitude and gradient pruning.
//!
//! Each round removes a fraction of every group's *remaining* weights (the
//! fraction depends on the group's [`Tier`]), then fine-tunes the surviving
//! weights. Pruned weights stay exactly zero from then on.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::derive_seed;
use crate::error::{bail, Error, Result};
use crate::model::{accuracy, dataset_loss, train, TrainConfig, VisionTransformer};
use crate::probe::{Tier, TierAssignment};
use crate::tensor::Tape;

/// Guards the `floor` in the per-round count against products like
/// `0.04 * 25 = 0.99999999`.
const COUNT_EPSILON: f64 = 1e-9;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    /// `|w|`
    #[default]
    Weight,
    /// `|dL/dw|` of the mean loss over the scoring dataset.
    Gradient,
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Criterion::Weight => "weight",
            Criterion::Gradient => "gradient",
        })
    }
}

impl FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "weight" => Ok(Criterion::Weight),
            "gradient" => Ok(Criterion::Gradient),
            _ => bail!(Config, "unknown criterion {s:?}, expected weight or gradient"),
        }
    }
}

fn default_rounds() -> usize {
    10
}

fn default_finetune_epochs() -> usize {
    1
}

fn default_batch_size() -> usize {
    32
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneSchedule {
    /// Per-round rate for Generic groups.
    pub prob: f64,
    #[serde(default)]
    pub criterion: Criterion,
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    #[serde(default = "default_finetune_epochs")]
    pub finetune_epochs: usize,
    pub lr: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_true")]
    pub prune_personalized: bool,
    #[serde(default)]
    pub seed: u64,
}

impl PruneSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.prob) {
            bail!(Config, "prune probability must lie in [0, 1), got {}", self.prob);
        }
        if self.rounds == 0 {
            bail!(Config, "rounds must be at least 1");
        }
        if self.batch_size == 0 {
            bail!(Config, "batch_size must be positive");
        }
        if self.finetune_epochs > 0 && !(self.lr > 0.0 && self.lr.is_finite()) {
            bail!(Config, "fine-tune learning rate must be positive, got {}", self.lr);
        }
        Ok(())
    }
}

/// Rounds to 15 significant digits so that e.g. `0.05 * 3 / 4` reports as
/// `0.0375` rather than `0.037500000000000006`.
fn snap(x: f64) -> f64 {
    format!("{x:.14e}").parse().expect("formatted float parses")
}

/// Per-round pruning fraction for a tier: Generic `p`, Other `3p/4`,
/// Personalized `p/2` (or nothing when `prune_personalized` is false).
pub fn tier_rate(prob: f64, tier: Tier, prune_personalized: bool) -> f64 {
    match tier {
        Tier::Generic => prob,
        Tier::Other => snap(prob * 3.0 / 4.0),
        Tier::Personalized if prune_personalized => snap(prob / 2.0),
        Tier::Personalized => 0.0,
    }
}

/// Number of weights removed from `kept` survivors at rate `rate`.
pub fn prune_count(rate: f64, kept: usize) -> usize {
    ((rate * kept as f64 + COUNT_EPSILON).floor() as usize).min(kept)
}

/// `|dL/dw|` for every group weight, where `L` is the mean cross-entropy over
/// all of `dataset`. Batches are visited in dataset order and combined with
/// their size as weight. Indexed `[layer_number][flat weight index]`.
pub fn gradient_magnitudes(model: &VisionTransformer, dataset: &Dataset, batch_size: usize) -> Result<Vec<Vec<f32>>> {
    if dataset.is_empty() {
        bail!(Input, "cannot score on an empty dataset");
    }
    if batch_size == 0 {
        bail!(Config, "batch_size must be positive");
    }
    let layers = model.enumerate_linear_groups();
    let param_index = layers
        .iter()
        .map(|&l| model.weight_param_index(l))
        .collect::<Result<Vec<_>>>()?;
    let mut acc: Vec<Vec<f64>> = model.groups().map(|g| vec![0.0; g.weight().numel()]).collect();
    let n = dataset.len() as f64;
    let idx: Vec<usize> = (0..dataset.len()).collect();
    for chunk in idx.chunks(batch_size) {
        let (images, labels) = dataset.batch(chunk)?;
        let mut tape = Tape::new();
        let (logits, params) = model.record_forward(&mut tape, &images)?;
        let loss = tape.cross_entropy(logits, &labels)?;
        let grads = tape.backward(loss)?;
        let w = chunk.len() as f64 / n;
        for (a, &pi) in acc.iter_mut().zip(&param_index) {
            if let Some(g) = grads.get(params[pi]) {
                a.iter_mut().zip(g).for_each(|(a, &g)| *a += w * g as f64);
            }
        }
    }
    Ok(acc.into_iter().map(|a| a.into_iter().map(|g| g.abs() as f32).collect()).collect())
}

/// `(flat index, score)` for every weight still kept in `layer`.
pub fn score_weights(
    model: &VisionTransformer,
    layer: usize,
    criterion: Criterion,
    dataset: Option<&Dataset>,
    batch_size: usize,
) -> Result<Vec<(usize, f32)>> {
    let group = model.group(layer)?;
    let scores = match criterion {
        Criterion::Weight => group.weight().data().iter().map(|w| w.abs()).collect(),
        Criterion::Gradient => {
            let data = dataset.ok_or_else(|| Error::Usage("gradient scoring needs a dataset".into()))?;
            gradient_magnitudes(model, data, batch_size)?.swap_remove(layer)
        }
    };
    Ok(kept_scores(group.mask(), &scores))
}

fn kept_scores(mask: &[bool], scores: &[f32]) -> Vec<(usize, f32)> {
    mask.iter()
        .zip(scores)
        .enumerate()
        .filter(|(_, (&keep, _))| keep)
        .map(|(i, (_, &s))| (i, s))
        .collect()
}

/// What one round did to one group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerStep {
    pub layer_number: usize,
    pub tier: Tier,
    pub step_prob: f64,
    pub kept_before: usize,
    pub pruned: usize,
}

/// Prunes `floor(rate * kept)` of each group's kept weights, lowest score
/// first with ties broken by lower flat index. Groups at rate 0 are left
/// untouched.
pub fn prune_step(
    model: &mut VisionTransformer,
    tiers: &TierAssignment,
    schedule: &PruneSchedule,
    score_data: Option<&Dataset>,
) -> Result<Vec<LayerStep>> {
    schedule.validate()?;
    if tiers.num_layers() != model.num_groups() {
        bail!(Input, "tier assignment covers {} layers, model has {}", tiers.num_layers(), model.num_groups());
    }
    let grads = match schedule.criterion {
        Criterion::Weight => None,
        Criterion::Gradient => {
            let data = score_data.ok_or_else(|| Error::Usage("gradient scoring needs a dataset".into()))?;
            Some(gradient_magnitudes(model, data, schedule.batch_size)?)
        }
    };
    let mut steps = Vec::with_capacity(model.num_groups());
    for layer in model.enumerate_linear_groups() {
        let tier = tiers.tier(layer);
        let step_prob = tier_rate(schedule.prob, tier, schedule.prune_personalized);
        let group = model.group_mut(layer)?;
        let kept_before = group.kept_count();
        let count = prune_count(step_prob, kept_before);
        if count > 0 {
            let mut scored = match &grads {
                Some(g) => kept_scores(group.mask(), &g[layer]),
                None => {
                    let abs: Vec<f32> = group.weight().data().iter().map(|w| w.abs()).collect();
                    kept_scores(group.mask(), &abs)
                }
            };
            scored.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            for &(i, _) in &scored[..count] {
                group.prune(i);
            }
        }
        steps.push(LayerStep {
            layer_number: layer,
            tier,
            step_prob,
            kept_before,
            pruned: count,
        });
    }
    Ok(steps)
}

/// Fraction of prunable weights (biases excluded) that are masked out.
pub fn compression(model: &VisionTransformer) -> f64 {
    let pruned: usize = model.groups().map(|g| g.pruned_count()).sum();
    pruned as f64 / model.prunable_params() as f64
}

/// Count of masked-out weights that are not exactly zero. Always 0 unless
/// something bypassed the masks.
pub fn mask_violations(model: &VisionTransformer) -> usize {
    model
        .groups()
        .map(|g| g.weight().data().iter().zip(g.mask()).filter(|(&w, &keep)| !keep && w != 0.0).count())
        .sum()
}

/// Compression the model would reach after `rounds` more rounds. Counts
/// depend only on kept sizes and rates, never on scores, so this is exact.
pub fn projected_compression(
    model: &VisionTransformer,
    tiers: &TierAssignment,
    prob: f64,
    rounds: usize,
    prune_personalized: bool,
) -> f64 {
    let mut pruned = 0usize;
    for g in model.groups() {
        let rate = tier_rate(prob, tiers.tier(g.layer_number()), prune_personalized);
        let mut kept = g.kept_count();
        for _ in 0..rounds {
            kept -= prune_count(rate, kept);
        }
        pruned += g.weight().numel() - kept;
    }
    pruned as f64 / model.prunable_params() as f64
}

/// The base rate at which sparing Personalized groups reaches (as closely as
/// the integer counts allow) the same compression as pruning them at `prob`.
pub fn compensated_prob(model: &VisionTransformer, tiers: &TierAssignment, prob: f64, rounds: usize) -> Result<f64> {
    let target = projected_compression(model, tiers, prob, rounds, true);
    let at = |p: f64| projected_compression(model, tiers, p, rounds, false);
    let max = 1.0 - 1e-12;
    if at(max) < target {
        bail!(Config, "no rate below 1 matches compression {target} with personalized groups spared");
    }
    if at(prob) >= target {
        return Ok(prob);
    }
    // smallest p with at(p) >= target
    let (mut lo, mut hi) = (prob, max);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if at(mid) >= target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(if (at(lo) - target).abs() < (at(hi) - target).abs() { lo } else { hi })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    /// 0 is the state before any pruning.
    pub round: usize,
    pub layers: Vec<LayerStep>,
    pub compression: f64,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PruneHistory {
    pub rounds: Vec<RoundRecord>,
}

impl PruneHistory {
    pub fn last(&self) -> Option<&RoundRecord> {
        self.rounds.last()
    }

    pub fn final_compression(&self) -> f64 {
        self.last().map_or(0.0, |r| r.compression)
    }

    pub fn final_accuracy(&self) -> f64 {
        self.last().map_or(0.0, |r| r.accuracy)
    }
}

fn evaluate(model: &VisionTransformer, data: &Dataset, batch_size: usize) -> Result<(f64, f64)> {
    Ok((dataset_loss(model, data, batch_size)?, accuracy(model, data, batch_size)?))
}

/// Runs `schedule.rounds` rounds of prune-then-fine-tune on `finetune`,
/// recording loss and accuracy on `eval` (or on `finetune` when absent)
/// after each round. Gradient scores are computed on `finetune`.
///
/// Rounds that prune nothing skip fine-tuning. Masked weights are checked
/// to be exactly zero after every fine-tune epoch; a violation is a numeric
/// error.
pub fn iterative_prune(
    model: &mut VisionTransformer,
    finetune: &Dataset,
    eval: Option<&Dataset>,
    tiers: &TierAssignment,
    schedule: &PruneSchedule,
) -> Result<PruneHistory> {
    schedule.validate()?;
    let eval = eval.unwrap_or(finetune);
    let template = |layer: usize, kept_before: usize| LayerStep {
        layer_number: layer,
        tier: tiers.tier(layer),
        step_prob: 0.0,
        kept_before,
        pruned: 0,
    };
    let (loss, acc) = evaluate(model, eval, schedule.batch_size)?;
    let mut history = PruneHistory::default();
    history.rounds.push(RoundRecord {
        round: 0,
        layers: model.groups().map(|g| template(g.layer_number(), g.kept_count())).collect(),
        compression: compression(model),
        loss,
        accuracy: acc,
    });
    for round in 1..=schedule.rounds {
        let layers = prune_step(model, tiers, schedule, Some(finetune))?;
        // fine-tuning only repairs damage; a round that pruned nothing leaves
        // the model untouched
        let epochs = if layers.iter().any(|l| l.pruned > 0) { schedule.finetune_epochs } else { 0 };
        for epoch in 0..epochs {
            let cfg = TrainConfig {
                epochs: 1,
                lr: schedule.lr,
                batch_size: schedule.batch_size,
                seed: derive_seed(schedule.seed, (round * 1000 + epoch) as u64),
            };
            train(model, finetune, &cfg)?;
            let bad = mask_violations(model);
            if bad > 0 {
                bail!(Numeric, "{bad} masked weights are nonzero after round {round} epoch {epoch}");
            }
        }
        let (loss, acc) = evaluate(model, eval, schedule.batch_size)?;
        log::info!("round {round}: compression {:.4}, loss {loss:.4}, accuracy {acc:.4}", compression(model));
        history.rounds.push(RoundRecord {
            round,
            layers,
            compression: compression(model),
            loss,
            accuracy: acc,
        });
    }
    Ok(history)
}

const HISTORY_HEADER: [&str; 9] = [
    "round",
    "layer_number",
    "tier",
    "step_prob",
    "kept_before",
    "pruned_this_round",
    "cumulative_compression",
    "loss",
    "accuracy",
];

/// One row per (round, layer). Floats use shortest round-trip formatting so
/// [`read_history_csv`] recovers them exactly.
pub fn write_history_csv(history: &PruneHistory, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let csv_err = |e: csv::Error| Error::Format(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(HISTORY_HEADER).map_err(csv_err)?;
    for r in &history.rounds {
        for l in &r.layers {
            w.write_record([
                r.round.to_string(),
                l.layer_number.to_string(),
                l.tier.to_string(),
                l.step_prob.to_string(),
                l.kept_before.to_string(),
                l.pruned.to_string(),
                r.compression.to_string(),
                r.loss.to_string(),
                r.accuracy.to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_history_csv(path: impl AsRef<Path>) -> Result<PruneHistory> {
    let path = path.as_ref();
    let csv_err = |e: csv::Error| Error::Format(format!("{}: {e}", path.display()));
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    if r.headers().map_err(csv_err)?.iter().ne(HISTORY_HEADER) {
        bail!(Format, "{}: unexpected history header", path.display());
    }
    let bad = |col: &str| Error::Format(format!("{}: bad {col}", path.display()));
    let mut history = PruneHistory::default();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        let int = |i: usize| rec[i].parse::<usize>().map_err(|_| bad(HISTORY_HEADER[i]));
        let float = |i: usize| rec[i].parse::<f64>().map_err(|_| bad(HISTORY_HEADER[i]));
        let round = int(0)?;
        let step = LayerStep {
            layer_number: int(1)?,
            tier: rec[2].parse()?,
            step_prob: float(3)?,
            kept_before: int(4)?,
            pruned: int(5)?,
        };
        match history.rounds.last_mut() {
            Some(last) if last.round == round => last.layers.push(step),
            _ => history.rounds.push(RoundRecord {
                round,
                layers: vec![step],
                compression: float(6)?,
                loss: float(7)?,
                accuracy: float(8)?,
            }),
        }
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rates_per_tier() {
        assert_eq!(tier_rate(0.04, Tier::Generic, true), 0.04);
        assert_eq!(tier_rate(0.04, Tier::Personalized, true), 0.02);
        assert_eq!(tier_rate(0.04, Tier::Other, true), 0.03);
        assert_eq!(tier_rate(0.05, Tier::Other, true), 0.0375);
        assert_eq!(tier_rate(0.05, Tier::Personalized, true), 0.025);
        assert_eq!(tier_rate(0.05, Tier::Personalized, false), 0.0);
        assert_eq!(tier_rate(0.0, Tier::Other, true), 0.0);
    }

    #[test]
    fn counts_floor_with_guard() {
        assert_eq!(prune_count(0.04, 25), 1);
        assert_eq!(prune_count(0.5, 4), 2);
        assert_eq!(prune_count(0.5, 3), 1);
        assert_eq!(prune_count(0.3, 10), 3);
        assert_eq!(prune_count(0.01, 99), 0);
        assert_eq!(prune_count(0.0, 1000), 0);
    }

    #[test]
    fn criterion_parses() {
        assert_eq!("gradient".parse::<Criterion>().unwrap(), Criterion::Gradient);
        assert!("magnitude".parse::<Criterion>().is_err());
    }

    #[test]
    fn schedule_validation() {
        let mut s = PruneSchedule {
            prob: 0.04,
            criterion: Criterion::Weight,
            rounds: 1,
            finetune_epochs: 0,
            lr: 0.0,
            batch_size: 8,
            prune_personalized: true,
            seed: 0,
        };
        assert!(s.validate().is_ok());
        s.prob = 1.0;
        assert!(s.validate().is_err());
        s.prob = 0.1;
        s.finetune_epochs = 1;
        assert!(s.validate().is_err());
    }
}
