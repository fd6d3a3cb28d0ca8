//! Layer classification by random group ablation.
//!
//! Each [`MaskTrial`] switches off a random set of `k` linear groups and
//! records the dataset loss. Trials that push the loss above the untouched
//! model's loss vote their layers *Personalized*; trials that pull it below
//! vote them *Generic*. Layers with no decisive vote stay *Other*.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::OpenOptions;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{bail, Error, Result};
use crate::model::{dataset_loss, VisionTransformer};

/// Default margin as a fraction of the baseline loss.
pub const DEFAULT_MARGIN_FRACTION: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    Personalized,
    Generic,
    /// No decisive evidence; pruned at the intermediate "buffer" rate and
    /// labelled `buffer` in reports.
    #[serde(rename = "buffer")]
    Other,
}

impl Tier {
    pub const ALL: [Tier; 3] = [Tier::Personalized, Tier::Generic, Tier::Other];

    pub fn as_str(self) -> &'static str {
        match self {
            Tier::Personalized => "personalized",
            Tier::Generic => "generic",
            Tier::Other => "buffer",
        }
    }
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Tier {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "personalized" => Ok(Tier::Personalized),
            "generic" => Ok(Tier::Generic),
            "other" | "buffer" => Ok(Tier::Other),
            _ => bail!(Format, "unknown tier {s:?}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Observation {
    Pending,
    Observed { loss: f64, wall_time_s: f64 },
    Failed { reason: String, wall_time_s: f64 },
}

/// One random ablation: a set of layer ids switched off together.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskTrial {
    layer_ids: Vec<usize>,
    pub observation: Observation,
}

impl MaskTrial {
    /// Ids are stored sorted; duplicates are rejected.
    pub fn new(mut layer_ids: Vec<usize>) -> Result<Self> {
        layer_ids.sort_unstable();
        if layer_ids.windows(2).any(|w| w[0] == w[1]) {
            bail!(Input, "trial layer ids must be distinct: {layer_ids:?}");
        }
        Ok(Self {
            layer_ids,
            observation: Observation::Pending,
        })
    }

    pub fn layer_ids(&self) -> &[usize] {
        &self.layer_ids
    }

    pub fn observed_loss(&self) -> Option<f64> {
        match self.observation {
            Observation::Observed { loss, .. } => Some(loss),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSpec {
    pub baseline_loss: f64,
    pub margin: f64,
}

impl ThresholdSpec {
    pub fn new(baseline_loss: f64, margin: f64) -> Result<Self> {
        if !baseline_loss.is_finite() {
            bail!(Numeric, "baseline loss {baseline_loss} is not finite");
        }
        if !(margin >= 0.0 && margin.is_finite()) {
            bail!(Config, "margin must be finite and nonnegative, got {margin}");
        }
        Ok(Self { baseline_loss, margin })
    }

    pub fn upper(&self) -> f64 {
        self.baseline_loss + self.margin
    }

    pub fn lower(&self) -> f64 {
        self.baseline_loss - self.margin
    }
}

/// Loss of the untouched model on `dataset`, with a margin of
/// `margin_fraction * loss`.
pub fn baseline_loss(
    model: &VisionTransformer,
    dataset: &Dataset,
    margin_fraction: f64,
    batch_size: usize,
) -> Result<ThresholdSpec> {
    let skipped = model.skipped();
    if !skipped.is_empty() {
        bail!(Usage, "baseline needs an untouched model, groups {skipped:?} are skipped");
    }
    if !(margin_fraction >= 0.0) {
        bail!(Config, "margin fraction must be nonnegative, got {margin_fraction}");
    }
    let loss = dataset_loss(model, dataset, batch_size)?;
    ThresholdSpec::new(loss, margin_fraction * loss)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    /// Each trial is an independent uniform k-subset.
    #[default]
    Independent,
    /// Trials walk through successive random permutations, so every layer
    /// is drawn once before any layer is drawn twice.
    Covering,
}

/// Default trial count: every layer is expected in about three trials.
pub fn default_num_trials(num_layers: usize, random_number: usize) -> usize {
    3 * num_layers.div_ceil(random_number.max(1))
}

pub fn sample_trials(
    num_layers: usize,
    random_number: usize,
    num_trials: usize,
    seed: u64,
    mode: SamplingMode,
) -> Result<Vec<MaskTrial>> {
    if random_number == 0 || random_number > num_layers {
        bail!(Config, "random number {random_number} must lie in 1..={num_layers}");
    }
    if num_trials == 0 {
        bail!(Config, "need at least one trial");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trials = Vec::with_capacity(num_trials);
    match mode {
        SamplingMode::Independent => {
            for _ in 0..num_trials {
                let ids = index::sample(&mut rng, num_layers, random_number).into_vec();
                trials.push(MaskTrial::new(ids)?);
            }
        }
        SamplingMode::Covering => {
            let mut pool: Vec<usize> = Vec::new();
            for _ in 0..num_trials {
                let mut ids = Vec::with_capacity(random_number);
                while ids.len() < random_number {
                    if pool.is_empty() {
                        pool = (0..num_layers).collect();
                        pool.shuffle(&mut rng);
                    }
                    // take from the front, skipping ids already in this trial
                    match pool.iter().position(|id| !ids.contains(id)) {
                        Some(p) => ids.push(pool.remove(p)),
                        None => {
                            let mut fresh: Vec<usize> = (0..num_layers).filter(|id| !ids.contains(id)).collect();
                            fresh.shuffle(&mut rng);
                            pool.extend(fresh);
                        }
                    }
                }
                trials.push(MaskTrial::new(ids)?);
            }
        }
    }
    Ok(trials)
}

/// Switches off exactly `trial`'s layers, measures the dataset loss and
/// restores every skip flag. Weights are never touched.
///
/// A non-finite loss marks the trial failed and is returned as an error.
pub fn observe(
    model: &mut VisionTransformer,
    dataset: &Dataset,
    trial: &mut MaskTrial,
    batch_size: usize,
) -> Result<f64> {
    let start = Instant::now();
    model.set_skips(&trial.layer_ids)?;
    let result = dataset_loss(model, dataset, batch_size);
    model.clear_skips();
    let wall_time_s = start.elapsed().as_secs_f64();
    match result {
        Ok(loss) => {
            trial.observation = Observation::Observed { loss, wall_time_s };
            Ok(loss)
        }
        Err(e @ Error::Numeric(_)) => {
            trial.observation = Observation::Failed {
                reason: e.to_string(),
                wall_time_s,
            };
            Err(e)
        }
        Err(e) => Err(e),
    }
}

/// Observes every trial, spreading them across up to `threads` model
/// replicas. Outcomes depend only on the trial, never on scheduling.
/// Failed (non-finite) observations are logged and left marked as failed;
/// any other error aborts.
pub fn observe_all(
    model: &VisionTransformer,
    dataset: &Dataset,
    trials: &mut [MaskTrial],
    batch_size: usize,
    threads: usize,
) -> Result<usize> {
    let threads = threads.clamp(1, trials.len().max(1));
    let mut base = model.clone();
    base.clear_skips();
    let outcomes: Vec<Result<()>> = if threads == 1 {
        trials
            .iter_mut()
            .map(|t| observe(&mut base, dataset, t, batch_size).map(drop))
            .collect()
    } else {
        let chunk = trials.len().div_ceil(threads);
        std::thread::scope(|s| {
            let handles: Vec<_> = trials
                .chunks_mut(chunk)
                .map(|part| {
                    let mut replica = base.clone();
                    s.spawn(move || {
                        part.iter_mut()
                            .map(|t| observe(&mut replica, dataset, t, batch_size).map(drop))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("probe worker panicked"))
                .collect()
        })
    };
    let mut failed = 0;
    for (i, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            Ok(()) => {}
            Err(Error::Numeric(reason)) => {
                log::warn!("trial {i} dropped: {reason}");
                failed += 1;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(failed)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TierCounts {
    pub personalized: usize,
    pub generic: usize,
    #[serde(rename = "buffer")]
    pub other: usize,
}

impl TierCounts {
    pub fn total(&self) -> usize {
        self.personalized + self.generic + self.other
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TierAssignment {
    tiers: Vec<Tier>,
    /// Per layer, the indices of trials whose verdict included it.
    provenance: Vec<Vec<usize>>,
    /// Solo-ablation losses measured by [`refine_personalized`].
    #[serde(default)]
    solo_losses: BTreeMap<usize, f64>,
}

impl TierAssignment {
    pub fn uniform(num_layers: usize, tier: Tier) -> Self {
        Self {
            tiers: vec![tier; num_layers],
            provenance: vec![Vec::new(); num_layers],
            solo_losses: BTreeMap::new(),
        }
    }

    pub fn from_tiers(tiers: Vec<Tier>) -> Self {
        let n = tiers.len();
        Self {
            tiers,
            provenance: vec![Vec::new(); n],
            solo_losses: BTreeMap::new(),
        }
    }

    pub fn num_layers(&self) -> usize {
        self.tiers.len()
    }

    pub fn tier(&self, layer: usize) -> Tier {
        self.tiers[layer]
    }

    pub fn tiers(&self) -> &[Tier] {
        &self.tiers
    }

    pub fn provenance(&self, layer: usize) -> &[usize] {
        &self.provenance[layer]
    }

    pub fn solo_losses(&self) -> &BTreeMap<usize, f64> {
        &self.solo_losses
    }

    pub fn layers_in(&self, tier: Tier) -> Vec<usize> {
        (0..self.tiers.len()).filter(|&l| self.tiers[l] == tier).collect()
    }

    pub fn counts(&self) -> TierCounts {
        let mut c = TierCounts::default();
        for t in &self.tiers {
            match t {
                Tier::Personalized => c.personalized += 1,
                Tier::Generic => c.generic += 1,
                Tier::Other => c.other += 1,
            }
        }
        c
    }
}

/// Folds observed trials into tiers. A layer in any trial above
/// `threshold.upper()` is Personalized, even if other trials voted it
/// Generic; otherwise a layer in any trial below `threshold.lower()` is
/// Generic; everything else is Other. Failed trials carry no vote.
pub fn classify(trials: &[MaskTrial], threshold: &ThresholdSpec, num_layers: usize) -> Result<TierAssignment> {
    let mut high = vec![false; num_layers];
    let mut low = vec![false; num_layers];
    let mut provenance = vec![Vec::new(); num_layers];
    for (i, trial) in trials.iter().enumerate() {
        if let Some(&bad) = trial.layer_ids.iter().find(|&&l| l >= num_layers) {
            bail!(Input, "trial {i} names layer {bad}, model has {num_layers}");
        }
        let loss = match trial.observation {
            Observation::Pending => bail!(Usage, "trial {i} has not been observed"),
            Observation::Failed { .. } => continue,
            Observation::Observed { loss, .. } => loss,
        };
        let verdict = if loss > threshold.upper() {
            &mut high
        } else if loss < threshold.lower() {
            &mut low
        } else {
            continue;
        };
        for &l in &trial.layer_ids {
            verdict[l] = true;
            provenance[l].push(i);
        }
    }
    let tiers = (0..num_layers)
        .map(|l| match (high[l], low[l]) {
            (true, _) => Tier::Personalized,
            (false, true) => Tier::Generic,
            (false, false) => Tier::Other,
        })
        .collect();
    Ok(TierAssignment {
        tiers,
        provenance,
        solo_losses: BTreeMap::new(),
    })
}

/// Re-observes Personalized layers one at a time, in ascending order, for at
/// most `budget` observations. A layer whose solo ablation stays at or below
/// `threshold.upper()` only rode along with other layers and is demoted to
/// Other.
pub fn refine_personalized(
    model: &mut VisionTransformer,
    dataset: &Dataset,
    assignment: &TierAssignment,
    threshold: &ThresholdSpec,
    budget: usize,
    batch_size: usize,
) -> Result<TierAssignment> {
    let mut refined = assignment.clone();
    for layer in assignment.layers_in(Tier::Personalized).into_iter().take(budget) {
        let mut solo = MaskTrial::new(vec![layer])?;
        match observe(model, dataset, &mut solo, batch_size) {
            Ok(loss) => {
                refined.solo_losses.insert(layer, loss);
                if loss <= threshold.upper() {
                    refined.tiers[layer] = Tier::Other;
                }
            }
            Err(Error::Numeric(reason)) => log::warn!("solo observation of layer {layer} dropped: {reason}"),
            Err(e) => return Err(e),
        }
    }
    Ok(refined)
}

const TRIAL_LOG_HEADER: [&str; 5] = ["trial", "layer_ids", "status", "observed_loss", "wall_time_s"];

/// Appends one CSV row per trial to `path`, writing the header first when the
/// file is new or empty. Columns: `trial`, `layer_ids` (`;`-separated),
/// `status` (`observed|failed|pending`), `observed_loss`, `wall_time_s`.
pub fn append_trial_log(path: impl AsRef<Path>, first_index: usize, trials: &[MaskTrial]) -> Result<()> {
    let path = path.as_ref();
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let fresh = file.metadata().map_err(|e| Error::io(path, e))?.len() == 0;
    let mut w = csv::Writer::from_writer(file);
    let csv_err = |e: csv::Error| Error::Format(format!("{}: {e}", path.display()));
    if fresh {
        w.write_record(TRIAL_LOG_HEADER).map_err(csv_err)?;
    }
    for (i, t) in trials.iter().enumerate() {
        let ids = t.layer_ids.iter().map(usize::to_string).collect::<Vec<_>>().join(";");
        let (status, loss, wall) = match &t.observation {
            Observation::Pending => ("pending", String::new(), String::new()),
            Observation::Observed { loss, wall_time_s } => ("observed", loss.to_string(), format!("{wall_time_s:.6}")),
            Observation::Failed { wall_time_s, .. } => ("failed", String::new(), format!("{wall_time_s:.6}")),
        };
        w.write_record([(first_index + i).to_string(), ids, status.to_string(), loss, wall])
            .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a trial log back. Failed trials come back without their reason.
pub fn read_trial_log(path: impl AsRef<Path>) -> Result<Vec<MaskTrial>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let bad = |what: &str| Error::Format(format!("{}: bad {what}", path.display()));
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if rec.len() != TRIAL_LOG_HEADER.len() {
            return Err(bad("row width"));
        }
        let ids = if rec[1].is_empty() {
            Vec::new()
        } else {
            rec[1].split(';').map(|s| s.parse().map_err(|_| bad("layer id"))).collect::<Result<Vec<usize>>>()?
        };
        let wall = |s: &str| if s.is_empty() { Ok(0.0) } else { s.parse::<f64>().map_err(|_| bad("wall time")) };
        let mut trial = MaskTrial::new(ids)?;
        trial.observation = match &rec[2] {
            "pending" => Observation::Pending,
            "observed" => Observation::Observed {
                loss: rec[3].parse().map_err(|_| bad("loss"))?,
                wall_time_s: wall(&rec[4])?,
            },
            "failed" => Observation::Failed {
                reason: String::new(),
                wall_time_s: wall(&rec[4])?,
            },
            _ => return Err(bad("status")),
        };
        out.push(trial);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn observed(ids: &[usize], loss: f64) -> MaskTrial {
        let mut t = MaskTrial::new(ids.to_vec()).unwrap();
        t.observation = Observation::Observed { loss, wall_time_s: 0.0 };
        t
    }

    fn th(baseline: f64, margin: f64) -> ThresholdSpec {
        ThresholdSpec::new(baseline, margin).unwrap()
    }

    #[test]
    fn high_loss_trial_marks_personalized() {
        let a = classify(&[observed(&[3, 7], 2.0)], &th(1.0, 0.1), 8).unwrap();
        assert_eq!(a.tier(3), Tier::Personalized);
        assert_eq!(a.tier(7), Tier::Personalized);
        assert_eq!(a.tier(0), Tier::Other);
        assert_eq!(a.provenance(3), &[0]);
    }

    #[test]
    fn personalized_wins_conflicts() {
        let trials = [observed(&[5, 1], 2.0), observed(&[5, 2], 0.5)];
        let a = classify(&trials, &th(1.0, 0.0), 8).unwrap();
        assert_eq!(a.tier(5), Tier::Personalized);
        assert_eq!(a.tier(1), Tier::Personalized);
        assert_eq!(a.tier(2), Tier::Generic);
        assert_eq!(a.provenance(5), &[0, 1]);
    }

    #[test]
    fn no_trials_means_all_other() {
        let a = classify(&[], &th(1.0, 0.0), 4).unwrap();
        assert_eq!(a.counts(), TierCounts { personalized: 0, generic: 0, other: 4 });
    }

    #[test]
    fn equality_and_margin_band_are_other() {
        let trials = [observed(&[0], 1.0), observed(&[1], 1.05), observed(&[2], 0.95)];
        let a = classify(&trials, &th(1.0, 0.1), 3).unwrap();
        assert_eq!(a.tiers(), &[Tier::Other; 3]);
        let a = classify(&trials, &th(1.0, 0.0), 3).unwrap();
        assert_eq!(a.tiers(), &[Tier::Other, Tier::Personalized, Tier::Generic]);
    }

    #[test]
    fn pending_trial_is_usage_error_and_failed_is_skipped() {
        let pending = MaskTrial::new(vec![0]).unwrap();
        assert!(matches!(classify(&[pending], &th(1.0, 0.0), 2), Err(Error::Usage(_))));
        let mut failed = MaskTrial::new(vec![0]).unwrap();
        failed.observation = Observation::Failed { reason: "nan".into(), wall_time_s: 0.0 };
        let a = classify(&[failed, observed(&[1], 5.0)], &th(1.0, 0.0), 2).unwrap();
        assert_eq!(a.tiers(), &[Tier::Other, Tier::Personalized]);
    }

    #[test]
    fn full_set_trials_and_seed_determinism() {
        let t = sample_trials(6, 6, 4, 1, SamplingMode::Independent).unwrap();
        assert!(t.iter().all(|t| t.layer_ids() == [0, 1, 2, 3, 4, 5]));
        let a = sample_trials(16, 4, 12, 9, SamplingMode::Independent).unwrap();
        let b = sample_trials(16, 4, 12, 9, SamplingMode::Independent).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|t| t.layer_ids().len() == 4));
    }

    #[test]
    fn covering_mode_hits_each_layer_once() {
        let t = sample_trials(10, 1, 10, 4, SamplingMode::Covering).unwrap();
        let mut seen: Vec<usize> = t.iter().map(|t| t.layer_ids()[0]).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        let t = sample_trials(10, 3, 7, 4, SamplingMode::Covering).unwrap();
        assert!(t.iter().all(|t| t.layer_ids().len() == 3));
    }

    #[test]
    fn sampling_rejects_bad_k() {
        assert!(matches!(sample_trials(4, 5, 1, 0, SamplingMode::Independent), Err(Error::Config(_))));
        assert!(matches!(sample_trials(4, 0, 1, 0, SamplingMode::Independent), Err(Error::Config(_))));
    }

    #[test]
    fn default_trial_count() {
        assert_eq!(default_num_trials(16, 4), 12);
        assert_eq!(default_num_trials(8, 3), 9);
    }

    #[test]
    fn trial_log_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trials.csv");
        let mut failed = MaskTrial::new(vec![2, 0]).unwrap();
        failed.observation = Observation::Failed { reason: String::new(), wall_time_s: 0.5 };
        let trials = vec![observed(&[1, 3], 0.123456789), failed];
        append_trial_log(&path, 0, &trials[..1]).unwrap();
        append_trial_log(&path, 1, &trials[1..]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("trial,layer_ids,status,observed_loss,wall_time_s\n"));
        assert_eq!(text.lines().count(), 3);
        assert_eq!(read_trial_log(&path).unwrap(), trials);
    }
}
