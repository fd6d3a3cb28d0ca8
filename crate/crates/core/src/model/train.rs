use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::VisionTransformer;
use crate::data::Dataset;
use crate::error::{bail, Result};
use crate::tensor::{nll_rows, sgd_step, Tape};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_batch_size() -> usize {
    32
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            bail!(Config, "learning rate must be positive, got {}", self.lr);
        }
        if self.batch_size == 0 {
            bail!(Config, "batch_size must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss over the epoch's minibatches, before each update.
    pub loss: f64,
    pub accuracy: f64,
}

pub type TrainHistory = Vec<EpochRecord>;

fn check_nonempty(dataset: &Dataset) -> Result<()> {
    if dataset.is_empty() {
        bail!(Input, "dataset is empty");
    }
    Ok(())
}

fn argmax(row: &[f32]) -> usize {
    // first maximum wins, so ties go to the lowest class index
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Minibatch SGD with a seeded shuffle per epoch. Masks are re-applied after
/// every optimizer step so pruned weights stay exactly zero.
pub fn train(model: &mut VisionTransformer, dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainHistory> {
    cfg.validate()?;
    check_nonempty(dataset)?;
    let classes = model.config().num_classes;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let (images, labels) = dataset.batch(chunk)?;
            let mut tape = Tape::new();
            let (logits, params) = model.record_forward(&mut tape, &images)?;
            correct += tape
                .value(logits)
                .chunks_exact(classes)
                .zip(&labels)
                .filter(|(row, &l)| argmax(row) == l)
                .count();
            let loss = tape.cross_entropy(logits, &labels)?;
            loss_sum += tape.loss_f64(loss).expect("cross entropy loss") * chunk.len() as f64;
            let grads = tape.backward(loss)?;
            for (t, v) in model.tensors_mut().into_iter().zip(params) {
                if let Some(g) = grads.get(v) {
                    sgd_step(t, g, cfg.lr as f32)?;
                }
            }
            model.apply_masks();
        }
        history.push(EpochRecord {
            epoch,
            loss: loss_sum / dataset.len() as f64,
            accuracy: correct as f64 / dataset.len() as f64,
        });
    }
    Ok(history)
}

/// Logits for every example, batched in dataset order.
pub fn logits(model: &VisionTransformer, dataset: &Dataset, batch_size: usize) -> Result<Vec<f32>> {
    check_nonempty(dataset)?;
    if batch_size == 0 {
        bail!(Config, "batch_size must be positive");
    }
    let idx: Vec<usize> = (0..dataset.len()).collect();
    let mut out = Vec::with_capacity(dataset.len() * model.config().num_classes);
    for chunk in idx.chunks(batch_size) {
        let (images, _) = dataset.batch(chunk)?;
        out.extend_from_slice(model.forward(&images)?.data());
    }
    Ok(out)
}

/// Mean cross-entropy over the whole dataset, in dataset order.
pub fn dataset_loss(model: &VisionTransformer, dataset: &Dataset, batch_size: usize) -> Result<f64> {
    let classes = model.config().num_classes;
    if let Some(&bad) = dataset.labels().iter().find(|&&l| l >= classes) {
        bail!(Input, "label {bad} out of range for a {classes}-class model");
    }
    let all = logits(model, dataset, batch_size)?;
    let nll = nll_rows(&all, classes, dataset.labels());
    let loss = nll.iter().sum::<f64>() / dataset.len() as f64;
    if !loss.is_finite() {
        bail!(Numeric, "dataset loss is not finite");
    }
    Ok(loss)
}

/// Fraction of examples whose argmax logit is the label; ties go to the
/// lowest class index.
pub fn accuracy(model: &VisionTransformer, dataset: &Dataset, batch_size: usize) -> Result<f64> {
    let classes = model.config().num_classes;
    let all = logits(model, dataset, batch_size)?;
    let correct = all
        .chunks_exact(classes)
        .zip(dataset.labels())
        .filter(|(row, &l)| argmax(row) == l)
        .count();
    Ok(correct as f64 / dataset.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }
}
