//! Datasets: CIFAR-10 binary batches, a synthetic stand-in, and the
//! class-subset derivation used as personalized user data.

mod cifar;
mod synth;

pub use cifar::{load_cifar10_bin, write_cifar10_bin, CIFAR_RECORD_BYTES};
pub use synth::{synth_dataset, SynthSpec};

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::tensor::Tensor;

pub const CHANNELS: usize = 3;

/// Images `[N x 3 x H x W]` in `[0, 1]` with one class index per image.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
    class_names: Option<Vec<String>>,
    /// For a personalized subset: `label_map[new] == original`.
    label_map: Option<Vec<usize>>,
    source_classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let shape = images.shape();
        if shape.len() != 4 || shape[1] != CHANNELS || shape[2] != shape[3] {
            bail!(Dimension, "images must be [N x {CHANNELS} x S x S], got {shape:?}");
        }
        if shape[0] != labels.len() {
            bail!(Input, "{} images but {} labels", shape[0], labels.len());
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            bail!(Input, "label {bad} out of range for {num_classes} classes");
        }
        Ok(Self {
            images,
            labels,
            num_classes,
            class_names: None,
            label_map: None,
            source_classes: num_classes,
        })
    }

    pub fn with_class_names(mut self, names: Vec<String>) -> Self {
        self.class_names = Some(names);
        self
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_size(&self) -> usize {
        self.images.shape()[2]
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn class_names(&self) -> Option<&[String]> {
        self.class_names.as_deref()
    }

    pub fn label_map(&self) -> Option<&[usize]> {
        self.label_map.as_deref()
    }

    fn image_len(&self) -> usize {
        let s = self.images.shape();
        s[1] * s[2] * s[3]
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.images.data()[i * n..(i + 1) * n]
    }

    /// Images and labels at `indices`, in that order.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let n = self.image_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            if i >= self.len() {
                bail!(Input, "example index {i} out of range for {} examples", self.len());
            }
            data.extend_from_slice(self.image(i));
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = indices.len();
        let images = Tensor::new(shape, data)?;
        Ok((images, indices.iter().map(|&i| self.labels[i]).collect()))
    }

    /// A new dataset holding `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            bail!(Input, "subset would be empty");
        }
        let (images, labels) = self.batch(indices)?;
        Ok(Self {
            images,
            labels,
            num_classes: self.num_classes,
            class_names: self.class_names.clone(),
            label_map: self.label_map.clone(),
            source_classes: self.source_classes,
        })
    }

    /// Undoes the dense re-indexing of [`personalize`], restoring the
    /// original class ids and class count.
    pub fn with_original_labels(&self) -> Self {
        let Some(map) = &self.label_map else {
            return self.clone();
        };
        Self {
            images: self.images.clone(),
            labels: self.labels.iter().map(|&l| map[l]).collect(),
            num_classes: self.source_classes,
            class_names: self.class_names.clone(),
            label_map: None,
            source_classes: self.source_classes,
        }
    }

    /// Examples per class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

/// Which classes (and at most how many examples of each) make up the
/// personalized user data.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PersonalizationSpec {
    pub kept_classes: Vec<usize>,
    #[serde(default)]
    pub per_class_cap: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

impl PersonalizationSpec {
    pub fn all_classes(num_classes: usize) -> Self {
        Self {
            kept_classes: (0..num_classes).collect(),
            per_class_cap: None,
            seed: 0,
        }
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.kept_classes.is_empty() {
            bail!(Config, "personalization keeps no classes");
        }
        if let Some(&bad) = self.kept_classes.iter().find(|&&c| c >= num_classes) {
            bail!(Config, "kept class {bad} outside 0..{num_classes}");
        }
        let mut sorted = self.kept_classes.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.kept_classes.len() {
            bail!(Config, "kept classes contain duplicates");
        }
        if self.per_class_cap == Some(0) {
            bail!(Config, "per_class_cap must be at least 1");
        }
        Ok(())
    }
}

/// Keeps only `spec.kept_classes`, relabelled densely in ascending order of
/// the original ids, optionally capped per class by a seeded choice.
pub fn personalize(dataset: &Dataset, spec: &PersonalizationSpec) -> Result<Dataset> {
    spec.validate(dataset.num_classes)?;
    let mut kept = spec.kept_classes.clone();
    kept.sort_unstable();
    let mut dense = vec![None; dataset.num_classes];
    for (new, &orig) in kept.iter().enumerate() {
        dense[orig] = Some(new);
    }

    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); kept.len()];
    for (i, &l) in dataset.labels.iter().enumerate() {
        if let Some(new) = dense[l] {
            per_class[new].push(i);
        }
    }
    if let Some(pos) = per_class.iter().position(Vec::is_empty) {
        bail!(Input, "kept class {} has no examples in the dataset", kept[pos]);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut chosen = Vec::new();
    for members in &per_class {
        match spec.per_class_cap {
            Some(cap) if cap < members.len() => {
                let picks = index::sample(&mut rng, members.len(), cap);
                chosen.extend(picks.iter().map(|p| members[p]));
            }
            _ => chosen.extend_from_slice(members),
        }
    }
    chosen.sort_unstable();

    let (images, labels) = dataset.batch(&chosen)?;
    let original_map = match &dataset.label_map {
        Some(map) => kept.iter().map(|&k| map[k]).collect(),
        None => kept.clone(),
    };
    Ok(Dataset {
        images,
        labels: labels.into_iter().map(|l| dense[l].expect("kept label")).collect(),
        num_classes: kept.len(),
        class_names: dataset.class_names.clone(),
        label_map: Some(original_map),
        source_classes: dataset.source_classes,
    })
}

/// Seeded shuffle, then the first `round(fraction * N)` examples form the
/// first part and the rest the second.
pub fn split(dataset: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        bail!(Config, "split fraction must lie in (0, 1), got {fraction}");
    }
    let n = dataset.len();
    let cut = (fraction * n as f64).round() as usize;
    if cut == 0 || cut == n {
        bail!(Input, "splitting {n} examples at {fraction} leaves one side empty");
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok((dataset.subset(&order[..cut])?, dataset.subset(&order[cut..])?))
}
