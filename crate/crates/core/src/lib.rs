//! Probe-guided, tiered iterative pruning for a minimal vision transformer.
//!
//! The pipeline: train a small ViT, ablate random groups of its linear
//! layers and compare the resulting loss to the untouched model's loss,
//! sort every layer into a [`Tier`], then prune each tier at its own rate
//! while fine-tuning on the user's data.

pub mod data;
pub mod error;
pub mod harness;
pub mod model;
pub mod probe;
pub mod pruner;
pub mod tensor;

pub use data::{personalize, split, synth_dataset, Dataset, PersonalizationSpec, SynthSpec};
pub use error::{Error, Result};
pub use harness::{run_experiment, ExperimentConfig, ExperimentReport};
pub use model::{LinearGroup, TrainConfig, VisionTransformer, ViTConfig};
pub use probe::{MaskTrial, ThresholdSpec, Tier, TierAssignment};
pub use pruner::{Criterion, PruneHistory, PruneSchedule};
pub use tensor::{Tape, Tensor, Var};

/// Mixes a stage tag into a base seed (SplitMix64 finalizer), so stages
/// driven by one experiment seed draw independent streams.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
