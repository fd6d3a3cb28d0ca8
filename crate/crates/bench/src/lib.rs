//! Fixtures shared by the benchmarks.

use tierprune::{synth_dataset, Dataset, SynthSpec, ViTConfig, VisionTransformer};

/// The small configuration used throughout the tests.
pub fn tiny_config() -> ViTConfig {
    ViTConfig {
        image_size: 16,
        patch_size: 4,
        embed_dim: 32,
        num_heads: 4,
        depth: 4,
        mlp_ratio: 2,
        num_classes: 10,
        seed: 0,
    }
}

pub fn tiny_model() -> VisionTransformer {
    VisionTransformer::new(tiny_config()).expect("valid config")
}

pub fn tiny_data(per_class: usize) -> Dataset {
    synth_dataset(&SynthSpec {
        num_classes: 10,
        per_class,
        image_size: 16,
        noise: 0.3,
        seed: 0,
    })
    .expect("valid spec")
}
