//! A minimal vision transformer whose attention and MLP projections are
//! numbered, maskable [`LinearGroup`]s: four per block.

mod checkpoint;
mod group;
mod train;
mod vit;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use group::{GroupKind, LinearGroup};
pub use train::{accuracy, dataset_loss, logits, train, EpochRecord, TrainConfig, TrainHistory};
pub use vit::VisionTransformer;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub depth: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
    pub seed: u64,
}

impl Default for ViTConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 4,
            embed_dim: 64,
            num_heads: 4,
            depth: 4,
            mlp_ratio: 2,
            num_classes: 10,
            seed: 0,
        }
    }
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("embed_dim", self.embed_dim),
            ("num_heads", self.num_heads),
            ("depth", self.depth),
            ("mlp_ratio", self.mlp_ratio),
            ("num_classes", self.num_classes),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            bail!(Config, "{name} must be positive");
        }
        if self.image_size % self.patch_size != 0 {
            bail!(Config, "patch_size {} does not divide image_size {}", self.patch_size, self.image_size);
        }
        if self.embed_dim % self.num_heads != 0 {
            bail!(Config, "num_heads {} does not divide embed_dim {}", self.num_heads, self.embed_dim);
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        (self.image_size / self.patch_size).pow(2)
    }

    /// Patches plus the class token.
    pub fn seq_len(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        crate::data::CHANNELS * self.patch_size * self.patch_size
    }

    pub fn mlp_dim(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }

    pub fn num_groups(&self) -> usize {
        4 * self.depth
    }
}
