use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

/// Position of a prunable projection inside its transformer block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupKind {
    Qkv,
    AttnOut,
    Fc1,
    Fc2,
}

impl GroupKind {
    pub const ORDER: [GroupKind; 4] = [GroupKind::Qkv, GroupKind::AttnOut, GroupKind::Fc1, GroupKind::Fc2];

    pub fn name(self) -> &'static str {
        match self {
            GroupKind::Qkv => "qkv",
            GroupKind::AttnOut => "attn_out",
            GroupKind::Fc1 => "fc1",
            GroupKind::Fc2 => "fc2",
        }
    }
}

/// One prunable linear layer `y = x W^T + b`.
///
/// `is_skip` replaces the layer's output with zeros; `mask[i] == false`
/// pins `weight[i]` to zero.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearGroup {
    pub(crate) layer_number: usize,
    pub(crate) block: usize,
    pub(crate) kind: GroupKind,
    pub is_skip: bool,
    pub(crate) weight: Tensor,
    pub(crate) bias: Tensor,
    pub(crate) mask: Vec<bool>,
}

impl LinearGroup {
    pub(crate) fn new(layer_number: usize, block: usize, kind: GroupKind, weight: Tensor, bias: Tensor) -> Self {
        let mask = vec![true; weight.numel()];
        Self {
            layer_number,
            block,
            kind,
            is_skip: false,
            weight,
            bias,
            mask,
        }
    }

    pub fn layer_number(&self) -> usize {
        self.layer_number
    }

    pub fn block(&self) -> usize {
        self.block
    }

    pub fn kind(&self) -> GroupKind {
        self.kind
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn weight_mut(&mut self) -> &mut Tensor {
        &mut self.weight
    }

    pub fn bias_mut(&mut self) -> &mut Tensor {
        &mut self.bias
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn kept_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn pruned_count(&self) -> usize {
        self.mask.len() - self.kept_count()
    }

    /// Clears the mask bit at flat index `i` and zeroes the weight there.
    pub fn prune(&mut self, i: usize) {
        self.mask[i] = false;
        self.weight.data_mut()[i] = 0.0;
    }

    /// Re-zeroes every masked-out weight.
    pub fn apply_mask(&mut self) {
        for (w, &keep) in self.weight.data_mut().iter_mut().zip(&self.mask) {
            if !keep {
                *w = 0.0;
            }
        }
    }
}
