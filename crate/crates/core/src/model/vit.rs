use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::group::{GroupKind, LinearGroup};
use super::ViTConfig;
use crate::data::CHANNELS;
use crate::error::{bail, Result};
use crate::tensor::{Tape, Tensor, Var};

const LN_EPS: f32 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
struct LayerNormParams {
    gain: Tensor,
    bias: Tensor,
}

impl LayerNormParams {
    fn new(dim: usize) -> Result<Self> {
        Ok(Self {
            gain: Tensor::new(vec![dim], vec![1.0; dim])?.with_grad(),
            bias: Tensor::zeros(&[dim])?.with_grad(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Block {
    norm1: LayerNormParams,
    qkv: LinearGroup,
    attn_out: LinearGroup,
    norm2: LayerNormParams,
    fc1: LinearGroup,
    fc2: LinearGroup,
}

/// Pre-norm ViT: patch embedding, class token, learned positions, `depth`
/// blocks of attention + GELU MLP, final norm and a linear head on the
/// class token.
///
/// Only the four projections in each block are prunable; embeddings,
/// norms and the head are not.
#[derive(Clone, Debug, PartialEq)]
pub struct VisionTransformer {
    config: ViTConfig,
    patch_weight: Tensor,
    patch_bias: Tensor,
    cls_token: Tensor,
    pos_embed: Tensor,
    blocks: Vec<Block>,
    norm: LayerNormParams,
    head_weight: Tensor,
    head_bias: Tensor,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f32) -> Result<Tensor> {
    Ok(Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))?.with_grad())
}

fn linear_init(rng: &mut ChaCha8Rng, out: usize, inp: usize) -> Result<(Tensor, Tensor)> {
    let bound = 1.0 / (inp as f32).sqrt();
    Ok((uniform(rng, &[out, inp], bound)?, Tensor::zeros(&[out])?.with_grad()))
}

impl VisionTransformer {
    /// Scaled-uniform initialization drawn from `config.seed`; every mask is
    /// full and no group is skipped.
    pub fn new(config: ViTConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.embed_dim;
        let (patch_weight, patch_bias) = linear_init(&mut rng, d, config.patch_dim())?;
        let cls_token = uniform(&mut rng, &[d], 0.02)?;
        let pos_embed = uniform(&mut rng, &[config.seq_len(), d], 0.02)?;
        let mut blocks = Vec::with_capacity(config.depth);
        for b in 0..config.depth {
            let mut group = |kind: GroupKind, out: usize, inp: usize| -> Result<LinearGroup> {
                let (w, bias) = linear_init(&mut rng, out, inp)?;
                let number = 4 * b + GroupKind::ORDER.iter().position(|&k| k == kind).expect("kind");
                Ok(LinearGroup::new(number, b, kind, w, bias))
            };
            let qkv = group(GroupKind::Qkv, 3 * d, d)?;
            let attn_out = group(GroupKind::AttnOut, d, d)?;
            let fc1 = group(GroupKind::Fc1, config.mlp_dim(), d)?;
            let fc2 = group(GroupKind::Fc2, d, config.mlp_dim())?;
            blocks.push(Block {
                norm1: LayerNormParams::new(d)?,
                qkv,
                attn_out,
                norm2: LayerNormParams::new(d)?,
                fc1,
                fc2,
            });
        }
        let (head_weight, head_bias) = linear_init(&mut rng, config.num_classes, d)?;
        Ok(Self {
            config,
            patch_weight,
            patch_bias,
            cls_token,
            pos_embed,
            blocks,
            norm: LayerNormParams::new(d)?,
            head_weight,
            head_bias,
        })
    }

    pub fn config(&self) -> &ViTConfig {
        &self.config
    }

    pub fn num_groups(&self) -> usize {
        4 * self.blocks.len()
    }

    /// Groups in `layer_number` order: block-major, then qkv, attention
    /// output, fc1, fc2.
    pub fn groups(&self) -> impl Iterator<Item = &LinearGroup> + '_ {
        self.blocks.iter().flat_map(|b| [&b.qkv, &b.attn_out, &b.fc1, &b.fc2])
    }

    pub fn groups_mut(&mut self) -> impl Iterator<Item = &mut LinearGroup> + '_ {
        self.blocks
            .iter_mut()
            .flat_map(|b| [&mut b.qkv, &mut b.attn_out, &mut b.fc1, &mut b.fc2])
    }

    /// The stable list of prunable layer ids.
    pub fn enumerate_linear_groups(&self) -> Vec<usize> {
        self.groups().map(LinearGroup::layer_number).collect()
    }

    pub fn group(&self, layer_number: usize) -> Result<&LinearGroup> {
        match self.groups().nth(layer_number) {
            Some(g) => Ok(g),
            None => bail!(Input, "no linear group {layer_number} (model has {})", self.num_groups()),
        }
    }

    pub fn group_mut(&mut self, layer_number: usize) -> Result<&mut LinearGroup> {
        let n = self.num_groups();
        match self.groups_mut().nth(layer_number) {
            Some(g) => Ok(g),
            None => bail!(Input, "no linear group {layer_number} (model has {n})"),
        }
    }

    /// Sets `is_skip` on exactly `layers` and clears it everywhere else.
    pub fn set_skips(&mut self, layers: &[usize]) -> Result<()> {
        let n = self.num_groups();
        if let Some(&bad) = layers.iter().find(|&&l| l >= n) {
            bail!(Input, "no linear group {bad} (model has {n})");
        }
        for g in self.groups_mut() {
            g.is_skip = layers.contains(&g.layer_number);
        }
        Ok(())
    }

    pub fn clear_skips(&mut self) {
        self.groups_mut().for_each(|g| g.is_skip = false);
    }

    pub fn skipped(&self) -> Vec<usize> {
        self.groups().filter(|g| g.is_skip).map(|g| g.layer_number).collect()
    }

    pub fn apply_masks(&mut self) {
        self.groups_mut().for_each(LinearGroup::apply_mask);
    }

    /// Names of all parameters, aligned with [`Self::tensors`].
    pub fn param_names(&self) -> Vec<String> {
        let mut names = vec![
            "patch_embed.weight".to_string(),
            "patch_embed.bias".to_string(),
            "cls_token".to_string(),
            "pos_embed".to_string(),
        ];
        for b in 0..self.blocks.len() {
            for part in [
                "norm1.gain", "norm1.bias", "qkv.weight", "qkv.bias", "attn_out.weight", "attn_out.bias",
                "norm2.gain", "norm2.bias", "fc1.weight", "fc1.bias", "fc2.weight", "fc2.bias",
            ] {
                names.push(format!("blocks.{b}.{part}"));
            }
        }
        names.extend(["norm.gain", "norm.bias", "head.weight", "head.bias"].map(String::from));
        names
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v = vec![&self.patch_weight, &self.patch_bias, &self.cls_token, &self.pos_embed];
        for b in &self.blocks {
            v.extend([
                &b.norm1.gain,
                &b.norm1.bias,
                &b.qkv.weight,
                &b.qkv.bias,
                &b.attn_out.weight,
                &b.attn_out.bias,
                &b.norm2.gain,
                &b.norm2.bias,
                &b.fc1.weight,
                &b.fc1.bias,
                &b.fc2.weight,
                &b.fc2.bias,
            ]);
        }
        v.extend([&self.norm.gain, &self.norm.bias, &self.head_weight, &self.head_bias]);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![
            &mut self.patch_weight,
            &mut self.patch_bias,
            &mut self.cls_token,
            &mut self.pos_embed,
        ];
        for b in &mut self.blocks {
            v.extend([
                &mut b.norm1.gain,
                &mut b.norm1.bias,
                &mut b.qkv.weight,
                &mut b.qkv.bias,
                &mut b.attn_out.weight,
                &mut b.attn_out.bias,
                &mut b.norm2.gain,
                &mut b.norm2.bias,
                &mut b.fc1.weight,
                &mut b.fc1.bias,
                &mut b.fc2.weight,
                &mut b.fc2.bias,
            ]);
        }
        v.extend([
            &mut self.norm.gain,
            &mut self.norm.bias,
            &mut self.head_weight,
            &mut self.head_bias,
        ]);
        v
    }

    /// Position in [`Self::tensors`] of group `layer_number`'s weight.
    pub fn weight_param_index(&self, layer_number: usize) -> Result<usize> {
        let kind = self.group(layer_number)?.kind;
        let offset = match kind {
            GroupKind::Qkv => 2,
            GroupKind::AttnOut => 4,
            GroupKind::Fc1 => 8,
            GroupKind::Fc2 => 10,
        };
        Ok(4 + 12 * (layer_number / 4) + offset)
    }

    pub fn total_params(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    /// Weights of the linear groups; biases are never pruned.
    pub fn prunable_params(&self) -> usize {
        self.groups().map(|g| g.weight.numel()).sum()
    }

    pub fn non_prunable_params(&self) -> usize {
        self.total_params() - self.prunable_params()
    }

    /// FNV-1a over every parameter bit pattern, mask bit and skip flag.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |x: u64| {
            h ^= x;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        };
        for t in self.tensors() {
            t.data().iter().for_each(|v| eat(v.to_bits() as u64));
        }
        for g in self.groups() {
            g.mask.iter().for_each(|&m| eat(m as u64));
            eat(g.is_skip as u64 + 2);
        }
        h
    }

    /// Rearranges `[B x C x H x W]` images into `[B*P x C*p*p]` patch rows,
    /// patches row-major, each patch channel-major.
    fn patchify(&self, images: &Tensor) -> Result<(usize, Vec<f32>)> {
        let s = self.config.image_size;
        let p = self.config.patch_size;
        match images.shape() {
            [_, c, h, w] if *c == CHANNELS && *h == s && *w == s => {}
            other => bail!(Dimension, "expected images [B x {CHANNELS} x {s} x {s}], got {other:?}"),
        }
        let batch = images.shape()[0];
        let grid = s / p;
        let pd = self.config.patch_dim();
        let src = images.data();
        let mut out = vec![0.0f32; batch * grid * grid * pd];
        for b in 0..batch {
            for gy in 0..grid {
                for gx in 0..grid {
                    let row = &mut out[((b * grid + gy) * grid + gx) * pd..][..pd];
                    let mut k = 0;
                    for c in 0..CHANNELS {
                        for dy in 0..p {
                            let from = ((b * CHANNELS + c) * s + gy * p + dy) * s + gx * p;
                            row[k..k + p].copy_from_slice(&src[from..from + p]);
                            k += p;
                        }
                    }
                }
            }
        }
        Ok((batch, out))
    }

    /// Records the forward pass on `tape`. Returns the logits and one leaf
    /// per parameter, aligned with [`Self::tensors`].
    pub fn record_forward(&self, tape: &mut Tape, images: &Tensor) -> Result<(Var, Vec<Var>)> {
        let (batch, patches) = self.patchify(images)?;
        let params = self
            .tensors()
            .into_iter()
            .map(|t| tape.leaf(t))
            .collect::<Result<Vec<_>>>()?;
        let cfg = &self.config;
        let seq = cfg.seq_len();
        let rows = batch * seq;
        let heads = cfg.num_heads;
        let dh = cfg.embed_dim / heads;

        let patch_in = tape.constant(vec![batch * cfg.num_patches(), cfg.patch_dim()], patches)?;
        let emb = tape.linear(patch_in, params[0], Some(params[1]))?;
        let mut x = tape.tokens(emb, params[2], params[3], batch)?;

        for (bi, block) in self.blocks.iter().enumerate() {
            let p = &params[4 + 12 * bi..4 + 12 * (bi + 1)];
            let group = |tape: &mut Tape, input: Var, g: &LinearGroup, w: Var, b: Var| -> Result<Var> {
                if g.is_skip {
                    tape.zeros(vec![rows, g.out_features()])
                } else {
                    tape.linear(input, w, Some(b))
                }
            };

            let h = tape.layer_norm(x, p[0], p[1], LN_EPS)?;
            let qkv = group(tape, h, &block.qkv, p[2], p[3])?;
            let q = tape.split_heads(qkv, 0, batch, seq, heads)?;
            let k = tape.split_heads(qkv, 1, batch, seq, heads)?;
            let v = tape.split_heads(qkv, 2, batch, seq, heads)?;
            let scores = tape.batch_matmul(q, k, true)?;
            let scores = tape.scale(scores, 1.0 / (dh as f32).sqrt())?;
            let attn = tape.softmax(scores, 2)?;
            let ctx = tape.batch_matmul(attn, v, false)?;
            let ctx = tape.merge_heads(ctx, batch, seq, heads)?;
            let out = group(tape, ctx, &block.attn_out, p[4], p[5])?;
            x = tape.add(x, out)?;

            let h = tape.layer_norm(x, p[6], p[7], LN_EPS)?;
            let f = group(tape, h, &block.fc1, p[8], p[9])?;
            let f = tape.gelu(f)?;
            let f = group(tape, f, &block.fc2, p[10], p[11])?;
            x = tape.add(x, f)?;
        }

        let n = params.len();
        let x = tape.layer_norm(x, params[n - 4], params[n - 3], LN_EPS)?;
        let cls = tape.select_rows(x, seq, 0)?;
        let logits = tape.linear(cls, params[n - 2], Some(params[n - 1]))?;
        Ok((logits, params))
    }

    /// Logits `[B x num_classes]` for a batch of images.
    pub fn forward(&self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let (logits, _) = self.record_forward(&mut tape, images)?;
        Tensor::new(tape.shape(logits).to_vec(), tape.value(logits).to_vec())
    }

    pub(crate) fn set_param(&mut self, index: usize, data: Vec<f32>, shape: &[usize]) -> Result<()> {
        let mut tensors = self.tensors_mut();
        let Some(t) = tensors.get_mut(index) else {
            bail!(Format, "parameter index {index} out of range");
        };
        if t.shape() != shape {
            bail!(Format, "parameter {index} has shape {:?}, record says {shape:?}", t.shape());
        }
        t.data_mut().copy_from_slice(&data);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(depth: usize) -> ViTConfig {
        ViTConfig {
            image_size: 8,
            patch_size: 4,
            embed_dim: 8,
            num_heads: 2,
            depth,
            mlp_ratio: 2,
            num_classes: 3,
            seed: 11,
        }
    }

    #[test]
    fn four_groups_per_block() {
        let m = VisionTransformer::new(tiny(2)).unwrap();
        assert_eq!(m.enumerate_linear_groups(), (0..8).collect::<Vec<_>>());
        let m = VisionTransformer::new(tiny(1)).unwrap();
        assert_eq!(m.enumerate_linear_groups(), vec![0, 1, 2, 3]);
        let kinds: Vec<_> = m.groups().map(|g| g.kind()).collect();
        assert_eq!(kinds, GroupKind::ORDER.to_vec());
    }

    #[test]
    fn depth_zero_is_config_error() {
        assert!(matches!(VisionTransformer::new(tiny(0)), Err(crate::Error::Config(_))));
        let mut c = tiny(1);
        c.patch_size = 3;
        assert!(VisionTransformer::new(c).is_err());
        let mut c = tiny(1);
        c.num_heads = 3;
        assert!(VisionTransformer::new(c).is_err());
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = VisionTransformer::new(tiny(2)).unwrap();
        let b = VisionTransformer::new(tiny(2)).unwrap();
        assert_eq!(a, b);
        let mut c = tiny(2);
        c.seed = 12;
        assert_ne!(a.fingerprint(), VisionTransformer::new(c).unwrap().fingerprint());
    }

    #[test]
    fn names_align_with_tensors() {
        let mut m = VisionTransformer::new(tiny(3)).unwrap();
        let names = m.param_names();
        assert_eq!(names.len(), m.tensors().len());
        assert_eq!(names.len(), m.tensors_mut().len());
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
        assert_eq!(m.prunable_params() + m.non_prunable_params(), m.total_params());
        for g in m.enumerate_linear_groups() {
            let i = m.weight_param_index(g).unwrap();
            let kind = m.group(g).unwrap().kind().name();
            assert_eq!(names[i], format!("blocks.{}.{kind}.weight", g / 4));
        }
    }

    #[test]
    fn default_config_size() {
        let m = VisionTransformer::new(ViTConfig::default()).unwrap();
        assert_eq!(m.num_groups(), 16);
        assert!(m.total_params() <= 300_000, "{}", m.total_params());
    }

    #[test]
    fn logits_shape_and_full_ablation() {
        let mut m = VisionTransformer::new(tiny(2)).unwrap();
        let images = Tensor::from_fn(&[2, 3, 8, 8], |i| (i % 7) as f32 / 7.0).unwrap();
        let y = m.forward(&images).unwrap();
        assert_eq!(y.shape(), &[2, 3]);
        m.set_skips(&(0..8).collect::<Vec<_>>()).unwrap();
        let y = m.forward(&images).unwrap();
        assert!(y.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn wrong_image_shape() {
        let m = VisionTransformer::new(tiny(1)).unwrap();
        let images = Tensor::zeros(&[1, 3, 16, 16]).unwrap();
        assert!(matches!(m.forward(&images), Err(crate::Error::Dimension(_))));
    }
}
