//! Fixtures and oracles shared by the integration tests.
#![allow(dead_code)]

pub mod reference;

use tierprune::{synth_dataset, Dataset, SynthSpec, ViTConfig, VisionTransformer};

/// 8 px, 2 blocks: fast enough for brute-force oracles.
pub fn micro_config(depth: usize, seed: u64) -> ViTConfig {
    ViTConfig {
        image_size: 8,
        patch_size: 4,
        embed_dim: 16,
        num_heads: 2,
        depth,
        mlp_ratio: 2,
        num_classes: 4,
        seed,
    }
}

pub fn micro_model(depth: usize, seed: u64) -> VisionTransformer {
    VisionTransformer::new(micro_config(depth, seed)).unwrap()
}

pub fn micro_data(per_class: usize, seed: u64) -> Dataset {
    synth_dataset(&SynthSpec {
        num_classes: 4,
        per_class,
        image_size: 8,
        noise: 0.3,
        seed,
    })
    .unwrap()
}

/// 16 px, 4 blocks, 10 classes: the trainable fixture.
pub fn tiny_config(seed: u64) -> ViTConfig {
    ViTConfig {
        image_size: 16,
        patch_size: 4,
        embed_dim: 32,
        num_heads: 4,
        depth: 4,
        mlp_ratio: 2,
        num_classes: 10,
        seed,
    }
}

pub fn tiny_data(per_class: usize, seed: u64) -> Dataset {
    synth_dataset(&SynthSpec {
        num_classes: 10,
        per_class,
        image_size: 16,
        noise: 0.3,
        seed,
    })
    .unwrap()
}

/// Mean negative log-likelihood computed directly in f64 from raw logits.
pub fn reference_nll(logits: &[f32], classes: usize, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (row, &y) in logits.chunks_exact(classes).zip(labels) {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
        let lse = max + row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln();
        total += lse - row[y] as f64;
    }
    total / labels.len() as f64
}

/// Symmetric relative error `|a - b| / max(|a|, |b|)`, zero when both are 0.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Central difference of `f` at `x[i]`, step `h`, restoring `x[i]` after.
pub fn central_difference(x: &mut [f32], i: usize, h: f32, mut f: impl FnMut(&[f32]) -> f64) -> f64 {
    let orig = x[i];
    x[i] = orig + h;
    let plus = f(x);
    x[i] = orig - h;
    let minus = f(x);
    x[i] = orig;
    // the actual step after f32 rounding
    let step = ((orig + h) as f64) - ((orig - h) as f64);
    (plus - minus) / step
}

/// A model in which one group dominates: every other group's weights and
/// bias are scaled down by `1e-2`, the dominant group gets a large random
/// bias, and the labels are the model's own predictions.
pub struct Planted {
    pub model: VisionTransformer,
    pub data: Dataset,
    pub layer: usize,
}

pub fn planted_fixture(seed: u64) -> Planted {
    use rand::{Rng, SeedableRng};

    let mut model = micro_model(4, seed);
    let layer = 4 * (seed as usize % 4) + 3;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    for g in model.groups_mut() {
        if g.layer_number() == layer {
            g.bias_mut().data_mut().iter_mut().for_each(|b| *b = rng.random_range(-2.0..2.0));
        } else {
            g.weight_mut().data_mut().iter_mut().for_each(|w| *w *= 1e-2);
            g.bias_mut().data_mut().iter_mut().for_each(|b| *b *= 1e-2);
        }
    }
    let n = model.tensors().len();
    model.tensors_mut()[n - 2].data_mut().iter_mut().for_each(|w| *w *= 5.0);

    let inputs = micro_data(8, seed);
    let z = tierprune::model::logits(&model, &inputs, 64).unwrap();
    let labels = z
        .chunks_exact(4)
        .map(|row| {
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            row.iter().position(|&v| v == max).unwrap()
        })
        .collect();
    let data = Dataset::new(inputs.images().clone(), labels, 4).unwrap();
    Planted { model, data, layer }
}

/// Solo-ablation loss of every group, by zeroing its weight and bias on a
/// copy of the model.
pub fn solo_losses_by_zeroing(model: &VisionTransformer, data: &Dataset) -> Vec<f64> {
    (0..model.num_groups())
        .map(|l| {
            let mut m = model.clone();
            let g = m.group_mut(l).unwrap();
            g.weight_mut().data_mut().fill(0.0);
            g.bias_mut().data_mut().fill(0.0);
            tierprune::model::dataset_loss(&m, data, 64).unwrap()
        })
        .collect()
}

/// A whole-pipeline config small enough to run in about a second.
pub fn fast_config(out: &std::path::Path, seed: u64) -> tierprune::ExperimentConfig {
    let text = serde_json::json!({
        "model": { "image_size": 8, "patch_size": 4, "embed_dim": 16, "num_heads": 2, "depth": 2,
                   "mlp_ratio": 2, "num_classes": 4, "seed": 0 },
        "data": { "source": { "synthetic": { "num_classes": 4, "per_class": 30, "image_size": 8,
                                             "noise": 0.3, "seed": 0 } } },
        "personalization": { "kept_classes": [0, 2] },
        "pretrain": { "epochs": 5, "lr": 0.1, "batch_size": 16 },
        "probe": { "random_number": 2, "margin": 0.5 },
        "prune": { "prob": 0.1, "rounds": 3, "lr": 0.05, "batch_size": 16 },
        "seed": seed,
        "output_dir": out,
    });
    tierprune::ExperimentConfig::from_json(&text.to_string()).unwrap()
}
