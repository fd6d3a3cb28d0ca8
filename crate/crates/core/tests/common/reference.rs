//! A plain f64 re-implementation of the ViT forward pass, written from the
//! architecture description without the tape. Used as an independent oracle
//! for logits and, through finite differences, for gradients.

use tierprune::{Dataset, ViTConfig, VisionTransformer};

const LN_EPS: f64 = 1e-5;

/// Parameters as f64, in the model's `tensors()` order.
pub fn params_f64(model: &VisionTransformer) -> Vec<Vec<f64>> {
    model
        .tensors()
        .iter()
        .map(|t| t.data().iter().map(|&v| v as f64).collect())
        .collect()
}

/// `y[r][o] = sum_i x[r][i] * w[o][i] + b[o]`.
fn linear(x: &[Vec<f64>], w: &[f64], b: &[f64]) -> Vec<Vec<f64>> {
    let out = b.len();
    x.iter()
        .map(|row| {
            (0..out)
                .map(|o| row.iter().zip(&w[o * row.len()..][..row.len()]).map(|(a, c)| a * c).sum::<f64>() + b[o])
                .collect()
        })
        .collect()
}

fn layer_norm(x: &[Vec<f64>], g: &[f64], b: &[f64]) -> Vec<Vec<f64>> {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            row.iter().enumerate().map(|(c, v)| (v - mean) * rs * g[c] + b[c]).collect()
        })
        .collect()
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

fn add(a: &mut [Vec<f64>], b: &[Vec<f64>]) {
    for (ra, rb) in a.iter_mut().zip(b) {
        ra.iter_mut().zip(rb).for_each(|(x, y)| *x += y);
    }
}

/// Logits for one image `[3 x H x W]`, with the groups in `skip` producing
/// zeros.
pub fn logits_one(cfg: &ViTConfig, p: &[Vec<f64>], image: &[f32], skip: &[usize]) -> Vec<f64> {
    let (s, ps, d) = (cfg.image_size, cfg.patch_size, cfg.embed_dim);
    let grid = s / ps;
    let heads = cfg.num_heads;
    let dh = d / heads;

    // patches, row-major over the grid, each flattened channel, row, column
    let mut patches = Vec::new();
    for gy in 0..grid {
        for gx in 0..grid {
            let mut v = Vec::new();
            for c in 0..3 {
                for dy in 0..ps {
                    for dx in 0..ps {
                        v.push(image[(c * s + gy * ps + dy) * s + gx * ps + dx] as f64);
                    }
                }
            }
            patches.push(v);
        }
    }
    let emb = linear(&patches, &p[0], &p[1]);
    let seq = emb.len() + 1;
    let mut x: Vec<Vec<f64>> = std::iter::once(p[2].clone()).chain(emb).collect();
    for (t, row) in x.iter_mut().enumerate() {
        row.iter_mut().zip(&p[3][t * d..(t + 1) * d]).for_each(|(a, b)| *a += b);
    }

    for blk in 0..cfg.depth {
        let q = &p[4 + 12 * blk..4 + 12 * (blk + 1)];
        let skipped = |kind: usize| skip.contains(&(4 * blk + kind));
        let zeros = |width: usize| vec![vec![0.0; width]; seq];

        let h = layer_norm(&x, &q[0], &q[1]);
        let qkv = if skipped(0) { zeros(3 * d) } else { linear(&h, &q[2], &q[3]) };
        let mut ctx = zeros(d);
        for hd in 0..heads {
            let col = |part: usize, t: usize, j: usize| qkv[t][part * d + hd * dh + j];
            for t in 0..seq {
                let scores: Vec<f64> = (0..seq)
                    .map(|u| (0..dh).map(|j| col(0, t, j) * col(1, u, j)).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for j in 0..dh {
                    ctx[t][hd * dh + j] = (0..seq).map(|u| e[u] / z * col(2, u, j)).sum();
                }
            }
        }
        let out = if skipped(1) { zeros(d) } else { linear(&ctx, &q[4], &q[5]) };
        add(&mut x, &out);

        let h = layer_norm(&x, &q[6], &q[7]);
        let hidden = q[9].len();
        let f = if skipped(2) { zeros(hidden) } else { linear(&h, &q[8], &q[9]) };
        let f: Vec<Vec<f64>> = f.iter().map(|r| r.iter().map(|&v| gelu(v)).collect()).collect();
        let f = if skipped(3) { zeros(d) } else { linear(&f, &q[10], &q[11]) };
        add(&mut x, &f);
    }

    let n = p.len();
    let cls = layer_norm(&x[..1], &p[n - 4], &p[n - 3]);
    linear(&cls, &p[n - 2], &p[n - 1]).remove(0)
}

/// Mean cross-entropy over `data` in f64.
pub fn mean_loss(cfg: &ViTConfig, p: &[Vec<f64>], data: &Dataset, skip: &[usize]) -> f64 {
    let per = 3 * cfg.image_size * cfg.image_size;
    let idx: Vec<usize> = (0..data.len()).collect();
    let (images, labels) = data.batch(&idx).unwrap();
    let mut total = 0.0;
    for (img, &y) in images.data().chunks_exact(per).zip(&labels) {
        let z = logits_one(cfg, p, img, skip);
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - z[y];
    }
    total / labels.len() as f64
}

/// Outcome of [`gradcheck`].
#[derive(Debug)]
pub struct GradCheck {
    /// Coordinates compared by relative error.
    pub checked: usize,
    pub worst_rel: f64,
    pub worst_name: String,
    /// Key-bias coordinates, whose exact gradient is zero: a per-query
    /// constant added to every score leaves the softmax unchanged.
    pub zero_checked: usize,
    /// Largest `|analytic|` and `|numeric|` seen on those.
    pub zero_worst_abs: f64,
}

/// Compares tape gradients of the mean cross-entropy over `data` against
/// central differences of [`mean_loss`] with step `h`, on up to `per_param`
/// random coordinates of every parameter.
pub fn gradcheck(model: &VisionTransformer, data: &Dataset, per_param: usize, h: f64, seed: u64) -> GradCheck {
    use rand::SeedableRng;
    use tierprune::Tape;

    let idx: Vec<usize> = (0..data.len()).collect();
    let (images, labels) = data.batch(&idx).unwrap();
    let cfg = model.config().clone();
    let mut tape = Tape::new();
    let (logits, vars) = model.record_forward(&mut tape, &images).unwrap();
    let loss = tape.cross_entropy(logits, &labels).unwrap();
    let grads = tape.backward(loss).unwrap();

    let names = model.param_names();
    let mut values = params_f64(model);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut out = GradCheck { checked: 0, worst_rel: 0.0, worst_name: String::new(), zero_checked: 0, zero_worst_abs: 0.0 };
    for (p, name) in names.iter().enumerate() {
        let numel = values[p].len();
        let coords: Vec<usize> = if numel <= per_param {
            (0..numel).collect()
        } else {
            rand::seq::index::sample(&mut rng, numel, per_param).into_vec()
        };
        let analytic = grads.get(vars[p]).expect("parameter gradient");
        for i in coords {
            let orig = values[p][i];
            values[p][i] = orig + h;
            let plus = mean_loss(&cfg, &values, data, &[]);
            values[p][i] = orig - h;
            let minus = mean_loss(&cfg, &values, data, &[]);
            values[p][i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[i] as f64;
            let d = cfg.embed_dim;
            if name.ends_with("qkv.bias") && (d..2 * d).contains(&i) {
                out.zero_checked += 1;
                out.zero_worst_abs = out.zero_worst_abs.max(a.abs()).max(numeric.abs());
            } else {
                let e = super::rel_err(a, numeric);
                if e > out.worst_rel {
                    out.worst_rel = e;
                    out.worst_name = format!("{name}[{i}] analytic {a:e} numeric {numeric:e}");
                }
                out.checked += 1;
            }
        }
    }
    out
}
