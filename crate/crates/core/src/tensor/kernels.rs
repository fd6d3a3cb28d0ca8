//! Scalar compute kernels shared by the tape.

const LANES: usize = 8;

/// Dot product of two equal-length `f32` slices, accumulated in `f64`.
///
/// Eight independent partial sums keep the loop vectorizable while fixing
/// the summation order, so the result depends only on the two slices.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; LANES];
    let chunks = a.len() / LANES;
    for c in 0..chunks {
        let xa = &a[c * LANES..(c + 1) * LANES];
        let xb = &b[c * LANES..(c + 1) * LANES];
        for l in 0..LANES {
            acc[l] += xa[l] as f64 * xb[l] as f64;
        }
    }
    let mut tail = 0.0f64;
    for i in chunks * LANES..a.len() {
        tail += a[i] as f64 * b[i] as f64;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `out[i, j] = sum_k a[i, k] * b[j, k]` for `a: m x k`, `b: n x k`.
pub fn gemm_nt(a: &[f32], m: usize, k: usize, b: &[f32], n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    gemm_nt_into(a, m, k, b, n, &mut out);
    out
}

pub(crate) fn gemm_nt_into(a: &[f32], m: usize, k: usize, b: &[f32], n: usize, out: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    if k == 0 {
        out.fill(0.0);
        return;
    }
    for (row, out_row) in a.chunks_exact(k).zip(out.chunks_exact_mut(n)) {
        for (o, col) in out_row.iter_mut().zip(b.chunks_exact(k)) {
            *o = dot(row, col) as f32;
        }
    }
}

/// Transposes a row-major `rows x cols` matrix.
pub fn transpose(a: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    debug_assert_eq!(a.len(), rows * cols);
    let mut out = vec![0.0f32; a.len()];
    const BLOCK: usize = 32;
    for r0 in (0..rows).step_by(BLOCK) {
        for c0 in (0..cols).step_by(BLOCK) {
            for r in r0..(r0 + BLOCK).min(rows) {
                for c in c0..(c0 + BLOCK).min(cols) {
                    out[c * rows + r] = a[r * cols + c];
                }
            }
        }
    }
    out
}

/// Tanh approximation of GELU and its derivative.
#[inline]
pub(crate) fn gelu(x: f32) -> f32 {
    let x = x as f64;
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    (0.5 * x * (1.0 + inner.tanh())) as f32
}

#[inline]
pub(crate) fn gelu_grad(x: f32) -> f32 {
    let x = x as f64;
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let d_inner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner) as f32
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_matches_naive() {
        let a: Vec<f32> = (0..37).map(|i| (i as f32 * 0.3).sin()).collect();
        let b: Vec<f32> = (0..37).map(|i| (i as f32 * 0.7).cos()).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| *x as f64 * *y as f64).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-12);
    }

    #[test]
    fn transpose_roundtrip() {
        let a: Vec<f32> = (0..70 * 33).map(|i| i as f32).collect();
        let t = transpose(&a, 70, 33);
        assert_eq!(t[5 * 70 + 2], a[2 * 33 + 5]);
        assert_eq!(transpose(&t, 33, 70), a);
    }

    #[test]
    fn gelu_at_zero_is_exactly_zero() {
        assert_eq!(gelu(0.0).to_bits(), 0.0f32.to_bits());
        assert!((gelu_grad(0.0) - 0.5).abs() < 1e-7);
    }

    #[test]
    fn zero_weights_give_positive_zero() {
        let x = [-1.0f32, 2.0, -3.0];
        let w = [0.0f32; 6];
        let y = gemm_nt(&x, 1, 3, &w, 2);
        assert!(y.iter().all(|v| v.to_bits() == 0));
    }
}
