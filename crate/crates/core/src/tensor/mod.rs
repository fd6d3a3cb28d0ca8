//! Dense `f32` tensors and a small reverse-mode autodiff tape.
//!
//! Storage is always 32-bit and row-major. Every reduction (dot products,
//! row sums, means, variances, losses) accumulates in `f64` and rounds once
//! when the result is stored.

mod kernels;
mod tape;

pub use kernels::{dot, gemm_nt, transpose};
pub use tape::{Gradients, Tape, Var};
pub(crate) use tape::nll_rows;

use crate::error::{bail, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    requires_grad: bool,
    grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            bail!(Dimension, "shape {shape:?} has a zero extent");
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            bail!(
                Dimension,
                "shape {shape:?} needs {numel} values, got {}",
                data.len()
            );
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let numel = shape.iter().product();
        Self::new(shape.to_vec(), vec![0.0; numel])
    }

    pub fn scalar(value: f32) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f32) -> Result<Self> {
        let numel = shape.iter().product();
        Self::new(shape.to_vec(), (0..numel).map(&mut f).collect())
    }

    /// Marks the tensor as a gradient-receiving leaf.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn set_requires_grad(&mut self, requires_grad: bool) {
        self.requires_grad = requires_grad;
        if !requires_grad {
            self.grad = None;
        }
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    /// Adds `delta` into the stored gradient. Successive calls accumulate
    /// until [`Tensor::zero_grad`] is called.
    pub fn accumulate_grad(&mut self, delta: &[f32]) -> Result<()> {
        if delta.len() != self.data.len() {
            bail!(
                Dimension,
                "gradient of length {} for tensor of {} values",
                delta.len(),
                self.data.len()
            );
        }
        match &mut self.grad {
            Some(g) => g.iter_mut().zip(delta).for_each(|(g, d)| *g += d),
            None => self.grad = Some(delta.to_vec()),
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        check_finite(&self.data, what)
    }

    /// Reinterprets the buffer with a new shape of equal size.
    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() || shape.iter().any(|&d| d == 0) {
            bail!(
                Dimension,
                "cannot reshape {:?} into {shape:?}",
                self.shape
            );
        }
        self.shape = shape;
        Ok(self)
    }
}

pub(crate) fn check_finite(values: &[f32], what: &str) -> Result<()> {
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        bail!(Numeric, "{what}: non-finite value {} at index {i}", values[i]);
    }
    Ok(())
}

/// Plain SGD update `p <- p - lr * g`. Masks are the caller's business.
pub fn sgd_step(param: &mut Tensor, grad: &[f32], lr: f32) -> Result<()> {
    if grad.len() != param.numel() {
        bail!(
            Dimension,
            "gradient of length {} for parameter of {} values",
            grad.len(),
            param.numel()
        );
    }
    if !(lr >= 0.0) || !lr.is_finite() {
        bail!(Config, "learning rate must be finite and nonnegative, got {lr}");
    }
    for (p, g) in param.data.iter_mut().zip(grad) {
        *p -= lr * g;
    }
    param.check_finite("sgd step")
}
