//! Dense f64 tensors with reverse-mode differentiation.
//!
//! [`Tensor`] is a plain value: shape plus row-major data, with an optional
//! gradient buffer on trainable leaves. Differentiable computation happens on
//! a [`Graph`], a tape of executed ops; [`Graph::backward`] replays it in
//! reverse. [`finite_diff_check`] is the central-difference oracle used by
//! the test suite and the `gradcheck` command.

mod fdiff;
mod graph;
pub(crate) mod kernels;
#[cfg(test)]
mod tests;

pub use fdiff::finite_diff_check;
pub use graph::{Graph, Var};
pub use kernels::{parallel_enabled, set_parallel_enabled};

use crate::error::{Error, Result};
use kernels::{fmt_shape, numel};
use rand::Rng;

/// Dense row-major f64 tensor. The gradient buffer exists iff
/// `requires_grad` and always mirrors the data shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::Shape(format!(
                "shape {} implies {} elements, data has {}",
                fmt_shape(&shape),
                numel(&shape),
                data.len()
            )));
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Tensor { shape, data: vec![0.0; n], requires_grad: false, grad: None }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n = numel(&shape);
        Tensor { shape, data: vec![value; n], requires_grad: false, grad: None }
    }

    /// Rank-0 scalar.
    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![], data: vec![value], requires_grad: false, grad: None }
    }

    /// Identity matrix n x n.
    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Uniform samples in [lo, hi).
    pub fn uniform<R: Rng>(rng: &mut R, shape: Vec<usize>, lo: f64, hi: f64) -> Self {
        let n = numel(&shape);
        let data = (0..n).map(|_| lo + (hi - lo) * rng.gen::<f64>()).collect();
        Tensor { shape, data, requires_grad: false, grad: None }
    }

    /// Gaussian samples via Box-Muller, mean 0, given standard deviation.
    pub fn normal<R: Rng>(rng: &mut R, shape: Vec<usize>, std: f64) -> Self {
        let n = numel(&shape);
        let data = (0..n)
            .map(|_| {
                let u1: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
                let u2: f64 = rng.gen();
                std * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
            })
            .collect();
        Tensor { shape, data, requires_grad: false, grad: None }
    }

    /// Marks the tensor trainable and allocates its gradient buffer.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self.grad = Some(vec![0.0; self.data.len()]);
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Element at a full multi-index.
    pub fn at(&self, idx: &[usize]) -> f64 {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut flat = 0;
        for (d, &i) in idx.iter().enumerate() {
            debug_assert!(i < self.shape[d]);
            flat = flat * self.shape[d] + i;
        }
        self.data[flat]
    }

    /// The single value of a rank-0 or one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::Shape(format!(
                "item() on non-scalar tensor of shape {}",
                fmt_shape(&self.shape)
            )));
        }
        Ok(self.data[0])
    }

    /// Same data viewed under a new shape (copy).
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self> {
        if numel(&shape) != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {} to {}",
                fmt_shape(&self.shape),
                fmt_shape(&shape)
            )));
        }
        Tensor::from_vec(shape, self.data.clone())
    }

    pub fn validate_finite(&self, what: &str) -> Result<()> {
        for (i, &v) in self.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("{what}: element {i} is {v}")));
            }
        }
        Ok(())
    }

    /// Adds a gradient contribution into the buffer (allocating it counts as
    /// marking the tensor trainable).
    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::Shape(format!(
                "gradient length {} vs tensor {}",
                g.len(),
                fmt_shape(&self.shape)
            )));
        }
        self.requires_grad = true;
        let buf = self.grad.get_or_insert_with(|| vec![0.0; g.len()]);
        for (b, &v) in buf.iter_mut().zip(g.iter()) {
            *b += v;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn scale_grad(&mut self, c: f64) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v *= c);
        }
    }
}
