//! Dense `f64` tensors, trainable parameters, and the reverse-mode tape.
//!
//! Every model in the crate is expressed as a forward pass over a [`Graph`].
//! Parameters enter the graph as leaves; a frozen parameter becomes a leaf that
//! does not require a gradient, so its own gradient is never computed while
//! gradients still flow through it to upstream trainable leaves.

mod graph;
pub mod gradcheck;
pub mod init;
mod kernels;
pub mod optim;

pub use gradcheck::{finite_diff_check, FiniteDiffReport};
pub(crate) use graph::pool_windows;
pub use graph::{Gradients, Graph, Targets, Var};
pub use optim::{Adam, AdamConfig};

use serde::{Deserialize, Serialize};

/// Row-major dense tensor with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    #[serde(skip)]
    grad: Option<Vec<f64>>,
    #[serde(skip)]
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match {} values",
            data.len()
        );
        Self {
            shape,
            data,
            grad: None,
            requires_grad: false,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(shape.to_vec(), vec![0.0; shape.iter().product()])
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn scalar(value: f64) -> Self {
        Self::new(vec![1, 1], vec![value])
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading dimensions collapsed; a 1-D tensor is a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => 1,
            _ => self.shape[..self.shape.len() - 1].iter().product(),
        }
    }

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Drops the gradient buffer.
    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `delta` into the gradient buffer. Ignored when the tensor does not
    /// require a gradient.
    pub fn accumulate_grad(&mut self, delta: &[f64]) {
        if !self.requires_grad {
            return;
        }
        assert_eq!(delta.len(), self.data.len(), "gradient length mismatch");
        let g = self.grad.get_or_insert_with(|| vec![0.0; delta.len()]);
        for (a, b) in g.iter_mut().zip(delta) {
            *a += b;
        }
    }

    pub fn scale_grad(&mut self, factor: f64) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// A named tensor that is either trainable or frozen.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    frozen: bool,
}

impl Parameter {
    pub fn new(name: impl Into<String>, mut tensor: Tensor) -> Self {
        tensor.set_requires_grad(true);
        Self {
            name: name.into(),
            tensor,
            frozen: false,
        }
    }

    pub fn frozen(name: impl Into<String>, tensor: Tensor) -> Self {
        let mut p = Self::new(name, tensor);
        p.set_frozen(true);
        p
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
        self.tensor.set_requires_grad(!frozen);
    }

    pub fn numel(&self) -> usize {
        self.tensor.len()
    }

    pub fn shape(&self) -> &[usize] {
        self.tensor.shape()
    }
}

/// Named parameter gradients from one backward sweep.
pub type GradMap = std::collections::HashMap<String, Vec<f64>>;

/// Replaces each parameter's gradient with `scale · Σ grads[i][name]`.
/// Summation runs in slice order so the result does not depend on how the
/// per-example gradients were scheduled.
pub fn set_summed_grads<'p>(
    params: impl IntoIterator<Item = &'p mut Parameter>,
    grads: &[GradMap],
    scale: f64,
) {
    let mut params: Vec<&mut Parameter> = params.into_iter().collect();
    params.iter_mut().for_each(|p| p.tensor.zero_grad());
    add_summed_grads(params, grads, scale);
}

/// Like [`set_summed_grads`] but adds to the existing gradients, for
/// accumulation over several micro-batches.
pub fn add_summed_grads<'p>(
    params: impl IntoIterator<Item = &'p mut Parameter>,
    grads: &[GradMap],
    scale: f64,
) {
    for p in params {
        if p.is_frozen() {
            continue;
        }
        let mut total: Option<Vec<f64>> = None;
        for g in grads {
            if let Some(v) = g.get(&p.name) {
                match total.as_mut() {
                    Some(t) => t.iter_mut().zip(v).for_each(|(a, b)| *a += b),
                    None => total = Some(v.clone()),
                }
            }
        }
        if let Some(mut t) = total {
            t.iter_mut().for_each(|v| *v *= scale);
            p.tensor.accumulate_grad(&t);
        }
    }
}

/// Index of the largest value; ties go to the lower index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

