//! Dense rank-4 `f32` tensors with a reverse-mode gradient tape.
//!
//! [`Tensor`] is a plain value (dims + row-major data). [`Var`] wraps a tensor
//! as a node of a dynamically recorded graph; calling [`Var::backward`] on a
//! scalar node replays the graph in reverse and leaves gradients on every
//! reachable parameter.

mod graph;
pub(crate) mod kernels;
mod ops;

pub use graph::{Gradients, OpKind, Var};
pub use ops::{BatchNormMode, BnBatchStats, ReduceKind, BN_EPS, BN_MOMENTUM};

use crate::error::{Error, Result};

/// Extents in (batch, channel, height, width) order.
pub type Dims = [usize; 4];

pub fn numel(dims: Dims) -> usize {
    dims.iter().product()
}

/// Equality compares dims and values only; gradient state is ignored.
#[derive(Clone, Debug)]
pub struct Tensor {
    dims: Dims,
    data: Vec<f32>,
    requires_grad: bool,
    grad: Option<Vec<f32>>,
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.dims == other.dims && self.data == other.data
    }
}

impl Tensor {
    pub fn new(dims: Dims, data: Vec<f32>) -> Result<Self> {
        if data.len() != numel(dims) {
            return Err(Error::dim(
                "data",
                format!("{} values for dims {:?} ({} expected)", data.len(), dims, numel(dims)),
            ));
        }
        Ok(Tensor {
            dims,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub(crate) fn from_parts(dims: Dims, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), numel(dims));
        Tensor {
            dims,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn zeros(dims: Dims) -> Self {
        Self::full(dims, 0.0)
    }

    pub fn full(dims: Dims, value: f32) -> Self {
        Self::from_parts(dims, vec![value; numel(dims)])
    }

    pub fn scalar(value: f32) -> Self {
        Self::from_parts([1, 1, 1, 1], vec![value])
    }

    /// Builds a tensor from a function of the (n, c, h, w) index.
    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize, usize) -> f32) -> Self {
        let [n, c, h, w] = dims;
        let mut data = Vec::with_capacity(numel(dims));
        for i in 0..n {
            for j in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        data.push(f(i, j, y, x));
                    }
                }
            }
        }
        Self::from_parts(dims, data)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn batch(&self) -> usize {
        self.dims[0]
    }

    pub fn channels(&self) -> usize {
        self.dims[1]
    }

    pub fn height(&self) -> usize {
        self.dims[2]
    }

    pub fn width(&self) -> usize {
        self.dims[3]
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

    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f32 {
        let [_, cc, hh, ww] = self.dims;
        self.data[((n * cc + c) * hh + h) * ww + w]
    }

    /// One (h, w) plane as a contiguous slice.
    pub fn plane(&self, n: usize, c: usize) -> &[f32] {
        let hw = self.dims[2] * self.dims[3];
        let start = (n * self.dims[1] + c) * hw;
        &self.data[start..start + hw]
    }

    /// The scalar value of a single-element tensor.
    pub fn item(&self) -> f32 {
        assert_eq!(self.data.len(), 1, "item() on a tensor with dims {:?}", self.dims);
        self.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Option<Vec<f32>>) -> Result<()> {
        if let Some(g) = &grad {
            if g.len() != self.data.len() {
                return Err(Error::dim("grad", format!("{} values for dims {:?}", g.len(), self.dims)));
            }
        }
        self.grad = grad;
        Ok(())
    }

    /// Same data with new dims of equal element count.
    pub fn reshape(mut self, dims: Dims) -> Result<Self> {
        if numel(dims) != self.data.len() {
            return Err(Error::dim("dims", format!("cannot reshape {:?} to {:?}", self.dims, dims)));
        }
        self.dims = dims;
        self.grad = None;
        Ok(self)
    }

    /// Largest absolute elementwise difference; `None` if dims differ.
    pub fn max_abs_diff(&self, other: &Tensor) -> Option<f32> {
        if self.dims != other.dims {
            return None;
        }
        Some(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f32::max),
        )
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
