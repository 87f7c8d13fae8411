//! Dense row-major `f32` tensors and the differentiable kernels built on them.

mod ops;

pub use ops::{
    conv2d_backward, conv2d_forward, conv2d_output_extent, dense_backward, dense_forward,
    gap_backward, gap_forward, maxpool2d_backward, maxpool2d_forward, relu_backward,
    relu_forward, softmax_xent, ConvGrads, DenseGrads, PoolIndices,
};
pub(crate) use ops::conv2d_backward_with;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape {shape:?} holds {expected} elements but {actual} were supplied")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("{op}: expected rank {expected}, got shape {actual:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        actual: Vec<usize>,
    },
    #[error("{op}: dimension `{dim}` mismatch (expected {expected}, got {actual})")]
    DimMismatch {
        op: &'static str,
        dim: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("{op}: window {window} does not fit spatial extent {extent}")]
    WindowTooLarge {
        op: &'static str,
        window: usize,
        extent: usize,
    },
    #[error("{op}: stride must be at least 1")]
    ZeroStride { op: &'static str },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

/// A dense N-dimensional array of 32-bit reals stored row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected = shape.iter().product::<usize>();
        if expected != data.len() {
            return Err(TensorError::DataLength {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f32) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..len).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    /// Extents of a rank-4 tensor, or a rank error tagged with `op`.
    pub fn dims4(&self, op: &'static str) -> Result<[usize; 4]> {
        match self.shape[..] {
            [a, b, c, d] => Ok([a, b, c, d]),
            _ => Err(TensorError::Rank {
                op,
                expected: 4,
                actual: self.shape.clone(),
            }),
        }
    }

    pub fn dims2(&self, op: &'static str) -> Result<[usize; 2]> {
        match self.shape[..] {
            [a, b] => Ok([a, b]),
            _ => Err(TensorError::Rank {
                op,
                expected: 2,
                actual: self.shape.clone(),
            }),
        }
    }

    pub fn dims1(&self, op: &'static str) -> Result<usize> {
        match self.shape[..] {
            [a] => Ok(a),
            _ => Err(TensorError::Rank {
                op,
                expected: 1,
                actual: self.shape.clone(),
            }),
        }
    }

    pub fn scaled(&self, factor: f32) -> Self {
        self.map(|v| v * factor)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Element-wise sum of two same-shaped tensors.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.rank() != other.rank() {
            return Err(TensorError::Rank {
                op: "add",
                expected: self.rank(),
                actual: other.shape.clone(),
            });
        }
        if let Some((axis, (&a, &b))) = self
            .shape
            .iter()
            .zip(other.shape.iter())
            .enumerate()
            .find(|(_, (a, b))| a != b)
        {
            return Err(TensorError::DimMismatch {
                op: "add",
                dim: AXIS_NAMES.get(axis).copied().unwrap_or("axis"),
                expected: a,
                actual: b,
            });
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(a, b)| a + b)
                .collect(),
        })
    }

    /// Contiguous sub-block along the leading axis.
    pub fn slice_outer(&self, start: usize, end: usize) -> Tensor {
        let inner: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Tensor {
            shape,
            data: self.data[start * inner..end * inner].to_vec(),
        }
    }

    /// Gather leading-axis entries by index.
    pub fn gather_outer(&self, indices: &[usize]) -> Tensor {
        let inner: usize = self.shape[1..].iter().product();
        let mut data = Vec::with_capacity(indices.len() * inner);
        for &i in indices {
            data.extend_from_slice(&self.data[i * inner..(i + 1) * inner]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Tensor { shape, data }
    }

    /// Keep only the listed indices along `axis`, in the given order.
    pub fn select_axis(&self, axis: usize, keep: &[usize]) -> Tensor {
        let outer: usize = self.shape[..axis].iter().product();
        let extent = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * keep.len() * inner);
        for o in 0..outer {
            let base = o * extent * inner;
            for &k in keep {
                let start = base + k * inner;
                data.extend_from_slice(&self.data[start..start + inner]);
            }
        }
        let mut shape = self.shape.clone();
        shape[axis] = keep.len();
        Tensor { shape, data }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}

const AXIS_NAMES: [&str; 4] = ["N", "C", "H", "W"];

/// A value paired with its (optional) accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct GradPair {
    pub value: Tensor,
    pub grad: Option<Tensor>,
}

impl GradPair {
    pub fn new(value: Tensor) -> Self {
        Self { value, grad: None }
    }

    /// Add `g` into the stored gradient.
    pub fn accumulate(&mut self, g: &Tensor) -> Result<()> {
        if g.shape() != self.value.shape() {
            return Err(TensorError::DataLength {
                shape: self.value.shape().to_vec(),
                expected: self.value.len(),
                actual: g.len(),
            });
        }
        match &mut self.grad {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            None => self.grad = Some(g.clone()),
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }
}
