//! Dense f32 tensors and the forward/backward kernels the U-Net is built from.
//!
//! Every kernel is a pure function with a fixed reduction order, so equal
//! inputs give bitwise-equal outputs on any thread count.

mod adam;
mod conv;
mod loss;
mod ops;
mod pool;
mod transpose;

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

pub use adam::{adam_step, AdamConfig, AdamState};
pub use conv::{conv2d_backward, conv2d_forward, ConvGrads};
pub use loss::{softmax2, weighted_ce_loss, weighted_ce_loss_normalized, LossOutput, IGNORE};
pub use ops::{concat_channels, relu_backward, relu_forward, split_channels};
pub use pool::{maxpool2x2_backward, maxpool2x2_forward, PoolIndices};
pub use transpose::{conv_transpose2d_backward, conv_transpose2d_forward};

pub(crate) use conv::conv2d_backward_inner;

/// Row-major dense array of finite `f32` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Builds a tensor, rejecting zero-sized axes, length mismatches and
    /// non-finite values.
    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Shape {
                op: "Tensor::new",
                shape: shape.to_vec(),
                reason: "every axis must be positive",
            });
        }
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::Dimension {
                op: "Tensor::new",
                axis: "data length",
                expected,
                actual: data.len(),
            });
        }
        if let Some((index, &value)) = data.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite { index, value });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        assert!(
            !shape.is_empty() && shape.iter().all(|&d| d > 0),
            "tensor axes must be positive"
        );
        assert!(value.is_finite());
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    /// Kernel-internal constructor; shape and finiteness are debug-asserted.
    pub(crate) fn from_raw(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        debug_assert!(data.iter().all(|v| v.is_finite()), "kernel produced a non-finite value");
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
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

    /// Interprets the tensor as `[N, C, H, W]`.
    pub fn dims4(&self, op: &'static str) -> Result<[usize; 4]> {
        match self.shape[..] {
            [n, c, h, w] => Ok([n, c, h, w]),
            _ => Err(Error::Shape {
                op,
                shape: self.shape.clone(),
                reason: "expected rank 4 [N, C, H, W]",
            }),
        }
    }

    /// Returns a copy with a new shape of equal element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Shape {
                op: "Tensor::reshape",
                shape: shape.to_vec(),
                reason: "every axis must be positive",
            });
        }
        let len: usize = shape.iter().product();
        if len != self.len() {
            return Err(Error::Dimension {
                op: "Tensor::reshape",
                axis: "element count",
                expected: self.len(),
                actual: len,
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    /// Sample `n` of a rank-4 tensor as a `[1, C, H, W]` tensor.
    pub fn sample(&self, n: usize) -> Result<Self> {
        let [batch, c, h, w] = self.dims4("Tensor::sample")?;
        if n >= batch {
            return Err(Error::Dimension {
                op: "Tensor::sample",
                axis: "N",
                expected: batch,
                actual: n,
            });
        }
        let len = c * h * w;
        Ok(Self::from_raw(
            vec![1, c, h, w],
            self.data[n * len..(n + 1) * len].to_vec(),
        ))
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Convolution weights `[out, in, k, k]`, bias `[out]`, stride and zero padding.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvKernel {
    pub weights: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl ConvKernel {
    pub fn new(weights: Tensor, bias: Tensor, stride: usize, padding: usize) -> Result<Self> {
        let [out, _, kh, kw] = weights.dims4("ConvKernel::new")?;
        if kh != kw || !(1..=3).contains(&kh) {
            return Err(Error::Shape {
                op: "ConvKernel::new",
                shape: weights.shape().to_vec(),
                reason: "kernel must be square 1x1, 2x2 or 3x3",
            });
        }
        if bias.shape() != [out] {
            return Err(Error::Dimension {
                op: "ConvKernel::new",
                axis: "bias",
                expected: out,
                actual: bias.len(),
            });
        }
        if stride == 0 {
            return Err(Error::Config("stride must be positive".into()));
        }
        Ok(Self {
            weights,
            bias,
            stride,
            padding,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn size(&self) -> usize {
        self.weights.shape()[2]
    }
}

/// Dot product with eight interleaved accumulators, combined in a fixed tree.
#[inline]
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; 8];
    let chunks = a.len() / 8;
    for i in 0..chunks {
        let (x, y) = (&a[i * 8..i * 8 + 8], &b[i * 8..i * 8 + 8]);
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0f32;
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[inline]
pub(crate) fn sum(a: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let chunks = a.len() / 8;
    for i in 0..chunks {
        let x = &a[i * 8..i * 8 + 8];
        for l in 0..8 {
            acc[l] += x[l];
        }
    }
    let mut tail = 0.0f32;
    for v in &a[chunks * 8..] {
        tail += v;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// Row-major view of a matrix operand: `(data, row_stride, col_stride)`.
pub(crate) type MatView<'a> = (&'a [f32], usize, usize);

/// `c = a · b + beta · c` for an `m×k` times `k×n` product, where `c` is a
/// dense row-major `m×n` block. Strides allow transposed operands.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: MatView, b: MatView, beta: f32, c: &mut [f32]) {
    let last = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs;
    assert!(m > 0 && k > 0 && n > 0);
    assert!(last(m, k, a.1, a.2) < a.0.len(), "gemm: lhs out of bounds");
    assert!(last(k, n, b.1, b.2) < b.0.len(), "gemm: rhs out of bounds");
    assert_eq!(c.len(), m * n, "gemm: output size");
    // SAFETY: the assertions above keep every strided access inside the
    // slices, and `c` is exclusively borrowed and disjoint from `a` and `b`.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.0.as_ptr(),
            a.1 as isize,
            a.2 as isize,
            b.0.as_ptr(),
            b.1 as isize,
            b.2 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `y += alpha * x`
#[inline]
pub(crate) fn axpy(y: &mut [f32], alpha: f32, x: &[f32]) {
    debug_assert_eq!(y.len(), x.len());
    for (y, x) in y.iter_mut().zip(x) {
        *y += alpha * x;
    }
}
