//! Dense row-major `f64` tensors and the handful of kernels the network needs.
//!
//! Every differentiable kernel comes with an explicit backward function; there
//! is no tape. Callers keep whatever forward intermediates the backward pass
//! asks for.

mod activation;
mod conv;
mod gradcheck;
mod pool;
mod resize;

pub use activation::{relu, relu_backward, sigmoid, sigmoid_backward, sigmoid_scalar};
pub use conv::{conv2d, conv2d_backward, ConvGrads, ConvSpec};
pub use gradcheck::{gradcheck, GradCheckReport};
pub use pool::{maxpool2d, maxpool2d_backward, Pooled};
pub use resize::{bilinear_resize, bilinear_resize_backward};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::shape(format!(
                "extents must be positive, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} holds {expected} values but {} were given",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(
            !shape.is_empty() && shape.iter().all(|&d| d > 0),
            "extents must be positive, got {shape:?}"
        );
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    /// Builds a tensor by evaluating `f` at every flat index.
    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data = (0..t.data.len()).map(f).collect();
        t
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

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Extents of a `[C, H, W]` tensor.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::shape(format!(
                "expected a [C, H, W] tensor, got rank {} {:?}",
                self.shape.len(),
                self.shape
            ))),
        }
    }

    /// Flat offset of `[c, i, j]` in a rank-3 tensor: `(c * H + i) * W + j`.
    #[inline]
    pub fn offset3(&self, c: usize, i: usize, j: usize) -> usize {
        debug_assert_eq!(self.shape.len(), 3);
        (c * self.shape[1] + i) * self.shape[2] + j
    }

    #[inline]
    pub fn at3(&self, c: usize, i: usize, j: usize) -> f64 {
        self.data[self.offset3(c, i, j)]
    }

    /// Contiguous `H * W` slice of channel `c` in a `[C, H, W]` tensor.
    pub fn channel(&self, c: usize) -> &[f64] {
        let plane = self.shape[1..].iter().product::<usize>();
        &self.data[c * plane..(c + 1) * plane]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let plane = self.shape[1..].iter().product::<usize>();
        &mut self.data[c * plane..(c + 1) * plane]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Elementwise `self += other`.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.expect_same_shape(other, "add_assign")?;
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, b)| *a += b);
        Ok(())
    }

    /// Sum of elementwise products.
    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.expect_same_shape(other, "dot")?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub(crate) fn expect_same_shape(&self, other: &Tensor, what: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape, other.shape
            )));
        }
        Ok(())
    }
}

/// Stacks `[C_k, H, W]` tensors along the channel axis, in argument order.
pub fn concat_channels(inputs: &[&Tensor]) -> Result<Tensor> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::invalid("concat_channels needs at least one input"))?;
    let (_, h, w) = first.dims3()?;
    let mut channels = 0;
    for (k, t) in inputs.iter().enumerate() {
        let (c, th, tw) = t.dims3()?;
        if (th, tw) != (h, w) {
            return Err(Error::shape(format!(
                "concat_channels: input {k} is {th}x{tw}, expected {h}x{w}"
            )));
        }
        channels += c;
    }
    let mut data = Vec::with_capacity(channels * h * w);
    for t in inputs {
        data.extend_from_slice(&t.data);
    }
    Tensor::new(vec![channels, h, w], data)
}

/// Inverse of [`concat_channels`]: splits a `[ΣC_k, H, W]` tensor into pieces
/// with the given channel counts.
pub fn split_channels(input: &Tensor, channels: &[usize]) -> Result<Vec<Tensor>> {
    let (c, h, w) = input.dims3()?;
    let total: usize = channels.iter().sum();
    if total != c {
        return Err(Error::shape(format!(
            "split_channels: pieces sum to {total} channels but input has {c}"
        )));
    }
    let plane = h * w;
    let mut offset = 0;
    channels
        .iter()
        .map(|&ck| {
            let piece = input.data[offset * plane..(offset + ck) * plane].to_vec();
            offset += ck;
            Tensor::new(vec![ck, h, w], piece)
        })
        .collect()
}
