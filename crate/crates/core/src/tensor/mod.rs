//! Dense NCHW `f32` tensors and the kernels everything else is built from.
//!
//! Every value in the engine is a rank-4 tensor. Vectors (biases, batchnorm
//! statistics) are stored as `(1, 1, 1, len)` and scalars as `(1, 1, 1, 1)`.
//! Matrix kernels treat a tensor `(n, c, h, w)` as a batch of `n * c`
//! matrices of shape `h x w`.

mod grad;
mod ops;

pub use grad::*;
pub use ops::*;

use std::fmt;

use crate::error::{config_err, Result};

pub type Dims = [usize; 4];

#[derive(Clone, PartialEq)]
pub struct Tensor {
    dims: Dims,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Dims, data: Vec<f32>) -> Result<Self> {
        check_dims(dims)?;
        let numel = numel(dims);
        if data.len() != numel {
            return Err(config_err(format!(
                "tensor data length {} does not match dims {:?} ({} elements)",
                data.len(),
                dims,
                numel
            )));
        }
        Ok(Self { dims, data })
    }

    /// Builds from a buffer whose length is known to match `dims`.
    pub(crate) fn from_parts(dims: Dims, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), numel(dims));
        Self { dims, data }
    }

    pub fn zeros(dims: Dims) -> Self {
        Self::full(dims, 0.0)
    }

    pub fn full(dims: Dims, value: f32) -> Self {
        assert!(
            dims.iter().all(|&d| d >= 1),
            "all dims must be >= 1, got {dims:?}"
        );
        Self {
            dims,
            data: vec![value; numel(dims)],
        }
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize, usize) -> f32) -> Self {
        let mut t = Self::zeros(dims);
        let [n, c, h, w] = dims;
        let mut idx = 0;
        for i in 0..n {
            for j in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        t.data[idx] = f(i, j, y, x);
                        idx += 1;
                    }
                }
            }
        }
        t
    }

    /// A `(1, 1, 1, len)` tensor.
    pub fn vector(values: Vec<f32>) -> Self {
        assert!(!values.is_empty(), "vector must be non-empty");
        Self {
            dims: [1, 1, 1, values.len()],
            data: values,
        }
    }

    pub fn scalar(value: f32) -> Self {
        Self {
            dims: [1, 1, 1, 1],
            data: vec![value],
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn n(&self) -> usize {
        self.dims[0]
    }

    pub fn c(&self) -> usize {
        self.dims[1]
    }

    pub fn h(&self) -> usize {
        self.dims[2]
    }

    pub fn w(&self) -> usize {
        self.dims[3]
    }

    pub fn spatial(&self) -> (usize, usize) {
        (self.dims[2], self.dims[3])
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

    pub fn index(&self, i: usize, j: usize, y: usize, x: usize) -> usize {
        let [_, c, h, w] = self.dims;
        ((i * c + j) * h + y) * w + x
    }

    pub fn at(&self, i: usize, j: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(i, j, y, x)]
    }

    /// Reinterprets the buffer under new dims with the same element count.
    pub fn reshape(&self, dims: Dims) -> Result<Self> {
        check_dims(dims)?;
        if numel(dims) != self.numel() {
            return Err(config_err(format!(
                "cannot reshape {:?} into {:?}",
                self.dims, dims
            )));
        }
        Ok(Self {
            dims,
            data: self.data.clone(),
        })
    }

    /// Reads the tensor as a flat per-channel vector (any layout with `len`
    /// elements).
    pub fn as_vector(&self, len: usize, what: &str) -> Result<&[f32]> {
        if self.numel() != len {
            return Err(config_err(format!(
                "{what}: expected {len} values, tensor has dims {:?}",
                self.dims
            )));
        }
        Ok(&self.data)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f32 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        assert_eq!(self.dims, other.dims, "max_abs_diff on mismatched dims");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    /// Bitwise equality, distinguishing `-0.0` from `0.0` and comparing NaN
    /// payloads.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.dims == other.dims
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f32> = self.data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("dims", &self.dims)
            .field("data", &preview)
            .finish()
    }
}

pub fn numel(dims: Dims) -> usize {
    dims.iter().product()
}

pub(crate) fn check_dims(dims: Dims) -> Result<()> {
    if dims.iter().any(|&d| d == 0) {
        return Err(config_err(format!("all dims must be >= 1, got {dims:?}")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Relu,
    Sigmoid,
}

/// Geometry of a 2-D convolution. Weight shape is
/// `(out_channels, in_channels / groups, kernel.0, kernel.1)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub bias: bool,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel: (kernel, kernel),
            stride: 1,
            padding: 0,
            groups: 1,
            bias: false,
        }
    }

    /// Square kernel with "same" padding at stride 1.
    pub fn same(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self::new(in_channels, out_channels, kernel).padding(kernel / 2)
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn with_bias(mut self, bias: bool) -> Self {
        self.bias = bias;
        self
    }

    pub fn weight_dims(&self) -> Dims {
        [
            self.out_channels,
            self.in_channels / self.groups.max(1),
            self.kernel.0,
            self.kernel.1,
        ]
    }

    pub fn bias_dims(&self) -> Dims {
        [1, 1, 1, self.out_channels]
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(config_err(format!(
                "conv channels must be >= 1 (in {}, out {})",
                self.in_channels, self.out_channels
            )));
        }
        if self.kernel.0 == 0 || self.kernel.1 == 0 {
            return Err(config_err("conv kernel dims must be >= 1"));
        }
        if self.stride == 0 {
            return Err(config_err("conv stride must be >= 1"));
        }
        if self.groups == 0
            || self.in_channels % self.groups != 0
            || self.out_channels % self.groups != 0
        {
            return Err(config_err(format!(
                "conv groups {} must divide in_channels {} and out_channels {}",
                self.groups, self.in_channels, self.out_channels
            )));
        }
        Ok(())
    }

    /// Output spatial size for an input of `(h, w)`.
    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let axis = |size: usize, k: usize, name: &str| -> Result<usize> {
            let padded = size + 2 * self.padding;
            if padded < k {
                return Err(config_err(format!(
                    "conv output {name} would be empty: input {size} + 2*{} padding < kernel {k}",
                    self.padding
                )));
            }
            if (padded - k) % self.stride != 0 {
                return Err(config_err(format!(
                    "conv output {name} is not integral: ({size} + 2*{} - {k}) / {} ",
                    self.padding, self.stride
                )));
            }
            Ok((padded - k) / self.stride + 1)
        };
        Ok((
            axis(h, self.kernel.0, "height")?,
            axis(w, self.kernel.1, "width")?,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_layout_is_row_major_nchw() {
        let t = Tensor::from_fn([2, 3, 4, 5], |i, j, y, x| {
            (i * 1000 + j * 100 + y * 10 + x) as f32
        });
        assert_eq!(t.index(1, 2, 3, 4), ((1 * 3 + 2) * 4 + 3) * 5 + 4);
        assert_eq!(t.at(1, 2, 3, 4), 1234.0);
    }

    #[test]
    fn rejects_zero_dims_and_bad_lengths() {
        assert!(Tensor::new([1, 0, 2, 2], vec![]).is_err());
        assert!(Tensor::new([1, 1, 2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn output_size_requires_integral_result() {
        let spec = ConvSpec::new(1, 1, 3).stride(2);
        assert_eq!(spec.output_size(5, 5).unwrap(), (2, 2));
        assert!(spec.output_size(4, 4).is_err());
        assert!(ConvSpec::new(1, 1, 3).output_size(2, 2).is_err());
    }
}
