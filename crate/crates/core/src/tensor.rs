//! Dense row-major tensor of 64-bit floats. This is the carrier for images,
//! activations, and embeddings; it stays deliberately small — shaped storage
//! plus the indexing helpers the layer math needs.

use crate::{CoreError, Result};
use alloc::vec;
use alloc::vec::Vec;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Build from shape and row-major data; the element count must match.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(CoreError::ShapeMismatch(alloc::format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                expect,
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// Reinterpret with a new shape of equal element count.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn all_finite(&self) -> bool {
        crate::math::all_finite(&self.data)
    }

    /// Flat offset for [b, h, w, c] in a rank-4 tensor.
    #[inline]
    pub fn idx4(&self, b: usize, h: usize, w: usize, c: usize) -> usize {
        debug_assert_eq!(self.rank(), 4);
        ((b * self.shape[1] + h) * self.shape[2] + w) * self.shape[3] + c
    }

    /// Flat offset for [r, c] in a rank-2 tensor.
    #[inline]
    pub fn idx2(&self, r: usize, c: usize) -> usize {
        debug_assert_eq!(self.rank(), 2);
        r * self.shape[1] + c
    }

    /// Row `r` of a rank-2 tensor.
    pub fn row(&self, r: usize) -> &[f64] {
        debug_assert_eq!(self.rank(), 2);
        let w = self.shape[1];
        &self.data[r * w..(r + 1) * w]
    }

    /// Number of leading-dimension entries (batch size for batched tensors).
    pub fn dim0(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    /// Size of one leading-dimension entry.
    pub fn stride0(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    /// The `i`-th leading-dimension entry as a slice.
    pub fn entry(&self, i: usize) -> &[f64] {
        let s = self.stride0();
        &self.data[i * s..(i + 1) * s]
    }

    /// Gather leading-dimension entries by index into a new tensor.
    pub fn gather(&self, indices: &[usize]) -> Result<Self> {
        let stride = self.stride0();
        let mut shape = self.shape.clone();
        if shape.is_empty() {
            return Err(CoreError::ShapeMismatch("gather on rank-0 tensor".into()));
        }
        shape[0] = indices.len();
        let mut data = Vec::with_capacity(indices.len() * stride);
        for &i in indices {
            if i >= self.dim0() {
                return Err(CoreError::ShapeMismatch(alloc::format!(
                    "gather index {i} out of {}",
                    self.dim0()
                )));
            }
            data.extend_from_slice(self.entry(i));
        }
        Tensor::new(&shape, data)
    }

    /// Stack equal-shape entries along a new leading dimension.
    pub fn stack(entries: &[&Tensor]) -> Result<Self> {
        let first = entries
            .first()
            .ok_or_else(|| CoreError::InsufficientInputs("stack of zero tensors".into()))?;
        let mut shape = Vec::with_capacity(first.rank() + 1);
        shape.push(entries.len());
        shape.extend_from_slice(first.shape());
        let mut data = Vec::with_capacity(entries.len() * first.len());
        for t in entries {
            if t.shape() != first.shape() {
                return Err(CoreError::ShapeMismatch("stack of unequal shapes".into()));
            }
            data.extend_from_slice(t.data());
        }
        Tensor::new(&shape, data)
    }
}
