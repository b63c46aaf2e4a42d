//! Dense row-major `f32` tensor of rank 1 to 4.
//!
//! Images and activations use the `(height, width, channels)` layout, so the
//! linear index of `(h, w, c)` is `(h * W + w) * C + c`.

use std::fmt;

use thiserror::Error;

pub const MAX_RANK: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("tensor rank {0} outside 1..={MAX_RANK}")]
    BadRank(usize),
    #[error("tensor extent at axis {axis} is zero")]
    ZeroExtent { axis: usize },
    #[error("dims {dims:?} require {expected} elements, got {actual}")]
    LengthMismatch {
        dims: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
}

#[derive(Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

fn check_dims(dims: &[usize]) -> Result<usize, TensorError> {
    if dims.is_empty() || dims.len() > MAX_RANK {
        return Err(TensorError::BadRank(dims.len()));
    }
    if let Some(axis) = dims.iter().position(|&d| d == 0) {
        return Err(TensorError::ZeroExtent { axis });
    }
    Ok(dims.iter().product())
}

impl Tensor {
    /// Validating constructor: checks rank, extents, length and finiteness.
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self, TensorError> {
        let expected = check_dims(&dims)?;
        if expected != data.len() {
            return Err(TensorError::LengthMismatch {
                dims,
                expected,
                actual: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite(i));
        }
        Ok(Self { dims, data })
    }

    /// Skips validation. Callers guarantee `product(dims) == data.len()`.
    pub fn from_raw_unchecked(dims: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        Self { dims, data }
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::filled(dims, 0.0)
    }

    pub fn filled(dims: &[usize], value: f32) -> Self {
        let n = dims.iter().product();
        Self::from_raw_unchecked(dims.to_vec(), vec![value; n])
    }

    pub fn from_vec(data: Vec<f32>) -> Self {
        Self::from_raw_unchecked(vec![data.len()], data)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// Same data under new dims; element count must be preserved.
    pub fn reshape(self, dims: Vec<usize>) -> Result<Self, TensorError> {
        let expected = check_dims(&dims)?;
        if expected != self.data.len() {
            return Err(TensorError::LengthMismatch {
                dims,
                expected,
                actual: self.data.len(),
            });
        }
        Ok(Self {
            dims,
            data: self.data,
        })
    }

    /// Element of a rank-3 `(h, w, c)` tensor.
    pub fn at3(&self, h: usize, w: usize, c: usize) -> f32 {
        let (_, wd, cd) = (self.dims[0], self.dims[1], self.dims[2]);
        self.data[(h * wd + w) * cd + c]
    }

    /// Bitwise equality, distinguishing `-0.0` from `0.0`.
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
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?} [", self.dims)?;
        for (i, v) in self.data.iter().take(SHOWN).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v}")?;
        }
        if self.data.len() > SHOWN {
            write!(f, ", ... ({} total)", self.data.len())?;
        }
        write!(f, "]")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validating_constructor_rejects_bad_input() {
        assert_eq!(
            Tensor::new(vec![], vec![]).unwrap_err(),
            TensorError::BadRank(0)
        );
        assert_eq!(
            Tensor::new(vec![1, 1, 1, 1, 1], vec![0.0]).unwrap_err(),
            TensorError::BadRank(5)
        );
        assert_eq!(
            Tensor::new(vec![2, 0], vec![]).unwrap_err(),
            TensorError::ZeroExtent { axis: 1 }
        );
        assert!(matches!(
            Tensor::new(vec![2, 2], vec![0.0; 3]),
            Err(TensorError::LengthMismatch { expected: 4, .. })
        ));
        assert_eq!(
            Tensor::new(vec![2], vec![1.0, f32::NAN]).unwrap_err(),
            TensorError::NonFinite(1)
        );
        assert_eq!(
            Tensor::new(vec![1], vec![f32::INFINITY]).unwrap_err(),
            TensorError::NonFinite(0)
        );
    }

    #[test]
    fn hwc_indexing() {
        let t = Tensor::new(vec![2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(t.at3(0, 0, 1), 2.0);
        assert_eq!(t.at3(1, 0, 0), 3.0);
    }

    #[test]
    fn bit_eq_sees_signed_zero() {
        let a = Tensor::from_vec(vec![0.0]);
        let b = Tensor::from_vec(vec![-0.0]);
        assert_eq!(a, b);
        assert!(!a.bit_eq(&b));
    }

    #[test]
    fn reshape_checks_count() {
        let t = Tensor::zeros(&[4, 4, 2]);
        assert!(t.clone().reshape(vec![32]).is_ok());
        assert!(t.reshape(vec![31]).is_err());
    }
}
