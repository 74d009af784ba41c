//! Dense n-dimensional tensor of 64-bit floats, row-major.
//!
//! The universal value type of the crate: images are `H x W x C`, convolution
//! kernels `k x k x Cin x Cout`, coordinate embeddings `H x W x 1`, losses
//! scalars of shape `[1]`.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, validating that `data.len()` equals the product of
    /// `shape` and that every dimension is positive.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) || numel != data.len() {
            return Err(Error::InvalidTensor {
                shape,
                len: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
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

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a single-element tensor.
    ///
    /// Panics when the tensor has more than one element; callers reach this
    /// only after `backward`'s scalar-root check or on loss outputs.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on non-scalar shape {:?}", self.shape);
        self.data[0]
    }

    /// Element accessor for rank-3 tensors laid out `[H, W, C]`.
    #[inline]
    pub fn at3(&self, row: usize, col: usize, ch: usize) -> f64 {
        let (_, w, c) = self.dims3();
        self.data[(row * w + col) * c + ch]
    }

    #[inline]
    pub fn set3(&mut self, row: usize, col: usize, ch: usize, value: f64) {
        let (_, w, c) = self.dims3();
        self.data[(row * w + col) * c + ch] = value;
    }

    /// `(H, W, C)` of a rank-3 tensor. Panics on other ranks.
    #[inline]
    pub fn dims3(&self) -> (usize, usize, usize) {
        assert!(
            self.shape.len() == 3,
            "expected rank-3 tensor, got shape {:?}",
            self.shape
        );
        (self.shape[0], self.shape[1], self.shape[2])
    }

    /// `(rows, cols)` of a rank-2 tensor. Panics on other ranks.
    #[inline]
    pub fn dims2(&self) -> (usize, usize) {
        assert!(
            self.shape.len() == 2,
            "expected rank-2 tensor, got shape {:?}",
            self.shape
        );
        (self.shape[0], self.shape[1])
    }

    /// Same data viewed under a new shape with identical element count.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.data.iter()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_validates_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        let err = Tensor::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, Error::InvalidTensor { .. }));
    }

    #[test]
    fn new_rejects_zero_dims() {
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn rank3_indexing_is_row_major_channel_last() {
        let t = Tensor::new(vec![2, 2, 3], (0..12).map(f64::from).collect()).unwrap();
        assert_eq!(t.at3(0, 0, 0), 0.0);
        assert_eq!(t.at3(0, 0, 2), 2.0);
        assert_eq!(t.at3(0, 1, 0), 3.0);
        assert_eq!(t.at3(1, 0, 0), 6.0);
        assert_eq!(t.at3(1, 1, 2), 11.0);
    }

    #[test]
    fn reshape_preserves_data() {
        let t = Tensor::new(vec![2, 3], (0..6).map(f64::from).collect()).unwrap();
        let r = t.reshaped(&[6]).unwrap();
        assert_eq!(r.shape(), &[6]);
        assert_eq!(r.data(), t.data());
        assert!(t.reshaped(&[4]).is_err());
    }
}
