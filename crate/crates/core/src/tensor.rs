use crate::error::{Error, Result};

/// Dense row-major grid, `(H, W)` or `(H, W, D, ...)`.
///
/// The meaning of the values (heatmap, offsets, labels, visibility, ...)
/// is fixed by the function that produced or consumes the tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct BevTensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Copy> BevTensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::ShapeMismatch {
                what: "tensor data length",
                expected: vec![expected],
                found: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn filled(shape: Vec<usize>, value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// `(H, W)` of the leading two axes.
    pub fn bev_dims(&self) -> (usize, usize) {
        (
            self.shape.first().copied().unwrap_or(0),
            self.shape.get(1).copied().unwrap_or(1),
        )
    }

    /// Product of the axes after the first two.
    pub fn depth(&self) -> usize {
        self.shape.iter().skip(2).product()
    }

    /// Values of pixel `(i, j)` across every trailing axis.
    pub fn pixel(&self, i: usize, j: usize) -> &[T] {
        let (_, w) = self.bev_dims();
        let d = self.depth();
        let start = (i * w + j) * d;
        &self.data[start..start + d]
    }

    pub fn pixel_mut(&mut self, i: usize, j: usize) -> &mut [T] {
        let (_, w) = self.bev_dims();
        let d = self.depth();
        let start = (i * w + j) * d;
        &mut self.data[start..start + d]
    }

    pub fn expect_shape(&self, what: &'static str, expected: &[usize]) -> Result<()> {
        if self.shape != expected {
            return Err(Error::ShapeMismatch {
                what,
                expected: expected.to_vec(),
                found: self.shape.clone(),
            });
        }
        Ok(())
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> BevTensor<U> {
        BevTensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}
