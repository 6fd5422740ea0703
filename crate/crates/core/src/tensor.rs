//! Plain dense tensors: a shape and a row-major element buffer.

use crate::volume::AffineVolume;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T = f32> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Copy + Default> Tensor<T> {
    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![T::default(); n],
        }
    }

    pub fn from_vec(shape: Vec<usize>, data: Vec<T>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data length does not match shape {shape:?}"
        );
        Self { shape, data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn map<U: Copy + Default>(&self, f: impl Fn(T) -> U) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

impl Tensor<f32> {
    /// Stacks same-shaped volumes along a new leading batch axis.
    pub fn batch_of(volumes: &[&AffineVolume]) -> Option<Self> {
        let first = volumes.first()?;
        if volumes.iter().any(|v| v.shape() != first.shape()) {
            return None;
        }
        let mut shape = vec![volumes.len()];
        shape.extend_from_slice(first.shape());
        let mut data = Vec::with_capacity(shape.iter().product());
        for v in volumes {
            data.extend_from_slice(v.data());
        }
        Some(Self { shape, data })
    }
}
