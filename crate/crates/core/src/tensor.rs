//! Dense row-major tensors used for parameter storage.
//!
//! A [`Tensor`] owns its data. Computation happens on a
//! [`Tape`](crate::autodiff::Tape), which copies tensors in as leaves and
//! hands gradients back out.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
    pub requires_grad: bool,
    pub grad: Option<Vec<S>>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape("tensor", &shape, &[data.len()]));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, S::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, S::one())
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
            requires_grad: false,
            grad: None,
        }
    }

    /// Gaussian init with mean 0 and the given standard deviation.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let numel: usize = shape.iter().product();
        let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let data = (0..numel).map(|_| S::lit(normal.sample(rng))).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// Row `i` of a tensor viewed as `[shape[0], rest]`.
    pub fn row(&self, i: usize) -> &[S] {
        let width = self.numel() / self.shape[0].max(1);
        &self.data[i * width..(i + 1) * width]
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| T::lit(x.to_f64_exact())).collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }

    /// SHA-256 over the shape and the `f32` bit patterns of the data.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        self.feed(&mut hasher);
        hex::encode(hasher.finalize())
    }

    pub(crate) fn feed(&self, hasher: &mut Sha256) {
        for &dim in &self.shape {
            hasher.update((dim as u64).to_le_bytes());
        }
        for &x in &self.data {
            hasher.update(x.to_f32_lossy().to_bits().to_le_bytes());
        }
    }
}

/// Combined checksum over several tensors, order-sensitive.
pub fn checksum_all<'a, S: Scalar>(tensors: impl IntoIterator<Item = &'a Tensor<S>>) -> String {
    let mut hasher = Sha256::new();
    for t in tensors {
        t.feed(&mut hasher);
    }
    hex::encode(hasher.finalize())
}
