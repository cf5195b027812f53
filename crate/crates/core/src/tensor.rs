//! Immutable f32 tensors.
//!
//! A [`Tensor`] is a shape plus reference-counted contiguous storage; clones
//! are cheap. Construction validates that every element is finite, so a NaN
//! or Inf produced anywhere in the numeric stack turns into an error at the
//! operation that created it rather than propagating silently.

use std::sync::Arc;

use crate::error::NumericsError;
use crate::rng::StreamRng;

#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f32>>,
}

impl PartialEq for Tensor {
    /// Bitwise equality — used by determinism tests.
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl Tensor {
    /// Build a tensor, checking element count and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self, NumericsError> {
        Self::checked(shape, data, "Tensor::new")
    }

    pub(crate) fn checked(
        shape: Vec<usize>,
        data: Vec<f32>,
        op: &'static str,
    ) -> Result<Self, NumericsError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(NumericsError::InvalidShape {
                op,
                shape,
                reason: format!("shape wants {numel} elements, data has {}", data.len()),
            });
        }
        if !all_finite(&data) {
            return Err(NumericsError::NonFinite { op });
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![0.0; numel]),
        }
    }

    pub fn full(shape: &[usize], value: f32) -> Result<Self, NumericsError> {
        let numel = shape.iter().product();
        Self::checked(shape.to_vec(), vec![value; numel], "Tensor::full")
    }

    pub fn scalar(value: f32) -> Result<Self, NumericsError> {
        Self::checked(vec![], vec![value], "Tensor::scalar")
    }

    pub fn from_vec(data: Vec<f32>) -> Result<Self, NumericsError> {
        let n = data.len();
        Self::checked(vec![n], data, "Tensor::from_vec")
    }

    /// iid N(0, scale^2) entries.
    pub fn randn(shape: &[usize], scale: f32, rng: &mut StreamRng) -> Result<Self, NumericsError> {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.normal() * scale).collect();
        Self::checked(shape.to_vec(), data, "Tensor::randn")
    }

    /// iid U(lo, hi) entries.
    pub fn rand_uniform(
        shape: &[usize],
        lo: f32,
        hi: f32,
        rng: &mut StreamRng,
    ) -> Result<Self, NumericsError> {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.uniform_in(lo, hi)).collect();
        Self::checked(shape.to_vec(), data, "Tensor::rand_uniform")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// The single element of a scalar (or 1-element) tensor.
    pub fn item(&self) -> f32 {
        debug_assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    /// Same storage, new shape (element counts must agree).
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self, NumericsError> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(NumericsError::InvalidShape {
                op: "reshape",
                shape,
                reason: format!("tensor has {} elements", self.numel()),
            });
        }
        Ok(Tensor {
            shape,
            data: Arc::clone(&self.data),
        })
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.data.to_vec()
    }
}

/// Fast finiteness scan. `x - x == 0.0` holds exactly for every finite float
/// and fails for NaN/Inf; the form below autovectorizes.
pub(crate) fn all_finite(data: &[f32]) -> bool {
    let mut ok = true;
    for chunk in data.chunks(64) {
        let mut bad = 0u32;
        for &v in chunk {
            bad |= (!v.is_finite()) as u32;
        }
        ok &= bad == 0;
    }
    ok
}
