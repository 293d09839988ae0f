//! Dense row-major `f64` tensors, the seeded generator, and initializers.
//!
//! Layout is row-major (last extent varies fastest). Serialized tensors and
//! flattened parameter vectors rely on this order.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape must have at least one extent and no zero extents, got {0:?}")]
    InvalidShape(Vec<usize>),
    #[error("value count {len} does not match shape {shape:?}")]
    LengthMismatch { shape: Vec<usize>, len: usize },
    #[error("cannot combine tensors of shapes {left:?} and {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },
    #[error("non-finite value at flat index {0}")]
    NonFinite(usize),
    #[error("glorot fan values must be positive (fan_in={fan_in}, fan_out={fan_out})")]
    InvalidFan { fan_in: usize, fan_out: usize },
    #[error("slice {start}..{end} out of range for leading extent {extent}")]
    SliceOutOfRange {
        start: usize,
        end: usize,
        extent: usize,
    },
}

fn check_shape(shape: &[usize]) -> Result<usize, TensorError> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(TensorError::InvalidShape(shape.to_vec()));
    }
    Ok(shape.iter().product())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Tensor {
    pub fn from_vec(shape: &[usize], values: Vec<f64>) -> Result<Self, TensorError> {
        let len = check_shape(shape)?;
        if len != values.len() {
            return Err(TensorError::LengthMismatch {
                shape: shape.to_vec(),
                len: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite(i));
        }
        Ok(Self {
            shape: shape.to_vec(),
            values,
        })
    }

    /// A rank-1 tensor over `values`.
    pub fn vector(values: Vec<f64>) -> Result<Self, TensorError> {
        let n = values.len();
        Self::from_vec(&[n], values)
    }

    pub fn filled(shape: &[usize], value: f64) -> Result<Self, TensorError> {
        let len = check_shape(shape)?;
        if !value.is_finite() {
            return Err(TensorError::NonFinite(0));
        }
        Ok(Self {
            shape: shape.to_vec(),
            values: vec![value; len],
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Mutable access to the flat buffer. Callers must keep values finite.
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self, TensorError> {
        let len = check_shape(shape)?;
        if len != self.values.len() {
            return Err(TensorError::LengthMismatch {
                shape: shape.to_vec(),
                len: self.values.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            values: self.values,
        })
    }

    /// Rows `start..end` along the leading axis.
    pub fn slice_leading(&self, start: usize, end: usize) -> Result<Self, TensorError> {
        let extent = self.shape[0];
        if start >= end || end > extent {
            return Err(TensorError::SliceOutOfRange { start, end, extent });
        }
        let row: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Ok(Self {
            shape,
            values: self.values[start * row..end * row].to_vec(),
        })
    }

    /// Gathers rows of the leading axis in the given order.
    pub fn gather_leading(&self, rows: &[usize]) -> Result<Self, TensorError> {
        let extent = self.shape[0];
        let row: usize = self.shape[1..].iter().product();
        let mut values = Vec::with_capacity(rows.len() * row);
        for &r in rows {
            if r >= extent {
                return Err(TensorError::SliceOutOfRange {
                    start: r,
                    end: r + 1,
                    extent,
                });
            }
            values.extend_from_slice(&self.values[r * row..(r + 1) * row]);
        }
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        check_shape(&shape)?;
        Ok(Self { shape, values })
    }

    fn zip_with(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self, TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let values: Vec<f64> = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Self::from_vec(&self.shape, values)
    }

    pub fn add(&self, other: &Self) -> Result<Self, TensorError> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self, TensorError> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self, TensorError> {
        self.zip_with(other, |a, b| a * b)
    }

    pub fn scale(&self, factor: f64) -> Result<Self, TensorError> {
        Self::from_vec(
            &self.shape,
            self.values.iter().map(|v| v * factor).collect(),
        )
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn dot(&self, other: &Self) -> Result<f64, TensorError> {
        if self.values.len() != other.values.len() {
            return Err(TensorError::ShapeMismatch {
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(dot(&self.values, &other.values))
    }

    pub fn norm(&self) -> f64 {
        dot(&self.values, &self.values).sqrt()
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn zeros(shape: &[usize]) -> Result<Tensor, TensorError> {
    Tensor::filled(shape, 0.0)
}

/// Deterministic generator backed by ChaCha8 (a counter-mode stream).
///
/// A seed maps to the same stream on every platform. Child seeds come from
/// the generator keyed by the parent seed on a stream selected by the label,
/// so `derive_child` is a pure function of `(seed, label)`.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn derive_child(seed: u64, label: u64) -> u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(label);
        rng.next_u64()
    }

    /// Convenience: a fresh generator seeded with `derive_child(self.seed, label)`.
    pub fn child(&self, label: u64) -> Self {
        Self::new(Self::derive_child(self.seed, label))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[low, high]`; returns `low` when the interval is empty.
    pub fn uniform(&mut self, low: f64, high: f64) -> f64 {
        if high <= low {
            return low;
        }
        (low + (high - low) * self.next_f64()).min(high)
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.inner.sample(rand_distr::StandardNormal)
    }

    pub(crate) fn inner_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.inner
    }
}

/// Glorot uniform limit `sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_limit(fan_in: usize, fan_out: usize) -> Result<f64, TensorError> {
    if fan_in == 0 || fan_out == 0 {
        return Err(TensorError::InvalidFan { fan_in, fan_out });
    }
    Ok((6.0 / (fan_in + fan_out) as f64).sqrt())
}

pub fn glorot_uniform(
    fan_in: usize,
    fan_out: usize,
    shape: &[usize],
    rng: &mut SeededRng,
) -> Result<Tensor, TensorError> {
    let limit = glorot_limit(fan_in, fan_out)?;
    let len = check_shape(shape)?;
    let values = (0..len).map(|_| rng.uniform(-limit, limit)).collect();
    Tensor::from_vec(shape, values)
}
