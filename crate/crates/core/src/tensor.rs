//! Dense f32 tensors with validated shape and finite elements.

use crate::error::{Error, Result};

/// A contiguous row-major f32 tensor of rank >= 1.
///
/// Construction validates that the element count equals the shape product,
/// every dimension is positive, and every element is finite, so a `Tensor`
/// held by value is always well-formed.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::InvalidTensor {
                name: String::new(),
                reason: "rank 0 tensors are not supported".to_string(),
            });
        }
        if shape.contains(&0) {
            return Err(Error::InvalidTensor {
                name: String::new(),
                reason: format!("zero-sized dimension in shape {shape:?}"),
            });
        }
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::InvalidTensor {
                name: String::new(),
                reason: format!(
                    "data length {} does not match shape {shape:?} (expected {expected})",
                    data.len()
                ),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "element {i} is {}",
                data[i]
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        Tensor::new(shape, vec![0.0; n])
    }

    /// Rounds an f64 buffer to f32 once, then validates.
    pub fn from_f64(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        Tensor::new(shape, data.into_iter().map(|v| v as f32).collect())
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

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    /// The (rows, cols) view of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::InvalidTensor {
                name: String::new(),
                reason: format!("expected rank 2, got shape {other:?}"),
            }),
        }
    }

    /// Bitwise equality: distinguishes -0.0 from 0.0, unlike `==`.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}
