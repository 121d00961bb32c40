use serde::{Deserialize, Serialize};

use super::{shape_err, NeuralError};

/// Dense row-major array of f64.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self, NeuralError> {
        if shape.iter().any(|&d| d == 0) {
            return shape_err(format!("zero-sized dimension in {shape:?}"));
        }
        let n: usize = shape.iter().product();
        if n != values.len() {
            return shape_err(format!("shape {shape:?} needs {n} values, got {}", values.len()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(NeuralError::NonFinite("tensor values".into()));
        }
        Ok(Self { shape, values })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), values: vec![0.0; n] }
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Self::zeros(&other.shape)
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        Self { shape: vec![values.len()], values }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn fill(&mut self, v: f64) {
        self.values.iter_mut().for_each(|x| *x = v);
    }

    pub fn expect_shape(&self, what: &str, shape: &[usize]) -> Result<(), NeuralError> {
        if self.shape != shape {
            return shape_err(format!("{what}: expected {shape:?}, found {:?}", self.shape));
        }
        Ok(())
    }
}
