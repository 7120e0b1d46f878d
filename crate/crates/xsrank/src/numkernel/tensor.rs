use serde::{Deserialize, Serialize};

use super::{shape_err, KernelError, Result};

/// An immutable dense tensor: a shape and row-major values.
///
/// Invariant: `values.len()` equals the product of `shape`, and every value
/// is finite. Construction and all tape operations check the latter so a
/// NaN/Inf cannot propagate silently through a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TensorRepr", into = "TensorRepr")]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct TensorRepr {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl TryFrom<TensorRepr> for Tensor {
    type Error = KernelError;

    fn try_from(repr: TensorRepr) -> Result<Self> {
        Tensor::new(repr.shape, repr.values)
    }
}

impl From<Tensor> for TensorRepr {
    fn from(t: Tensor) -> Self {
        TensorRepr {
            shape: t.shape,
            values: t.values,
        }
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(shape_err("tensor", "zero-sized dimension"));
        }
        if values.len() != expect {
            return Err(shape_err(
                "tensor",
                format!("{} values for shape {:?}", values.len(), shape),
            ));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(shape_err("tensor", "non-finite value"));
        }
        Ok(Tensor { shape, values })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::new(vec![1], vec![v]).expect("finite scalar")
    }

    pub fn vector(values: Vec<f64>) -> Result<Self> {
        let n = values.len();
        Tensor::new(vec![n], values)
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], values)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            values: vec![0.0; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.values.len() == 1
    }

    /// Scalar contents; panics if the tensor is not 1-element.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on non-scalar tensor");
        self.values[0]
    }

    /// Rows/cols of a 2-d tensor; vectors count as a single row.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.len() {
            1 => (1, self.shape[0]),
            2 => (self.shape[0], self.shape[1]),
            _ => panic!("dims2 on tensor of rank {}", self.shape.len()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_shape_value_mismatch() {
        assert!(Tensor::new(vec![2, 2], vec![1.0, 2.0]).is_err());
    }

    #[test]
    fn rejects_non_finite() {
        assert!(Tensor::vector(vec![1.0, f64::NAN]).is_err());
        assert!(Tensor::vector(vec![f64::INFINITY]).is_err());
    }
}
