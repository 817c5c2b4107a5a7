//! Minimal n-dimensional array engine with reverse-mode differentiation.
//!
//! Values live in [`Tensor`]; differentiable computations are recorded on a
//! [`Graph`] tape and addressed through [`Var`] handles. The primitive set is
//! closed: everything the network and its losses need is expressed with the
//! operations on [`Graph`], each of which carries an analytic backward rule.
//!
//! Broadcasting is deliberately narrow: the right-hand operand of `add`,
//! `mul` and `div` may have a shape equal to a *suffix* of the left-hand
//! shape (a scalar `[]` is the empty suffix), and is repeated over the leading
//! axes. Nothing else broadcasts.

pub mod gradcheck;
mod graph;
mod kernels;

pub use graph::{forward_mul_count, reset_forward_mul_count, Gradients, Graph, Var};

use thiserror::Error;

/// Shape violation reported by a primitive.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{op}: {detail}")]
pub struct ShapeError {
    pub op: &'static str,
    pub detail: String,
}

impl ShapeError {
    pub(crate) fn new(op: &'static str, detail: impl Into<String>) -> Self {
        Self {
            op,
            detail: detail.into(),
        }
    }
}

/// Dense row-major array of `f64` values (last axis fastest).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, ShapeError> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(ShapeError::new(
                "tensor",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(ShapeError::new("tensor", format!("zero extent in {shape:?}")));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self, ShapeError> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(ShapeError::new(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Copy with axes reordered so that output axis `i` is input axis `axes[i]`.
    pub fn permuted(&self, axes: &[usize]) -> Result<Self, ShapeError> {
        check_axes("permute", &self.shape, axes)?;
        let (shape, data) = kernels::permute(&self.shape, &self.data, axes);
        Ok(Self { shape, data })
    }

    /// Round every value to the nearest `f32`.
    pub fn round_to_f32(&mut self) {
        for v in &mut self.data {
            *v = *v as f32 as f64;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

pub(crate) fn check_axes(op: &'static str, shape: &[usize], axes: &[usize]) -> Result<(), ShapeError> {
    let mut seen = vec![false; shape.len()];
    if axes.len() != shape.len() {
        return Err(ShapeError::new(
            op,
            format!("axes {axes:?} do not match rank {} of {shape:?}", shape.len()),
        ));
    }
    for &a in axes {
        if a >= shape.len() || seen[a] {
            return Err(ShapeError::new(op, format!("invalid axis list {axes:?}")));
        }
        seen[a] = true;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_mismatched_length() {
        let err = Tensor::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert_eq!(err.op, "tensor");
    }

    #[test]
    fn scalar_has_empty_shape() {
        let s = Tensor::scalar(4.0);
        assert!(s.shape().is_empty());
        assert_eq!(s.item(), Some(4.0));
    }

    #[test]
    fn permute_round_trip() {
        let t = Tensor::new(vec![2, 3, 4], (0..24).map(f64::from).collect()).unwrap();
        let p = t.permuted(&[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        let back = p.permuted(&[1, 2, 0]).unwrap();
        assert_eq!(back, t);
    }
}
