//! Dense `f64` tensors and the reverse-mode autodiff tape.
//!
//! [`Tensor`] is a plain shape + buffer value type; gradients live in an
//! optional same-shape buffer so optimizers can accumulate across a
//! mini-batch before stepping. All differentiable computation goes through
//! [`Tape`], which records operations define-by-run and is rebuilt on every
//! forward pass.

mod adam;
mod gradcheck;
mod tape;

pub use adam::AdamState;
pub use gradcheck::{finite_difference_grad, max_relative_error, relative_error};
pub use tape::{NodeId, Tape};

use crate::{Error, Result};

/// N-dimensional row-major `f64` array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::Shape {
                op: "from_vec",
                msg: format!("shape {shape:?} wants {n} elements, got {}", data.len()),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    /// Marks the tensor as a trainable leaf.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Adds `g` into the gradient buffer, allocating zeros on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::Shape {
                op: "accumulate_grad",
                msg: format!("gradient length {} vs tensor {}", g.len(), self.data.len()),
            });
        }
        let grad = self.grad.get_or_insert_with(|| vec![0.0; self.data.len()]);
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b;
        }
        Ok(())
    }

    /// Scales the accumulated gradient, e.g. by 1/batch before a step.
    pub fn scale_grad(&mut self, s: f64) {
        if let Some(g) = &mut self.grad {
            for v in g.iter_mut() {
                *v *= s;
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }
}

/// Ordered collection of uniquely named parameter tensors.
///
/// Order is part of the contract: optimizer state and checkpoint entries
/// are aligned by position, so iteration is deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        if self.entries.iter().any(|(n, _)| n == name) {
            return Err(Error::Invalid(format!("duplicate parameter name {name:?}")));
        }
        self.entries.push((name.to_string(), tensor.with_grad()));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|(_, t)| t)
    }

    /// Total scalar parameter count.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Adds per-parameter gradient vectors (aligned by position).
    pub fn accumulate_grads(&mut self, grads: &[Vec<f64>]) -> Result<()> {
        if grads.len() != self.entries.len() {
            return Err(Error::Shape {
                op: "accumulate_grads",
                msg: format!("{} gradients for {} parameters", grads.len(), self.entries.len()),
            });
        }
        for ((_, t), g) in self.entries.iter_mut().zip(grads) {
            t.accumulate_grad(g)?;
        }
        Ok(())
    }

    pub fn scale_grads(&mut self, s: f64) {
        for (_, t) in self.entries.iter_mut() {
            t.scale_grad(s);
        }
    }

    pub fn zero_grads(&mut self) {
        for (_, t) in self.entries.iter_mut() {
            t.zero_grad();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn grad_accumulates_and_scales() {
        let mut t = Tensor::zeros(&[3]).with_grad();
        t.accumulate_grad(&[1.0, 2.0, 3.0]).unwrap();
        t.accumulate_grad(&[1.0, 1.0, 1.0]).unwrap();
        t.scale_grad(0.5);
        assert_eq!(t.grad().unwrap(), &[1.0, 1.5, 2.0]);
        t.zero_grad();
        assert!(t.grad().is_none());
    }

    #[test]
    fn param_set_rejects_duplicates() {
        let mut p = ParamSet::new();
        p.add("w", Tensor::zeros(&[2])).unwrap();
        assert!(p.add("w", Tensor::zeros(&[2])).is_err());
        assert_eq!(p.numel(), 2);
    }
}
