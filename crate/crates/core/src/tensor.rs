use alloc::vec;
use alloc::vec::Vec;

use crate::{bail, Error, Result, Rng, Scalar};

/// Index of a node on a [`crate::Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Dense row-major tensor with an optional gradient slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    values: Vec<F>,
    requires_grad: bool,
    grad: Option<Vec<F>>,
    /// Node this tensor was bound to on the active tape, if any.
    pub node: Option<NodeId>,
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: Vec<usize>, values: Vec<F>) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) {
            bail!(Input, "zero extent in shape {shape:?}");
        }
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(Error::Dimension {
                op: "tensor",
                lhs: shape,
                rhs: vec![values.len()],
            });
        }
        Ok(Self {
            shape,
            values,
            requires_grad: false,
            grad: None,
            node: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, F::zero())
    }

    pub fn filled(shape: &[usize], v: F) -> Self {
        let n = shape.iter().product();
        Self::new(shape.to_vec(), vec![v; n]).expect("valid shape")
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> F) -> Self {
        let n = shape.iter().product();
        Self::new(shape.to_vec(), (0..n).map(&mut f).collect()).expect("valid shape")
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(&[n, n], |k| if k / n == k % n { F::one() } else { F::zero() })
    }

    /// Gaussian entries with standard deviation `std`.
    pub fn randn(shape: &[usize], std: f64, rng: &mut Rng) -> Self {
        Self::from_fn(shape, |_| F::of(rng.normal() * std))
    }

    pub fn param(mut self) -> Self {
        self.requires_grad = true;
        self
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

    pub fn values(&self) -> &[F] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [F] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<F> {
        self.values
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        if !on {
            self.grad = None;
        }
    }

    pub fn grad(&self) -> Option<&[F]> {
        self.grad.as_deref()
    }

    /// Resets the gradient to zeros (or clears it for non-trainable tensors).
    pub fn zero_grad(&mut self) {
        self.grad = self.requires_grad.then(|| vec![F::zero(); self.values.len()]);
    }

    /// Adds `g` into the gradient slot. Ignored when `requires_grad` is off.
    pub fn accumulate_grad(&mut self, g: &[F]) {
        if !self.requires_grad {
            return;
        }
        assert_eq!(g.len(), self.values.len(), "gradient length");
        let slot = self.grad.get_or_insert_with(|| vec![F::zero(); g.len()]);
        for (s, &x) in slot.iter_mut().zip(g) {
            *s = *s + x;
        }
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1..].iter().product()
    }

    /// Converts the element type, dropping gradient state.
    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            values: self.values.iter().map(|v| G::of(v.f64())).collect(),
            requires_grad: self.requires_grad,
            grad: None,
            node: None,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_values() {
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f64>::new(vec![2, 0], vec![]).is_err());
        assert_eq!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 6]).unwrap().len(), 6);
    }

    #[test]
    fn frozen_tensor_never_receives_grad() {
        let mut t = Tensor::<f64>::zeros(&[2]);
        t.accumulate_grad(&[1.0, 2.0]);
        t.zero_grad();
        assert!(t.grad().is_none());
        let mut p = Tensor::<f64>::zeros(&[2]).param();
        p.accumulate_grad(&[1.0, 2.0]);
        p.accumulate_grad(&[1.0, 2.0]);
        assert_eq!(p.grad().unwrap(), &[2.0, 4.0]);
    }
}
