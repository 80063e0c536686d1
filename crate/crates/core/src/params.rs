//! Named trainable tensors and their binding to a tape.

use alloc::string::String;
use alloc::vec::Vec;

use crate::adam::ParamRef;
use crate::{Scalar, Tape, Tensor};

/// Anything that owns named trainable tensors.
pub trait Parameters<F: Scalar> {
    /// Appends `(name, tensor)` pairs in a fixed order.
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<F>)>);

    fn named_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor<F>)> {
        let mut out = Vec::new();
        self.visit_mut(prefix, &mut out);
        out
    }

    fn zero_grad(&mut self) {
        for (_, t) in self.named_mut("") {
            t.zero_grad();
        }
    }

    fn param_count(&mut self) -> usize {
        self.named_mut("").iter().map(|(_, t)| t.len()).sum()
    }
}

impl<F: Scalar, P: Parameters<F>> Parameters<F> for Vec<P> {
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<F>)>) {
        for (i, p) in self.iter_mut().enumerate() {
            p.visit_mut(&alloc::format!("{prefix}{i}."), out);
        }
    }
}

/// Wraps every tensor of `params` into group `group`.
pub fn group<'a, F: Scalar, P: Parameters<F> + ?Sized>(params: &'a mut P, prefix: &str, group: usize) -> Vec<ParamRef<'a, F>> {
    let mut out = Vec::new();
    params.visit_mut(prefix, &mut out);
    out.into_iter()
        .map(|(name, tensor)| ParamRef { name, group, tensor })
        .collect()
}


/// Records every tensor of `params` on `tape` as a leaf.
pub fn bind_all<F: Scalar, P: Parameters<F> + ?Sized>(params: &mut P, tape: &mut Tape<F>) {
    for (_, t) in params.named_mut("") {
        tape.bind(t);
    }
}

/// Accumulates the tape's gradients into every bound tensor of `params`.
pub fn collect_all<F: Scalar, P: Parameters<F> + ?Sized>(params: &mut P, tape: &Tape<F>) {
    for (_, t) in params.named_mut("") {
        tape.collect_grad(t);
    }
}
