//! Named parameter traversal and initialisation helpers.

use rand::Rng;

use crate::tensor::{Real, Tensor};

/// Anything that owns trainable tensors addressable by a dotted name.
pub trait Parameterized<T: Real> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>));

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>));

    fn named_params(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, t| out.push((name, t.clone())));
        out
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.numel());
        n
    }

    /// A copy whose tensors are constants sharing the same storage.
    fn detached(&self) -> Self
    where
        Self: Clone + Sized,
    {
        let mut copy = self.clone();
        copy.visit_mut("", &mut |_, t| *t = t.detach());
        copy
    }

    /// A copy whose tensors are fresh trainable leaves sharing the same storage.
    fn trainable(&self) -> Self
    where
        Self: Clone + Sized,
    {
        let mut copy = self.clone();
        copy.visit_mut("", &mut |_, t| *t = t.to_var());
        copy
    }

    fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit("", &mut |_, t| ok &= t.all_finite());
        ok
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Uniform `±1/sqrt(fan_in)` initialisation of a `[c_out, c_in, k, k]` kernel
/// and its bias; the result is trainable.
pub(crate) fn init_conv<T: Real, R: Rng + ?Sized>(
    c_out: usize,
    c_in: usize,
    k: usize,
    rng: &mut R,
) -> (Tensor<T>, Tensor<T>) {
    let fan_in = (c_in * k * k) as f64;
    let bound = 1.0 / fan_in.sqrt();
    let w = Tensor::rand_uniform(&[c_out, c_in, k, k], -bound, bound, rng).to_var();
    let b = Tensor::rand_uniform(&[c_out], -bound, bound, rng).to_var();
    (w, b)
}
