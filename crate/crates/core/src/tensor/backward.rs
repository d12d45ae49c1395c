use std::collections::{HashMap, HashSet};

use super::conv::{self, Geometry};
use super::ops::split_at_dim;
use super::{Op, Real, Tensor, Unary};
use crate::error::{Error, Result};

/// Gradients of a scalar with respect to the trainable leaves it depends on.
pub struct Gradients<T: Real> {
    grads: HashMap<usize, Vec<T>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient for `leaf`, shaped like it; `None` if the loss does not depend on it.
    pub fn get(&self, leaf: &Tensor<T>) -> Option<Tensor<T>> {
        self.grads
            .get(&leaf.id())
            .map(|g| Tensor::build(g.clone(), leaf.shape().to_vec(), None, false))
    }

    pub fn get_slice(&self, leaf: &Tensor<T>) -> Option<&[T]> {
        self.grads.get(&leaf.id()).map(|g| g.as_slice())
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

fn accumulate<T: Real>(store: &mut HashMap<usize, Vec<T>>, t: &Tensor<T>, g: Vec<T>) {
    if !t.requires_grad() {
        return;
    }
    match store.get_mut(&t.id()) {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(g) {
                *a = *a + b;
            }
        }
        None => {
            store.insert(t.id(), g);
        }
    }
}

fn inputs_of<T: Real>(op: &Op<T>) -> Vec<&Tensor<T>> {
    match op {
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::DivScalar(a, b) => vec![a, b],
        Op::Affine(a, _)
        | Op::Unary(a, _)
        | Op::SumAll(a)
        | Op::ExpandChannels(a)
        | Op::PixelShuffle(a, _)
        | Op::MaxPool2d(a, _)
        | Op::Gram(a)
        | Op::GatedAct(a)
        | Op::Reshape(a)
        | Op::Narrow { input: a, .. } => vec![a],
        Op::Conv2d {
            input,
            weight,
            bias,
            ..
        } => {
            let mut v = vec![input, weight];
            if let Some(b) = bias {
                v.push(b);
            }
            v
        }
        Op::Cat(parts, _) => parts.iter().collect(),
    }
}

impl<T: Real> Tensor<T> {
    /// Reverse-mode differentiation of a single-element tensor.
    pub fn backward(&self) -> Result<Gradients<T>> {
        if self.numel() != 1 {
            return Err(Error::dim(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape()
            )));
        }
        let order = self.topological_order();
        let mut store: HashMap<usize, Vec<T>> = HashMap::new();
        let mut leaves = HashMap::new();
        if self.requires_grad() {
            store.insert(self.id(), vec![T::one()]);
        }
        for node in order.iter().rev() {
            let Some(grad) = store.remove(&node.id()) else {
                continue;
            };
            match node.op() {
                None => {
                    leaves.insert(node.id(), grad);
                }
                Some(op) => propagate(node, op, &grad, &mut store),
            }
        }
        Ok(Gradients { grads: leaves })
    }

    fn topological_order(&self) -> Vec<Tensor<T>> {
        let mut order = Vec::new();
        let mut seen = HashSet::new();
        let mut stack: Vec<(Tensor<T>, bool)> = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if !node.requires_grad() || !seen.insert(node.id()) {
                continue;
            }
            stack.push((node.clone(), true));
            if let Some(op) = node.op() {
                for input in inputs_of(op) {
                    if input.requires_grad() && !seen.contains(&input.id()) {
                        stack.push((input.clone(), false));
                    }
                }
            }
        }
        order
    }
}

fn propagate<T: Real>(node: &Tensor<T>, op: &Op<T>, grad: &[T], store: &mut HashMap<usize, Vec<T>>) {
    match op {
        Op::Add(a, b) => {
            accumulate(store, a, grad.to_vec());
            accumulate(store, b, grad.to_vec());
        }
        Op::Sub(a, b) => {
            accumulate(store, a, grad.to_vec());
            accumulate(store, b, grad.iter().map(|&g| -g).collect());
        }
        Op::Mul(a, b) => {
            if a.requires_grad() {
                accumulate(store, a, grad.iter().zip(b.data()).map(|(&g, &y)| g * y).collect());
            }
            if b.requires_grad() {
                accumulate(store, b, grad.iter().zip(a.data()).map(|(&g, &x)| g * x).collect());
            }
        }
        Op::Affine(a, scale) => {
            let s = T::of(*scale);
            accumulate(store, a, grad.iter().map(|&g| g * s).collect());
        }
        Op::DivScalar(x, s) => {
            let sv = s.data()[0];
            if x.requires_grad() {
                accumulate(store, x, grad.iter().map(|&g| g / sv).collect());
            }
            if s.requires_grad() {
                let dot: T = grad.iter().zip(x.data()).map(|(&g, &v)| g * v).sum();
                accumulate(store, s, vec![-dot / (sv * sv)]);
            }
        }
        Op::Unary(x, kind) => {
            let xs = x.data();
            let ys = node.data();
            let g: Vec<T> = grad
                .iter()
                .zip(xs.iter().zip(ys))
                .map(|(&g, (&x, &y))| g * unary_derivative(*kind, x, y))
                .collect();
            accumulate(store, x, g);
        }
        Op::SumAll(x) => {
            accumulate(store, x, vec![grad[0]; x.numel()]);
        }
        Op::Reshape(x) => accumulate(store, x, grad.to_vec()),
        Op::Conv2d {
            input,
            weight,
            bias,
            config,
        } => {
            let (n, c_in, h, w) = input.dims4().expect("conv input is rank 4");
            let (c_out, _, kh, kw) = weight.dims4().expect("conv weight is rank 4");
            let (_, _, h_out, w_out) = node.dims4().expect("conv output is rank 4");
            let g = Geometry {
                c_in,
                h,
                w,
                kh,
                kw,
                h_out,
                w_out,
                cfg: *config,
            };
            let grads = conv::backward(
                input.data(),
                n,
                weight.data(),
                c_out,
                grad,
                &g,
                input.requires_grad(),
                weight.requires_grad(),
                bias.as_ref().is_some_and(|b| b.requires_grad()),
            );
            if let Some(gi) = grads.input {
                accumulate(store, input, gi);
            }
            if let Some(gw) = grads.weight {
                accumulate(store, weight, gw);
            }
            if let (Some(b), Some(gb)) = (bias, grads.bias) {
                accumulate(store, b, gb);
            }
        }
        Op::Cat(parts, dim) => {
            let (outer, inner) = split_at_dim(node.shape(), *dim);
            let total = node.shape()[*dim];
            let mut offset = 0;
            for p in parts {
                let extent = p.shape()[*dim];
                if p.requires_grad() {
                    let mut g = Vec::with_capacity(p.numel());
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        g.extend_from_slice(&grad[base..base + extent * inner]);
                    }
                    accumulate(store, p, g);
                }
                offset += extent;
            }
        }
        Op::Narrow { input, dim, start } => {
            let (outer, inner) = split_at_dim(input.shape(), *dim);
            let extent = input.shape()[*dim];
            let len = node.shape()[*dim];
            let mut g = vec![T::zero(); input.numel()];
            for o in 0..outer {
                let dst = (o * extent + start) * inner;
                let src = o * len * inner;
                g[dst..dst + len * inner].copy_from_slice(&grad[src..src + len * inner]);
            }
            accumulate(store, input, g);
        }
        Op::ExpandChannels(x) => {
            let (n, _, h, w) = x.dims4().expect("rank 4");
            let channels = node.shape()[1];
            let plane = h * w;
            let mut g = vec![T::zero(); x.numel()];
            for b in 0..n {
                for c in 0..channels {
                    let src = &grad[(b * channels + c) * plane..(b * channels + c + 1) * plane];
                    for (acc, &v) in g[b * plane..(b + 1) * plane].iter_mut().zip(src) {
                        *acc = *acc + v;
                    }
                }
            }
            accumulate(store, x, g);
        }
        Op::PixelShuffle(x, factor) => {
            let (n, c, h, w) = x.dims4().expect("rank 4");
            let r = *factor;
            let c_out = c / (r * r);
            let (ho, wo) = (h * r, w * r);
            let mut g = vec![T::zero(); x.numel()];
            for b in 0..n {
                for co in 0..c_out {
                    for dy in 0..r {
                        for dx in 0..r {
                            let ci = co * r * r + dy * r + dx;
                            let src_base = (b * c_out + co) * ho * wo;
                            let dst_base = (b * c + ci) * h * w;
                            for y in 0..h {
                                for xx in 0..w {
                                    g[dst_base + y * w + xx] =
                                        grad[src_base + (y * r + dy) * wo + xx * r + dx];
                                }
                            }
                        }
                    }
                }
            }
            accumulate(store, x, g);
        }
        Op::MaxPool2d(x, argmax) => {
            let mut g = vec![T::zero(); x.numel()];
            for (&idx, &gv) in argmax.iter().zip(grad) {
                g[idx] = g[idx] + gv;
            }
            accumulate(store, x, g);
        }
        Op::GatedAct(x) => {
            let (n, c2, h, w) = x.dims4().expect("gated input is 4-d");
            let plane = c2 / 2 * h * w;
            let src = x.data();
            let mut g = vec![T::zero(); src.len()];
            for b in 0..n {
                let base = b * 2 * plane;
                let go = &grad[b * plane..(b + 1) * plane];
                for i in 0..plane {
                    let f = src[base + i];
                    let s = super::ops::sigmoid(src[base + plane + i]);
                    let (e, de) = if f > T::zero() {
                        (f, T::one())
                    } else {
                        let e = f.exp_m1();
                        (e, e + T::one())
                    };
                    g[base + i] = go[i] * de * s;
                    g[base + plane + i] = go[i] * e * s * (T::one() - s);
                }
            }
            accumulate(store, x, g);
        }
        Op::Gram(x) => {
            let (n, c, h, w) = x.dims4().expect("rank 4");
            let hw = h * w;
            let norm = T::of(1.0 / (c * hw) as f64);
            let mut g = vec![T::zero(); x.numel()];
            let mut sym = vec![T::zero(); c * c];
            for b in 0..n {
                let gg = &grad[b * c * c..(b + 1) * c * c];
                for i in 0..c {
                    for j in 0..c {
                        sym[i * c + j] = (gg[i * c + j] + gg[j * c + i]) * norm;
                    }
                }
                let f = &x.data()[b * c * hw..(b + 1) * c * hw];
                conv::matmul(c, c, hw, &sym, false, f, false, &mut g[b * c * hw..(b + 1) * c * hw], false);
            }
            accumulate(store, x, g);
        }
    }
}

fn unary_derivative<T: Real>(kind: Unary, x: T, y: T) -> T {
    match kind {
        Unary::Sigmoid => y * (T::one() - y),
        Unary::Elu => {
            if x > T::zero() {
                T::one()
            } else {
                y + T::one()
            }
        }
        Unary::LeakyRelu(slope) => {
            if x > T::zero() {
                T::one()
            } else {
                T::of(slope)
            }
        }
        Unary::Relu => {
            if x > T::zero() {
                T::one()
            } else {
                T::zero()
            }
        }
        Unary::Abs => {
            if x > T::zero() {
                T::one()
            } else if x < T::zero() {
                -T::one()
            } else {
                T::zero()
            }
        }
        Unary::Square => x + x,
        Unary::Exp => y,
    }
}
