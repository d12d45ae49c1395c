//! A small reverse-mode autodiff tensor.
//!
//! Tensors are immutable, reference counted, and record the operation that
//! produced them. Calling [`Tensor::backward`] on a scalar walks that graph
//! and returns the gradients of every leaf created with [`Tensor::var`].

mod backward;
mod conv;
mod ops;

use std::cell::Cell;
use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use num_traits::Float;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub use backward::Gradients;
pub use conv::Conv2dConfig;

use crate::error::{Error, Result};

/// Floating point element type of a [`Tensor`].
pub trait Real:
    Float + Default + fmt::Debug + fmt::Display + Send + Sync + std::iter::Sum + 'static
{
    /// `c = alpha * a·b + beta * c` with arbitrary row/column strides.
    ///
    /// # Safety
    /// Same contract as `matrixmultiply::sgemm`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn of(v: f64) -> Self;

    fn as_f64(self) -> f64;
}

impl Real for f32 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn of(v: f64) -> f32 {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn of(v: f64) -> f64 {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }
}

static NEXT_ID: AtomicUsize = AtomicUsize::new(1);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` without recording any operations for backpropagation.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(prev);
    f()
}

fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum Unary {
    Sigmoid,
    Elu,
    LeakyRelu(f64),
    Relu,
    Abs,
    Square,
    Exp,
}

pub(crate) enum Op<T: Real> {
    Add(Tensor<T>, Tensor<T>),
    Sub(Tensor<T>, Tensor<T>),
    Mul(Tensor<T>, Tensor<T>),
    Affine(Tensor<T>, f64),
    DivScalar(Tensor<T>, Tensor<T>),
    Unary(Tensor<T>, Unary),
    SumAll(Tensor<T>),
    Conv2d {
        input: Tensor<T>,
        weight: Tensor<T>,
        bias: Option<Tensor<T>>,
        config: Conv2dConfig,
    },
    Cat(Vec<Tensor<T>>, usize),
    Narrow {
        input: Tensor<T>,
        dim: usize,
        start: usize,
    },
    ExpandChannels(Tensor<T>),
    PixelShuffle(Tensor<T>, usize),
    MaxPool2d(Tensor<T>, Vec<usize>),
    Gram(Tensor<T>),
    GatedAct(Tensor<T>),
    Reshape(Tensor<T>),
}

struct Inner<T: Real> {
    id: usize,
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
    op: Option<Op<T>>,
    requires_grad: bool,
}

/// An n-dimensional array of `T` that remembers how it was computed.
pub struct Tensor<T: Real = f32>(Arc<Inner<T>>);

impl<T: Real> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor(Arc::clone(&self.0))
    }
}

impl<T: Real> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl<T: Real> Tensor<T> {
    fn build(data: Vec<T>, shape: Vec<usize>, op: Option<Op<T>>, requires_grad: bool) -> Self {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        Tensor(Arc::new(Inner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data: Arc::new(data),
            op,
            requires_grad,
        }))
    }

    /// Result of an operation on `inputs`; records the op only when needed.
    pub(crate) fn from_op(data: Vec<T>, shape: Vec<usize>, op: Op<T>, inputs: &[&Tensor<T>]) -> Self {
        let track = grad_enabled() && inputs.iter().any(|t| t.requires_grad());
        if track {
            Self::build(data, shape, Some(op), true)
        } else {
            Self::build(data, shape, None, false)
        }
    }

    /// A constant tensor (no gradient is tracked).
    pub fn from_vec(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        check_len(data.len(), shape)?;
        Ok(Self::build(data, shape.to_vec(), None, false))
    }

    /// A trainable leaf tensor.
    pub fn var(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        check_len(data.len(), shape)?;
        Ok(Self::build(data, shape.to_vec(), None, true))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self::build(vec![value; n], shape.to_vec(), None, false)
    }

    /// Constant tensor with standard normal entries drawn from `rng`.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let v: f64 = StandardNormal.sample(rng);
                T::of(v)
            })
            .collect();
        Self::build(data, shape.to_vec(), None, false)
    }

    /// Constant tensor with entries uniform in `[lo, hi)`.
    pub fn rand_uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| T::of(rng.random_range(lo..hi)))
            .collect();
        Self::build(data, shape.to_vec(), None, false)
    }

    pub fn id(&self) -> usize {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.0.data.as_ref().clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub(crate) fn op(&self) -> Option<&Op<T>> {
        self.0.op.as_ref()
    }

    /// Shares the data but drops the history; the result is a constant.
    pub fn detach(&self) -> Self {
        Tensor(Arc::new(Inner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape: self.0.shape.clone(),
            data: Arc::clone(&self.0.data),
            op: None,
            requires_grad: false,
        }))
    }

    /// Shares the data as a fresh trainable leaf.
    pub fn to_var(&self) -> Self {
        Tensor(Arc::new(Inner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape: self.0.shape.clone(),
            data: Arc::clone(&self.0.data),
            op: None,
            requires_grad: true,
        }))
    }

    /// Converts the element type; the result is a constant.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        let data = self.data().iter().map(|v| U::of(v.as_f64())).collect();
        Tensor::build(data, self.0.shape.clone(), None, false)
    }

    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match *self.shape() {
            [n, c, h, w] => Ok((n, c, h, w)),
            ref s => Err(Error::dim(format!("expected a rank-4 tensor, got shape {s:?}"))),
        }
    }

    /// The single value of a one-element tensor.
    pub fn scalar(&self) -> Result<T> {
        if self.numel() != 1 {
            return Err(Error::dim(format!(
                "expected a single element, got shape {:?}",
                self.shape()
            )));
        }
        Ok(self.data()[0])
    }

    /// Value at a multi-index; used by tests and diagnostics.
    pub fn at(&self, index: &[usize]) -> T {
        let mut flat = 0;
        for (i, (&ix, &dim)) in index.iter().zip(self.shape()).enumerate() {
            assert!(ix < dim, "index {ix} out of range for axis {i} of size {dim}");
            flat = flat * dim + ix;
        }
        self.data()[flat]
    }

    pub fn all_finite(&self) -> bool {
        self.data().iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        assert_eq!(self.shape(), other.shape(), "shape mismatch in max_abs_diff");
        self.data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }
}

fn check_len(len: usize, shape: &[usize]) -> Result<()> {
    let expected: usize = shape.iter().product();
    if len != expected {
        return Err(Error::dim(format!(
            "data length {len} does not match shape {shape:?} ({expected} elements)"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests;
