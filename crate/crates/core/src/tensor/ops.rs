use super::conv::{self, Conv2dConfig, Geometry};
use super::{Op, Real, Tensor, Unary};
use crate::error::{Error, Result};

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn apply_unary<T: Real>(kind: Unary, x: T) -> T {
    match kind {
        Unary::Sigmoid => sigmoid(x),
        Unary::Elu => {
            if x > T::zero() {
                x
            } else {
                x.exp_m1()
            }
        }
        Unary::LeakyRelu(slope) => {
            if x > T::zero() {
                x
            } else {
                x * T::of(slope)
            }
        }
        Unary::Relu => x.max(T::zero()),
        Unary::Abs => x.abs(),
        Unary::Square => x * x,
        Unary::Exp => x.exp(),
    }
}

/// `(outer, inner)` products around axis `dim`.
pub(crate) fn split_at_dim(shape: &[usize], dim: usize) -> (usize, usize) {
    (
        shape[..dim].iter().product(),
        shape[dim + 1..].iter().product(),
    )
}

impl<T: Real> Tensor<T> {
    fn same_shape(&self, other: &Tensor<T>, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::dim(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    fn zip_with(&self, other: &Tensor<T>, f: impl Fn(T, T) -> T) -> Vec<T> {
        self.data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| f(a, b))
            .collect()
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.same_shape(other, "add")?;
        let data = self.zip_with(other, |a, b| a + b);
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            Op::Add(self.clone(), other.clone()),
            &[self, other],
        ))
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.same_shape(other, "sub")?;
        let data = self.zip_with(other, |a, b| a - b);
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            Op::Sub(self.clone(), other.clone()),
            &[self, other],
        ))
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.same_shape(other, "mul")?;
        let data = self.zip_with(other, |a, b| a * b);
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            Op::Mul(self.clone(), other.clone()),
            &[self, other],
        ))
    }

    /// `scale · x + shift`.
    pub fn affine(&self, scale: f64, shift: f64) -> Tensor<T> {
        let (a, b) = (T::of(scale), T::of(shift));
        let data = self.data().iter().map(|&v| v * a + b).collect();
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            Op::Affine(self.clone(), scale),
            &[self],
        )
    }

    pub fn scale(&self, s: f64) -> Tensor<T> {
        self.affine(s, 0.0)
    }

    pub fn neg(&self) -> Tensor<T> {
        self.affine(-1.0, 0.0)
    }

    /// `1 - x`.
    pub fn one_minus(&self) -> Tensor<T> {
        self.affine(-1.0, 1.0)
    }

    /// Divides every element by the single value held in `divisor`.
    pub fn div_scalar(&self, divisor: &Tensor<T>) -> Result<Tensor<T>> {
        let s = divisor.scalar()?;
        let data = self.data().iter().map(|&v| v / s).collect();
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            Op::DivScalar(self.clone(), divisor.clone()),
            &[self, divisor],
        ))
    }

    fn unary(&self, kind: Unary) -> Tensor<T> {
        let data = self.data().iter().map(|&v| apply_unary(kind, v)).collect();
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            Op::Unary(self.clone(), kind),
            &[self],
        )
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        self.unary(Unary::Sigmoid)
    }

    /// ELU with `alpha = 1`.
    pub fn elu(&self) -> Tensor<T> {
        self.unary(Unary::Elu)
    }

    pub fn leaky_relu(&self, slope: f64) -> Tensor<T> {
        self.unary(Unary::LeakyRelu(slope))
    }

    pub fn relu(&self) -> Tensor<T> {
        self.unary(Unary::Relu)
    }

    pub fn abs(&self) -> Tensor<T> {
        self.unary(Unary::Abs)
    }

    pub fn square(&self) -> Tensor<T> {
        self.unary(Unary::Square)
    }

    pub fn exp(&self) -> Tensor<T> {
        self.unary(Unary::Exp)
    }

    pub fn sum_all(&self) -> Tensor<T> {
        let s: T = self.data().iter().copied().sum();
        Tensor::from_op(vec![s], vec![], Op::SumAll(self.clone()), &[self])
    }

    pub fn mean_all(&self) -> Tensor<T> {
        let n = self.numel().max(1);
        self.sum_all().scale(1.0 / n as f64)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::dim(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape()
            )));
        }
        Ok(Tensor::from_op(
            self.to_vec(),
            shape.to_vec(),
            Op::Reshape(self.clone()),
            &[self],
        ))
    }

    /// Concatenates along axis `dim`; all other extents must agree.
    pub fn cat(parts: &[&Tensor<T>], dim: usize) -> Result<Tensor<T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("cat of zero tensors"))?;
        let rank = first.rank();
        if dim >= rank {
            return Err(Error::dim(format!("cat axis {dim} out of range for rank {rank}")));
        }
        for p in parts {
            let ok = p.rank() == rank
                && p
                    .shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(i, (a, b))| i == dim || a == b);
            if !ok {
                return Err(Error::dim(format!(
                    "cat: shape {:?} incompatible with {:?} along axis {dim}",
                    p.shape(),
                    first.shape()
                )));
            }
        }
        let (outer, inner) = split_at_dim(first.shape(), dim);
        let total: usize = parts.iter().map(|p| p.shape()[dim]).sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape()[dim] * inner;
                data.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[dim] = total;
        Ok(Tensor::from_op(
            data,
            shape,
            Op::Cat(parts.iter().map(|&p| p.clone()).collect(), dim),
            parts,
        ))
    }

    /// `ELU(a) ⊙ sigmoid(b)` where `a` and `b` are the first and second channel
    /// halves of a `[N, 2C, H, W]` tensor.
    pub fn gated_activation(&self) -> Result<Tensor<T>> {
        let (n, c2, h, w) = self.dims4()?;
        if c2 % 2 != 0 {
            return Err(Error::dim(format!(
                "gated activation needs an even channel count, got {c2}"
            )));
        }
        let c = c2 / 2;
        let plane = c * h * w;
        let src = self.data();
        let mut out = Vec::with_capacity(n * plane);
        for b in 0..n {
            let base = b * 2 * plane;
            let feat = &src[base..base + plane];
            let gate = &src[base + plane..base + 2 * plane];
            out.extend(
                feat.iter()
                    .zip(gate)
                    .map(|(&f, &g)| apply_unary(Unary::Elu, f) * sigmoid(g)),
            );
        }
        Ok(Tensor::from_op(
            out,
            vec![n, c, h, w],
            Op::GatedAct(self.clone()),
            &[self],
        ))
    }

    /// Slice `start..start + len` along axis `dim`.
    pub fn narrow(&self, dim: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        if dim >= self.rank() || start + len > self.shape()[dim] {
            return Err(Error::dim(format!(
                "narrow({dim}, {start}, {len}) out of range for shape {:?}",
                self.shape()
            )));
        }
        let (outer, inner) = split_at_dim(self.shape(), dim);
        let extent = self.shape()[dim];
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            data.extend_from_slice(&self.data()[base..base + len * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[dim] = len;
        Ok(Tensor::from_op(
            data,
            shape,
            Op::Narrow {
                input: self.clone(),
                dim,
                start,
            },
            &[self],
        ))
    }

    /// Repeats a `[N, 1, H, W]` tensor along the channel axis.
    pub fn expand_channels(&self, channels: usize) -> Result<Tensor<T>> {
        let (n, c, h, w) = self.dims4()?;
        if c != 1 {
            return Err(Error::dim(format!(
                "expand_channels needs a single channel, got {c}"
            )));
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * channels * plane);
        for b in 0..n {
            let src = &self.data()[b * plane..(b + 1) * plane];
            for _ in 0..channels {
                data.extend_from_slice(src);
            }
        }
        Ok(Tensor::from_op(
            data,
            vec![n, channels, h, w],
            Op::ExpandChannels(self.clone()),
            &[self],
        ))
    }

    /// 2-D convolution of `[N, C_in, H, W]` by `[C_out, C_in, kh, kw]`.
    pub fn conv2d(
        &self,
        weight: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        config: Conv2dConfig,
    ) -> Result<Tensor<T>> {
        let (n, c_in, h, w) = self.dims4()?;
        let (c_out, wc_in, kh, kw) = weight.dims4()?;
        if wc_in != c_in {
            return Err(Error::dim(format!(
                "conv2d: input has {c_in} channels but kernel expects {wc_in}"
            )));
        }
        if let Some(b) = bias {
            if b.shape() != [c_out] {
                return Err(Error::dim(format!(
                    "conv2d: bias shape {:?} does not match {c_out} output channels",
                    b.shape()
                )));
            }
        }
        let (Some(h_out), Some(w_out)) = (config.output_len(h, kh), config.output_len(w, kw))
        else {
            return Err(Error::dim(format!(
                "conv2d: {h}x{w} input is smaller than the {kh}x{kw} kernel extent (dilation {})",
                config.dilation
            )));
        };
        let g = Geometry {
            c_in,
            h,
            w,
            kh,
            kw,
            h_out,
            w_out,
            cfg: config,
        };
        let data = conv::forward(self.data(), n, weight.data(), c_out, bias.map(|b| b.data()), &g);
        let mut inputs = vec![self, weight];
        if let Some(b) = bias {
            inputs.push(b);
        }
        Ok(Tensor::from_op(
            data,
            vec![n, c_out, h_out, w_out],
            Op::Conv2d {
                input: self.clone(),
                weight: weight.clone(),
                bias: bias.cloned(),
                config,
            },
            &inputs,
        ))
    }

    /// Channel-to-space rearrangement:
    /// `out[n, c, r·h + dy, r·w + dx] = in[n, r²·c + r·dy + dx, h, w]`.
    pub fn pixel_shuffle(&self, factor: usize) -> Result<Tensor<T>> {
        let (n, c, h, w) = self.dims4()?;
        let rr = factor * factor;
        if factor == 0 || c % rr != 0 {
            return Err(Error::dim(format!(
                "pixel_shuffle: {c} channels not divisible by {rr}"
            )));
        }
        let c_out = c / rr;
        let (ho, wo) = (h * factor, w * factor);
        let mut data = vec![T::zero(); self.numel()];
        let src = self.data();
        for b in 0..n {
            for co in 0..c_out {
                for dy in 0..factor {
                    for dx in 0..factor {
                        let ci = co * rr + dy * factor + dx;
                        let plane = &src[(b * c + ci) * h * w..(b * c + ci + 1) * h * w];
                        let dst_base = (b * c_out + co) * ho * wo;
                        for y in 0..h {
                            let row = dst_base + (y * factor + dy) * wo + dx;
                            for x in 0..w {
                                data[row + x * factor] = plane[y * w + x];
                            }
                        }
                    }
                }
            }
        }
        Ok(Tensor::from_op(
            data,
            vec![n, c_out, ho, wo],
            Op::PixelShuffle(self.clone(), factor),
            &[self],
        ))
    }

    /// 2×2 max pooling with stride 2 (odd trailing rows/columns dropped).
    pub fn max_pool2x2(&self) -> Result<Tensor<T>> {
        let (n, c, h, w) = self.dims4()?;
        let (ho, wo) = (h / 2, w / 2);
        if ho == 0 || wo == 0 {
            return Err(Error::dim(format!("max_pool2x2 on a {h}x{w} map")));
        }
        let src = self.data();
        let mut data = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for p in 0..n * c {
            let base = p * h * w;
            for y in 0..ho {
                for x in 0..wo {
                    let mut best = base + 2 * y * w + 2 * x;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * y + dy) * w + 2 * x + dx;
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                    data.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        Ok(Tensor::from_op(
            data,
            vec![n, c, ho, wo],
            Op::MaxPool2d(self.clone(), argmax),
            &[self],
        ))
    }

    /// Per-sample Gram matrix `F·Fᵀ / (C·H·W)` of a `[N, C, H, W]` map, shape `[N, C, C]`.
    pub fn gram(&self) -> Result<Tensor<T>> {
        let (n, c, h, w) = self.dims4()?;
        let hw = h * w;
        let norm = T::of(1.0 / (c * hw) as f64);
        let mut data = vec![T::zero(); n * c * c];
        for b in 0..n {
            let f = &self.data()[b * c * hw..(b + 1) * c * hw];
            let g = &mut data[b * c * c..(b + 1) * c * c];
            conv::matmul(c, hw, c, f, false, f, true, g, false);
            for v in g.iter_mut() {
                *v = *v * norm;
            }
        }
        Ok(Tensor::from_op(
            data,
            vec![n, c, c],
            Op::Gram(self.clone()),
            &[self],
        ))
    }
}
