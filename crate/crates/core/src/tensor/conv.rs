//! im2col based 2-D convolution kernels.

use super::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dConfig {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Default for Conv2dConfig {
    fn default() -> Self {
        Conv2dConfig {
            stride: 1,
            padding: 0,
            dilation: 1,
        }
    }
}

impl Conv2dConfig {
    /// Zero padding that keeps the spatial size for stride 1.
    pub fn same(kernel: usize, dilation: usize, stride: usize) -> Self {
        Conv2dConfig {
            stride,
            padding: dilation * (kernel - 1) / 2,
            dilation,
        }
    }

    /// Output extent along one axis, or `None` when the kernel does not fit.
    pub fn output_len(&self, input: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        if padded < span || self.stride == 0 {
            return None;
        }
        Some((padded - span) / self.stride + 1)
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Geometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub h_out: usize,
    pub w_out: usize,
    pub cfg: Conv2dConfig,
}

impl Geometry {
    pub fn rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    pub fn cols(&self) -> usize {
        self.h_out * self.w_out
    }

    /// Input row index for output row `oy` and kernel tap `ky`, if inside the image.
    #[inline]
    fn src(&self, o: usize, k: usize, len: usize) -> Option<usize> {
        let pos = (o * self.cfg.stride + k * self.cfg.dilation) as isize - self.cfg.padding as isize;
        (pos >= 0 && (pos as usize) < len).then_some(pos as usize)
    }
}

/// Output columns `[lo, hi)` whose source column stays inside `[0, len)` for tap `k`.
#[inline]
fn valid_range(g: &Geometry, k: usize, len: usize, out_len: usize) -> (usize, usize) {
    let off = (k * g.cfg.dilation) as isize - g.cfg.padding as isize;
    let s = g.cfg.stride as isize;
    // smallest o with o*s + off >= 0
    let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
    // largest o with o*s + off <= len - 1
    let last = len as isize - 1 - off;
    let hi = if last < 0 { 0 } else { last / s + 1 };
    let lo = (lo as usize).min(out_len);
    let hi = (hi.max(0) as usize).min(out_len);
    (lo, hi.max(lo))
}

/// Unfolds one image `[C, H, W]` into `cols` of shape `[C·kh·kw, H_out·W_out]`.
pub(crate) fn im2col<T: Real>(image: &[T], g: &Geometry, cols: &mut [T]) {
    let ncols = g.cols();
    let stride = g.cfg.stride;
    for c in 0..g.c_in {
        let plane = &image[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                let (x_lo, x_hi) = valid_range(g, kx, g.w, g.w_out);
                let x_off = (kx * g.cfg.dilation) as isize - g.cfg.padding as isize;
                for oy in 0..g.h_out {
                    let out_row = &mut dst[oy * g.w_out..(oy + 1) * g.w_out];
                    let Some(iy) = g.src(oy, ky, g.h) else {
                        out_row.fill(T::zero());
                        continue;
                    };
                    let src_row = &plane[iy * g.w..(iy + 1) * g.w];
                    out_row[..x_lo].fill(T::zero());
                    out_row[x_hi..].fill(T::zero());
                    if x_hi > x_lo {
                        let start = (x_lo * stride) as isize + x_off;
                        let start = start as usize;
                        if stride == 1 {
                            out_row[x_lo..x_hi].copy_from_slice(&src_row[start..start + (x_hi - x_lo)]);
                        } else {
                            for (i, v) in out_row[x_lo..x_hi].iter_mut().enumerate() {
                                *v = src_row[start + i * stride];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters `cols` back into `image` (accumulating).
pub(crate) fn col2im<T: Real>(cols: &[T], g: &Geometry, image: &mut [T]) {
    let ncols = g.cols();
    let stride = g.cfg.stride;
    for c in 0..g.c_in {
        let plane = &mut image[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * ncols..(row + 1) * ncols];
                let (x_lo, x_hi) = valid_range(g, kx, g.w, g.w_out);
                if x_hi <= x_lo {
                    continue;
                }
                let x_off = (kx * g.cfg.dilation) as isize - g.cfg.padding as isize;
                let start = ((x_lo * stride) as isize + x_off) as usize;
                for oy in 0..g.h_out {
                    let Some(iy) = g.src(oy, ky, g.h) else { continue };
                    let in_row = &src[oy * g.w_out + x_lo..oy * g.w_out + x_hi];
                    let dst_row = &mut plane[iy * g.w..(iy + 1) * g.w];
                    if stride == 1 {
                        for (d, &v) in dst_row[start..start + in_row.len()].iter_mut().zip(in_row) {
                            *d = *d + v;
                        }
                    } else {
                        for (i, &v) in in_row.iter().enumerate() {
                            let d = &mut dst_row[start + i * stride];
                            *d = *d + v;
                        }
                    }
                }
            }
        }
    }
}

/// `c[m,n] (+)= a[m,k] · b[k,n]` on row-major slices, optionally transposing operands.
#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_t: bool,
    b: &[T],
    b_t: bool,
    c: &mut [T],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: slice lengths are checked above and the strides describe
    // exactly those row-major buffers.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn forward<T: Real>(
    input: &[T],
    n: usize,
    weight: &[T],
    c_out: usize,
    bias: Option<&[T]>,
    g: &Geometry,
) -> Vec<T> {
    let in_len = g.c_in * g.h * g.w;
    let out_len = c_out * g.cols();
    let mut out = vec![T::zero(); n * out_len];
    let mut cols = vec![T::zero(); g.rows() * g.cols()];
    for b in 0..n {
        im2col(&input[b * in_len..(b + 1) * in_len], g, &mut cols);
        let dst = &mut out[b * out_len..(b + 1) * out_len];
        matmul(c_out, g.rows(), g.cols(), weight, false, &cols, false, dst, false);
        if let Some(bias) = bias {
            for (co, &bv) in bias.iter().enumerate() {
                for v in &mut dst[co * g.cols()..(co + 1) * g.cols()] {
                    *v = *v + bv;
                }
            }
        }
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn backward<T: Real>(
    input: &[T],
    n: usize,
    weight: &[T],
    c_out: usize,
    grad_out: &[T],
    g: &Geometry,
    need_input: bool,
    need_weight: bool,
    need_bias: bool,
) -> ConvGrads<T> {
    let in_len = g.c_in * g.h * g.w;
    let out_len = c_out * g.cols();
    let rows = g.rows();
    let ncols = g.cols();
    let mut gin = need_input.then(|| vec![T::zero(); n * in_len]);
    let mut gw = need_weight.then(|| vec![T::zero(); c_out * rows]);
    let mut gb = need_bias.then(|| vec![T::zero(); c_out]);
    let mut cols = vec![T::zero(); rows * ncols];
    for b in 0..n {
        let go = &grad_out[b * out_len..(b + 1) * out_len];
        if let Some(gw) = gw.as_mut() {
            im2col(&input[b * in_len..(b + 1) * in_len], g, &mut cols);
            matmul(c_out, ncols, rows, go, false, &cols, true, gw, true);
        }
        if let Some(gb) = gb.as_mut() {
            for (co, acc) in gb.iter_mut().enumerate() {
                *acc = *acc + go[co * ncols..(co + 1) * ncols].iter().copied().sum::<T>();
            }
        }
        if let Some(gin) = gin.as_mut() {
            matmul(rows, c_out, ncols, weight, true, go, false, &mut cols, false);
            col2im(&cols, g, &mut gin[b * in_len..(b + 1) * in_len]);
        }
    }
    ConvGrads {
        input: gin,
        weight: gw,
        bias: gb,
    }
}
