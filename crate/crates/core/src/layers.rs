//! Layer primitives shared by every network: gated convolutions, gated
//! residual-in-residual dense blocks, sub-pixel upsampling and spectral
//! normalisation.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::params::{init_conv, join, Parameterized};
use crate::tensor::{Conv2dConfig, Real, Tensor};

/// A gated convolution: `ELU(conv_f(x)) ⊙ sigmoid(conv_g(x))`.
#[derive(Clone, Debug)]
pub struct GatedConvParams<T: Real = f32> {
    pub feature_kernel: Tensor<T>,
    pub feature_bias: Tensor<T>,
    pub gate_kernel: Tensor<T>,
    pub gate_bias: Tensor<T>,
    pub dilation: usize,
    pub stride: usize,
}

impl<T: Real> GatedConvParams<T> {
    pub fn new<R: Rng + ?Sized>(
        c_in: usize,
        c_out: usize,
        kernel: usize,
        dilation: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        assert!(kernel % 2 == 1, "gated conv kernels must be odd, got {kernel}");
        let (feature_kernel, feature_bias) = init_conv(c_out, c_in, kernel, rng);
        let (gate_kernel, gate_bias) = init_conv(c_out, c_in, kernel, rng);
        GatedConvParams {
            feature_kernel,
            feature_bias,
            gate_kernel,
            gate_bias,
            dilation,
            stride,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.feature_kernel.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.feature_kernel.shape()[0]
    }

    pub fn kernel_size(&self) -> usize {
        self.feature_kernel.shape()[2]
    }

    pub fn conv_config(&self) -> Conv2dConfig {
        Conv2dConfig::same(self.kernel_size(), self.dilation, self.stride)
    }

    /// Replaces the feature branch with zeros.
    pub fn zero_feature(&mut self) {
        self.feature_kernel = Tensor::zeros(self.feature_kernel.shape()).to_var();
        self.feature_bias = Tensor::zeros(self.feature_bias.shape()).to_var();
    }
}

impl<T: Real> Parameterized<T> for GatedConvParams<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        f(join(prefix, "feature_kernel"), &self.feature_kernel);
        f(join(prefix, "feature_bias"), &self.feature_bias);
        f(join(prefix, "gate_kernel"), &self.gate_kernel);
        f(join(prefix, "gate_bias"), &self.gate_bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(join(prefix, "feature_kernel"), &mut self.feature_kernel);
        f(join(prefix, "feature_bias"), &mut self.feature_bias);
        f(join(prefix, "gate_kernel"), &mut self.gate_kernel);
        f(join(prefix, "gate_bias"), &mut self.gate_bias);
    }
}

pub fn gated_conv2d<T: Real>(input: &Tensor<T>, params: &GatedConvParams<T>) -> Result<Tensor<T>> {
    if params.feature_kernel.shape() != params.gate_kernel.shape() {
        return Err(Error::dim(format!(
            "feature kernel {:?} and gate kernel {:?} differ",
            params.feature_kernel.shape(),
            params.gate_kernel.shape()
        )));
    }
    // One convolution for both branches shares the im2col unfolding.
    let kernel = Tensor::cat(&[&params.feature_kernel, &params.gate_kernel], 0)?;
    let bias = Tensor::cat(&[&params.feature_bias, &params.gate_bias], 0)?;
    input
        .conv2d(&kernel, Some(&bias), params.conv_config())?
        .gated_activation()
}

/// A plain convolution with bias.
#[derive(Clone, Debug)]
pub struct ConvParams<T: Real = f32> {
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
    pub dilation: usize,
    pub stride: usize,
}

impl<T: Real> ConvParams<T> {
    pub fn new<R: Rng + ?Sized>(
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let (kernel, bias) = init_conv(c_out, c_in, kernel, rng);
        ConvParams {
            kernel,
            bias,
            dilation: 1,
            stride,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape()[0]
    }

    pub fn conv_config(&self) -> Conv2dConfig {
        Conv2dConfig::same(self.kernel.shape()[2], self.dilation, self.stride)
    }

    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        input.conv2d(&self.kernel, Some(&self.bias), self.conv_config())
    }

    /// Forward pass with a substitute kernel (e.g. a spectrally normalised one).
    pub fn forward_with(&self, input: &Tensor<T>, kernel: &Tensor<T>) -> Result<Tensor<T>> {
        input.conv2d(kernel, Some(&self.bias), self.conv_config())
    }
}

impl<T: Real> Parameterized<T> for ConvParams<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        f(join(prefix, "kernel"), &self.kernel);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(join(prefix, "kernel"), &mut self.kernel);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

pub const RRDB_DENSE_BLOCKS: usize = 3;
pub const RRDB_CONVS_PER_BLOCK: usize = 5;
pub const RRDB_RESIDUAL_SCALE: f64 = 0.2;

/// Residual-in-residual dense block built from gated convolutions.
///
/// Each dense block feeds conv `j` the concatenation of the block input and
/// the outputs of convs `1..j`; the last conv maps back to `C` channels.
#[derive(Clone, Debug)]
pub struct RRDBParams<T: Real = f32> {
    pub dense_blocks: Vec<Vec<GatedConvParams<T>>>,
    pub residual_scale: f64,
}

impl<T: Real> RRDBParams<T> {
    /// `channels` wide blocks with `channels / 2` growth channels.
    pub fn new<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> Self {
        let growth = (channels / 2).max(1);
        let dense_blocks = (0..RRDB_DENSE_BLOCKS)
            .map(|_| {
                (0..RRDB_CONVS_PER_BLOCK)
                    .map(|j| {
                        let c_in = channels + j * growth;
                        let c_out = if j + 1 == RRDB_CONVS_PER_BLOCK {
                            channels
                        } else {
                            growth
                        };
                        GatedConvParams::new(c_in, c_out, 3, 1, 1, rng)
                    })
                    .collect()
            })
            .collect();
        RRDBParams {
            dense_blocks,
            residual_scale: RRDB_RESIDUAL_SCALE,
        }
    }

    pub fn channels(&self) -> usize {
        self.dense_blocks[0][0].in_channels()
    }
}

impl<T: Real> Parameterized<T> for RRDBParams<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        for (b, block) in self.dense_blocks.iter().enumerate() {
            for (j, conv) in block.iter().enumerate() {
                conv.visit(&join(prefix, &format!("block{b}.conv{j}")), f);
            }
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        for (b, block) in self.dense_blocks.iter_mut().enumerate() {
            for (j, conv) in block.iter_mut().enumerate() {
                conv.visit_mut(&join(prefix, &format!("block{b}.conv{j}")), f);
            }
        }
    }
}

fn dense_block<T: Real>(input: &Tensor<T>, convs: &[GatedConvParams<T>]) -> Result<Tensor<T>> {
    let mut features = vec![input.clone()];
    let mut last = None;
    for conv in convs {
        let refs: Vec<&Tensor<T>> = features.iter().collect();
        let x = if refs.len() == 1 {
            refs[0].clone()
        } else {
            Tensor::cat(&refs, 1)?
        };
        let out = gated_conv2d(&x, conv)?;
        features.push(out.clone());
        last = Some(out);
    }
    last.ok_or_else(|| Error::dim("dense block without convolutions"))
}

/// `x + β · (block_3 ∘ block_2 ∘ block_1)(x)`.
pub fn gated_rrdb<T: Real>(input: &Tensor<T>, params: &RRDBParams<T>) -> Result<Tensor<T>> {
    let (_, c, _, _) = input.dims4()?;
    if c != params.channels() {
        return Err(Error::dim(format!(
            "RRDB expects {} channels, got {c}",
            params.channels()
        )));
    }
    let mut x = input.clone();
    for block in &params.dense_blocks {
        x = dense_block(&x, block)?;
    }
    input.add(&x.scale(params.residual_scale))
}

/// Sub-pixel upsampling by 2: `[N, 4C, H, W] → [N, C, 2H, 2W]`.
pub fn sub_pixel_upsample<T: Real>(input: &Tensor<T>) -> Result<Tensor<T>> {
    input.pixel_shuffle(2)
}

/// Persistent power-iteration state of one spectrally normalised weight.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralState {
    /// Left singular vector estimate, unit length.
    pub u: Vec<f64>,
    pub power_iterations: usize,
}

impl SpectralState {
    pub fn new<R: Rng + ?Sized>(rows: usize, power_iterations: usize, rng: &mut R) -> Self {
        let mut u: Vec<f64> = (0..rows).map(|_| StandardNormal.sample(rng)).collect();
        if normalize(&mut u) == 0.0 {
            u = vec![0.0; rows];
            u[0] = 1.0;
        }
        SpectralState {
            u,
            power_iterations: power_iterations.max(1),
        }
    }
}

fn normalize(v: &mut [f64]) -> f64 {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x /= norm;
        }
    }
    norm
}

/// Power-iteration estimate of the largest singular value of `weight`
/// viewed as a `[rows, rest]` matrix; updates `state.u` in place and returns
/// `(sigma, v)`.
pub fn power_iteration<T: Real>(weight: &Tensor<T>, state: &mut SpectralState) -> Result<(f64, Vec<f64>)> {
    let rows = weight.shape().first().copied().unwrap_or(0);
    if rows == 0 || state.u.len() != rows {
        return Err(Error::dim(format!(
            "spectral state has {} rows but weight has {rows}",
            state.u.len()
        )));
    }
    let cols = weight.numel() / rows;
    let w: Vec<f64> = weight.data().iter().map(|v| v.as_f64()).collect();
    if w.iter().all(|&x| x == 0.0) {
        return Err(Error::Degenerate(
            "spectral normalisation of an all-zero weight".into(),
        ));
    }
    let mut v = vec![0.0; cols];
    for _ in 0..state.power_iterations {
        v.iter_mut().for_each(|x| *x = 0.0);
        for (r, &ur) in state.u.iter().enumerate() {
            for (vc, &wv) in v.iter_mut().zip(&w[r * cols..(r + 1) * cols]) {
                *vc += ur * wv;
            }
        }
        normalize(&mut v);
        for (r, ur) in state.u.iter_mut().enumerate() {
            *ur = w[r * cols..(r + 1) * cols]
                .iter()
                .zip(&v)
                .map(|(a, b)| a * b)
                .sum();
        }
        if normalize(&mut state.u) == 0.0 {
            return Err(Error::Degenerate(
                "power iteration collapsed to the zero vector".into(),
            ));
        }
    }
    let sigma: f64 = state
        .u
        .iter()
        .enumerate()
        .map(|(r, &ur)| {
            ur * w[r * cols..(r + 1) * cols]
                .iter()
                .zip(&v)
                .map(|(a, b)| a * b)
                .sum::<f64>()
        })
        .sum();
    if sigma.abs() < f64::MIN_POSITIVE {
        return Err(Error::Degenerate("estimated spectral norm is zero".into()));
    }
    Ok((sigma, v))
}

/// `weight / σ̂`, with `σ̂ = uᵀ W v` from [`power_iteration`].
///
/// The gradient flows through `σ̂` (with `u`, `v` held constant), so the
/// result stays differentiable with respect to `weight`.
pub fn spectral_normalize<T: Real>(weight: &Tensor<T>, state: &mut SpectralState) -> Result<Tensor<T>> {
    let (_, v) = power_iteration(weight, state)?;
    let rows = state.u.len();
    let cols = v.len();
    let mut outer = Vec::with_capacity(rows * cols);
    for &ur in &state.u {
        outer.extend(v.iter().map(|&vc| T::of(ur * vc)));
    }
    let outer = Tensor::from_vec(outer, weight.shape())?;
    let sigma = weight.mul(&outer)?.sum_all();
    weight.div_scalar(&sigma)
}

/// Normalisation with `u` held fixed (no power-iteration update).
pub fn spectral_normalize_frozen<T: Real>(weight: &Tensor<T>, state: &SpectralState) -> Result<Tensor<T>> {
    let mut scratch = state.clone();
    scratch.power_iterations = 1;
    // One iteration from the stored u recomputes v without touching `state`.
    spectral_normalize(weight, &mut scratch)
}
