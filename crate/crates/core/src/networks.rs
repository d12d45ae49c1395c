//! Generator and discriminator architectures.
//!
//! * [`ContentGenerator`]: fixed-resolution gated-conv network with a dilated
//!   branch and a plain branch, used at the coarsest level.
//! * [`TextureGenerator`]: super-resolution stage (gated RRDBs + sub-pixel)
//!   followed by a refinement stage, used at every finer level.
//! * [`PatchDiscriminator`]: spectrally normalised patch discriminators, in a
//!   full-resolution (content) and a 16× downsampling (texture) variant.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{
    gated_conv2d, gated_rrdb, spectral_normalize, spectral_normalize_frozen, sub_pixel_upsample,
    ConvParams, GatedConvParams, RRDBParams, SpectralState,
};
use crate::params::{join, Parameterized};
use crate::pyramid::composite;
use crate::tensor::{Real, Tensor};

pub const FIRST_KERNEL: usize = 5;
pub const KERNEL: usize = 3;
pub const CONTENT_DILATIONS: [usize; 4] = [2, 4, 8, 16];
pub const RRDB_COUNT: usize = 2;
pub const LEAKY_SLOPE: f64 = 0.2;

/// Channel widths of all networks, derived from one base width.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkWidths {
    pub generator: usize,
    pub discriminator: usize,
}

impl Default for NetworkWidths {
    fn default() -> Self {
        NetworkWidths {
            generator: 64,
            discriminator: 64,
        }
    }
}

impl NetworkWidths {
    pub fn uniform(width: usize) -> Self {
        NetworkWidths {
            generator: width,
            discriminator: width,
        }
    }

    pub fn branch(&self) -> usize {
        self.generator / 2
    }

    pub fn texture_discriminator(&self) -> [usize; 4] {
        let w = self.discriminator;
        [w, 2 * w, 4 * w, 4 * w]
    }
}

fn visit_list<T: Real>(
    prefix: &str,
    name: &str,
    items: &[GatedConvParams<T>],
    f: &mut dyn FnMut(String, &Tensor<T>),
) {
    for (i, p) in items.iter().enumerate() {
        p.visit(&join(prefix, &format!("{name}.{i}")), f);
    }
}

fn visit_list_mut<T: Real>(
    prefix: &str,
    name: &str,
    items: &mut [GatedConvParams<T>],
    f: &mut dyn FnMut(String, &mut Tensor<T>),
) {
    for (i, p) in items.iter_mut().enumerate() {
        p.visit_mut(&join(prefix, &format!("{name}.{i}")), f);
    }
}

fn chain<T: Real>(x: &Tensor<T>, layers: &[GatedConvParams<T>]) -> Result<Tensor<T>> {
    layers.iter().try_fold(x.clone(), |h, p| gated_conv2d(&h, p))
}

fn check_image_and_mask<T: Real>(z: &Tensor<T>, m: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let (n, c, h, w) = z.dims4()?;
    let (mn, mc, mh, mw) = m.dims4()?;
    if c != 3 || mc != 1 || (mn, mh, mw) != (n, h, w) {
        return Err(Error::dim(format!(
            "expected image [N,3,H,W] and mask [N,1,H,W], got {:?} and {:?}",
            z.shape(),
            m.shape()
        )));
    }
    Ok((n, h, w))
}

/// Coarsest-level generator.
#[derive(Clone, Debug)]
pub struct ContentGenerator<T: Real = f32> {
    pub stem: Vec<GatedConvParams<T>>,
    /// Dilated branch (dilations 2, 4, 8, 16) over the first half of the stem channels.
    pub upper_branch: Vec<GatedConvParams<T>>,
    /// Plain branch over the second half of the stem channels.
    pub lower_branch: Vec<GatedConvParams<T>>,
    pub head: Vec<GatedConvParams<T>>,
    pub output: ConvParams<T>,
    /// Input size enforced by [`ContentGenerator::forward`].
    pub base_resolution: Option<(usize, usize)>,
}

impl<T: Real> ContentGenerator<T> {
    pub fn new<R: Rng + ?Sized>(widths: NetworkWidths, base_resolution: Option<(usize, usize)>, rng: &mut R) -> Self {
        let w = widths.generator;
        let b = widths.branch();
        assert!(b > 0, "generator width must be at least 2");
        let stem = vec![
            GatedConvParams::new(4, w, FIRST_KERNEL, 1, 1, rng),
            GatedConvParams::new(w, w, KERNEL, 1, 1, rng),
            GatedConvParams::new(w, w, KERNEL, 1, 1, rng),
            GatedConvParams::new(w, 2 * b, KERNEL, 1, 1, rng),
        ];
        let upper_branch = CONTENT_DILATIONS
            .iter()
            .map(|&d| GatedConvParams::new(b, b, KERNEL, d, 1, rng))
            .collect();
        let lower_branch = (0..4)
            .map(|_| GatedConvParams::new(b, b, KERNEL, 1, 1, rng))
            .collect();
        let head = vec![
            GatedConvParams::new(2 * b, w, KERNEL, 1, 1, rng),
            GatedConvParams::new(w, w, KERNEL, 1, 1, rng),
            GatedConvParams::new(w, w, KERNEL, 1, 1, rng),
        ];
        let output = ConvParams::new(w, 3, KERNEL, 1, rng);
        ContentGenerator {
            stem,
            upper_branch,
            lower_branch,
            head,
            output,
            base_resolution,
        }
    }

    /// `x'_0 = G_0([z_0, m_0])`; rejects inputs that are not the base resolution.
    pub fn forward(&self, z: &Tensor<T>, m: &Tensor<T>) -> Result<Tensor<T>> {
        let (_, h, w) = check_image_and_mask(z, m)?;
        if let Some(base) = self.base_resolution {
            if base != (h, w) {
                return Err(Error::dim(format!(
                    "content generator expects {}x{} inputs, got {h}x{w}",
                    base.0, base.1
                )));
            }
        }
        self.forward_any_size(z, m)
    }

    /// Fully convolutional forward pass at any input size.
    pub fn forward_any_size(&self, z: &Tensor<T>, m: &Tensor<T>) -> Result<Tensor<T>> {
        check_image_and_mask(z, m)?;
        let x = Tensor::cat(&[z, m], 1)?;
        let (upper, lower) = self.branches(&self.stem_forward(&x)?)?;
        self.head_forward(&Tensor::cat(&[&upper, &lower], 1)?)
    }

    pub fn stem_forward(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        chain(input, &self.stem)
    }

    /// Splits stem features along channels and runs both branches.
    pub fn branches(&self, features: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let b = self.upper_branch[0].in_channels();
        let upper = chain(&features.narrow(1, 0, b)?, &self.upper_branch)?;
        let lower = chain(&features.narrow(1, b, b)?, &self.lower_branch)?;
        Ok((upper, lower))
    }

    /// Head applied to concatenated branch features; output in `[0, 1]`.
    pub fn head_forward(&self, features: &Tensor<T>) -> Result<Tensor<T>> {
        let h = chain(features, &self.head)?;
        Ok(self.output.forward(&h)?.sigmoid())
    }
}

impl<T: Real> Parameterized<T> for ContentGenerator<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        visit_list(prefix, "stem", &self.stem, f);
        visit_list(prefix, "upper", &self.upper_branch, f);
        visit_list(prefix, "lower", &self.lower_branch, f);
        visit_list(prefix, "head", &self.head, f);
        self.output.visit(&join(prefix, "output"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        visit_list_mut(prefix, "stem", &mut self.stem, f);
        visit_list_mut(prefix, "upper", &mut self.upper_branch, f);
        visit_list_mut(prefix, "lower", &mut self.lower_branch, f);
        visit_list_mut(prefix, "head", &mut self.head, f);
        self.output.visit_mut(&join(prefix, "output"), f);
    }
}

/// Super-resolution stage of a texture generator.
#[derive(Clone, Debug)]
pub struct SrStage<T: Real = f32> {
    pub stem: GatedConvParams<T>,
    pub rrdbs: Vec<RRDBParams<T>>,
    pub post: GatedConvParams<T>,
    /// Produces `4C` channels for the sub-pixel shuffle.
    pub upsample: GatedConvParams<T>,
    pub output: ConvParams<T>,
}

impl<T: Real> SrStage<T> {
    fn new<R: Rng + ?Sized>(width: usize, rng: &mut R) -> Self {
        SrStage {
            stem: GatedConvParams::new(3, width, FIRST_KERNEL, 1, 1, rng),
            rrdbs: (0..RRDB_COUNT).map(|_| RRDBParams::new(width, rng)).collect(),
            post: GatedConvParams::new(width, width, KERNEL, 1, 1, rng),
            upsample: GatedConvParams::new(width, 4 * width, KERNEL, 1, 1, rng),
            output: ConvParams::new(width, 3, KERNEL, 1, rng),
        }
    }

    /// Upsampled `C`-channel features at twice the input size.
    pub fn features(&self, y_prev: &Tensor<T>) -> Result<Tensor<T>> {
        let fea = gated_conv2d(y_prev, &self.stem)?;
        let trunk = self
            .rrdbs
            .iter()
            .try_fold(fea.clone(), |h, p| gated_rrdb(&h, p))?;
        let trunk = fea.add(&gated_conv2d(&trunk, &self.post)?)?;
        sub_pixel_upsample(&gated_conv2d(&trunk, &self.upsample)?)
    }

    pub fn forward(&self, y_prev: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.output.forward(&self.features(y_prev)?)?.sigmoid())
    }
}

impl<T: Real> Parameterized<T> for SrStage<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.stem.visit(&join(prefix, "stem"), f);
        for (i, r) in self.rrdbs.iter().enumerate() {
            r.visit(&join(prefix, &format!("rrdb{i}")), f);
        }
        self.post.visit(&join(prefix, "post"), f);
        self.upsample.visit(&join(prefix, "upsample"), f);
        self.output.visit(&join(prefix, "output"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.stem.visit_mut(&join(prefix, "stem"), f);
        for (i, r) in self.rrdbs.iter_mut().enumerate() {
            r.visit_mut(&join(prefix, &format!("rrdb{i}")), f);
        }
        self.post.visit_mut(&join(prefix, "post"), f);
        self.upsample.visit_mut(&join(prefix, "upsample"), f);
        self.output.visit_mut(&join(prefix, "output"), f);
    }
}

/// Six-layer refinement stage with a shortcut from layer 1 to layer 5.
#[derive(Clone, Debug)]
pub struct RefineStage<T: Real = f32> {
    pub convs: Vec<GatedConvParams<T>>,
    pub output: ConvParams<T>,
}

impl<T: Real> RefineStage<T> {
    fn new<R: Rng + ?Sized>(c_in: usize, width: usize, rng: &mut R) -> Self {
        let mut convs = vec![GatedConvParams::new(c_in, width, FIRST_KERNEL, 1, 1, rng)];
        convs.extend((0..4).map(|_| GatedConvParams::new(width, width, KERNEL, 1, 1, rng)));
        RefineStage {
            convs,
            output: ConvParams::new(width, 3, KERNEL, 1, rng),
        }
    }

    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let first = gated_conv2d(input, &self.convs[0])?;
        let middle = chain(&first, &self.convs[1..])?;
        let h = middle.add(&first)?;
        Ok(self.output.forward(&h)?.sigmoid())
    }
}

impl<T: Real> Parameterized<T> for RefineStage<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        visit_list(prefix, "convs", &self.convs, f);
        self.output.visit(&join(prefix, "output"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        visit_list_mut(prefix, "convs", &mut self.convs, f);
        self.output.visit_mut(&join(prefix, "output"), f);
    }
}

/// Outputs of one texture-generator pass.
#[derive(Clone, Debug)]
pub struct TextureOutputs<T: Real = f32> {
    /// `x'_i`, the super-resolution prediction; absent for the one-stage variant.
    pub coarse: Option<Tensor<T>>,
    /// `x''_i`, the refined prediction.
    pub refined: Tensor<T>,
}

/// Generator of every level above the coarsest.
#[derive(Clone, Debug)]
pub struct TextureGenerator<T: Real = f32> {
    pub sr_stage: SrStage<T>,
    pub refine_stage: RefineStage<T>,
    /// Merged variant: SR features feed the refinement stage directly and
    /// no intermediate image is produced.
    pub one_stage: bool,
}

impl<T: Real> TextureGenerator<T> {
    pub fn new<R: Rng + ?Sized>(widths: NetworkWidths, one_stage: bool, rng: &mut R) -> Self {
        let w = widths.generator;
        let sr_stage = SrStage::new(w, rng);
        let refine_in = if one_stage { w + 4 } else { 4 };
        TextureGenerator {
            sr_stage,
            refine_stage: RefineStage::new(refine_in, w, rng),
            one_stage,
        }
    }

    pub fn forward(&self, z: &Tensor<T>, m: &Tensor<T>, y_prev: &Tensor<T>) -> Result<TextureOutputs<T>> {
        let refine = &self.refine_stage;
        self.forward_with_refiner(z, m, y_prev, |x| refine.forward(x))
    }

    /// Forward pass with a substitute refinement stage, for probing the wiring.
    pub fn forward_with_refiner(
        &self,
        z: &Tensor<T>,
        m: &Tensor<T>,
        y_prev: &Tensor<T>,
        refine: impl Fn(&Tensor<T>) -> Result<Tensor<T>>,
    ) -> Result<TextureOutputs<T>> {
        let (n, h, w) = check_image_and_mask(z, m)?;
        let (pn, pc, ph, pw) = y_prev.dims4()?;
        if pn != n || pc != 3 || 2 * ph != h || 2 * pw != w {
            return Err(Error::dim(format!(
                "texture generator needs the previous result at half size: got {:?} for a {h}x{w} level",
                y_prev.shape()
            )));
        }
        if self.one_stage {
            let features = self.sr_stage.features(y_prev)?;
            let refined = refine(&Tensor::cat(&[&features, z, m], 1)?)?;
            return Ok(TextureOutputs {
                coarse: None,
                refined,
            });
        }
        let coarse = self.sr_stage.forward(y_prev)?;
        let intermediate = composite(z, m, &coarse)?;
        let refined = refine(&Tensor::cat(&[&intermediate, m], 1)?)?;
        Ok(TextureOutputs {
            coarse: Some(coarse),
            refined,
        })
    }
}

impl<T: Real> Parameterized<T> for TextureGenerator<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.sr_stage.visit(&join(prefix, "sr"), f);
        self.refine_stage.visit(&join(prefix, "refine"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.sr_stage.visit_mut(&join(prefix, "sr"), f);
        self.refine_stage.visit_mut(&join(prefix, "refine"), f);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiscriminatorKind {
    /// Eight stride-1 layers; score map at input resolution.
    Content,
    /// Four stride-2 layers and a stride-1 head; score map at 1/16 resolution.
    Texture,
}

/// Spectrally normalised patch discriminator.
#[derive(Clone, Debug)]
pub struct PatchDiscriminator<T: Real = f32> {
    pub kind: DiscriminatorKind,
    pub layers: Vec<ConvParams<T>>,
    pub spectral: Vec<SpectralState>,
}

impl<T: Real> PatchDiscriminator<T> {
    pub fn content<R: Rng + ?Sized>(widths: NetworkWidths, rng: &mut R) -> Self {
        let w = widths.discriminator;
        let mut layers = vec![ConvParams::new(3, w, FIRST_KERNEL, 1, rng)];
        layers.extend((0..6).map(|_| ConvParams::new(w, w, KERNEL, 1, rng)));
        layers.push(ConvParams::new(w, 1, KERNEL, 1, rng));
        Self::with_layers(DiscriminatorKind::Content, layers, rng)
    }

    pub fn texture<R: Rng + ?Sized>(widths: NetworkWidths, rng: &mut R) -> Self {
        let [a, b, c, d] = widths.texture_discriminator();
        let layers = vec![
            ConvParams::new(3, a, FIRST_KERNEL, 2, rng),
            ConvParams::new(a, b, KERNEL, 2, rng),
            ConvParams::new(b, c, KERNEL, 2, rng),
            ConvParams::new(c, d, KERNEL, 2, rng),
            ConvParams::new(d, 1, KERNEL, 1, rng),
        ];
        Self::with_layers(DiscriminatorKind::Texture, layers, rng)
    }

    fn with_layers<R: Rng + ?Sized>(kind: DiscriminatorKind, layers: Vec<ConvParams<T>>, rng: &mut R) -> Self {
        let spectral = layers
            .iter()
            .map(|l| SpectralState::new(l.out_channels(), 1, rng))
            .collect();
        PatchDiscriminator {
            kind,
            layers,
            spectral,
        }
    }

    /// Output map size for an `h × w` input.
    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        match self.kind {
            DiscriminatorKind::Content => (h, w),
            DiscriminatorKind::Texture => (h / 16, w / 16),
        }
    }

    /// Normalised kernels after one power-iteration update per layer.
    pub fn spectral_weights(&mut self) -> Result<Vec<Tensor<T>>> {
        self.layers
            .iter()
            .zip(self.spectral.iter_mut())
            .map(|(l, s)| spectral_normalize(&l.kernel, s))
            .collect()
    }

    /// Normalised kernels from the stored singular vectors; state is untouched.
    pub fn spectral_weights_frozen(&self) -> Result<Vec<Tensor<T>>> {
        self.layers
            .iter()
            .zip(&self.spectral)
            .map(|(l, s)| spectral_normalize_frozen(&l.kernel, s))
            .collect()
    }

    /// Runs `iterations` power-iteration steps on every layer.
    pub fn calibrate(&mut self, iterations: usize) -> Result<()> {
        for (l, s) in self.layers.iter().zip(self.spectral.iter_mut()) {
            let keep = s.power_iterations;
            s.power_iterations = iterations.max(1);
            let r = crate::layers::power_iteration(&l.kernel, s);
            s.power_iterations = keep;
            r?;
        }
        Ok(())
    }

    pub fn forward_with(&self, img: &Tensor<T>, weights: &[Tensor<T>]) -> Result<Tensor<T>> {
        let (_, c, h, w) = img.dims4()?;
        if c != 3 {
            return Err(Error::dim(format!("discriminator expects 3 channels, got {c}")));
        }
        if self.kind == DiscriminatorKind::Texture && (h % 16 != 0 || w % 16 != 0 || h == 0 || w == 0) {
            return Err(Error::dim(format!(
                "texture discriminator needs sizes divisible by 16, got {h}x{w}"
            )));
        }
        if weights.len() != self.layers.len() {
            return Err(Error::dim("one normalised kernel per layer is required"));
        }
        let last = self.layers.len() - 1;
        let mut x = img.clone();
        for (i, (layer, k)) in self.layers.iter().zip(weights).enumerate() {
            x = layer.forward_with(&x, k)?;
            if i != last {
                x = x.leaky_relu(LEAKY_SLOPE);
            }
        }
        Ok(x)
    }

    /// Forward pass with frozen spectral state.
    pub fn forward(&self, img: &Tensor<T>) -> Result<Tensor<T>> {
        self.forward_with(img, &self.spectral_weights_frozen()?)
    }
}

impl<T: Real> Parameterized<T> for PatchDiscriminator<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &format!("layers.{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("layers.{i}")), f);
        }
    }
}

/// Either generator, as stored per pyramid level.
#[derive(Clone, Debug)]
pub enum Generator<T: Real = f32> {
    Content(ContentGenerator<T>),
    Texture(TextureGenerator<T>),
}

impl<T: Real> Parameterized<T> for Generator<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        match self {
            Generator::Content(g) => g.visit(prefix, f),
            Generator::Texture(g) => g.visit(prefix, f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        match self {
            Generator::Content(g) => g.visit_mut(prefix, f),
            Generator::Texture(g) => g.visit_mut(prefix, f),
        }
    }
}
