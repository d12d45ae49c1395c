//! Adversarial, reconstruction, perceptual and style losses and their
//! per-level aggregates.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::init_conv;
use crate::tensor::{Conv2dConfig, Real, Tensor};

fn same_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// `mean(ReLU(1 − real)) + mean(ReLU(1 + fake))`.
pub fn hinge_d<T: Real>(real_scores: &Tensor<T>, fake_scores: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape(real_scores, fake_scores, "hinge_d")?;
    let real = real_scores.affine(-1.0, 1.0).relu().mean_all();
    let fake = fake_scores.affine(1.0, 1.0).relu().mean_all();
    real.add(&fake)
}

/// `−mean(fake)`.
pub fn hinge_g<T: Real>(fake_scores: &Tensor<T>) -> Tensor<T> {
    fake_scores.mean_all().neg()
}

/// Mean squared distance between `D(y)` and the mask-blended real/fake maps.
pub fn consistency_loss<T: Real>(
    d_composite: &Tensor<T>,
    d_real: &Tensor<T>,
    d_fake: &Tensor<T>,
    mask: &Tensor<T>,
) -> Result<Tensor<T>> {
    same_shape(d_composite, d_real, "consistency_loss")?;
    same_shape(d_composite, d_fake, "consistency_loss")?;
    let mask = if mask.shape() == d_composite.shape() {
        mask.clone()
    } else {
        let (n, c, h, w) = d_composite.dims4()?;
        if mask.shape() != [n, 1, h, w] {
            return Err(Error::dim(format!(
                "consistency_loss: mask {:?} does not match score map {:?}",
                mask.shape(),
                d_composite.shape()
            )));
        }
        mask.expand_channels(c)?
    };
    let target = d_real.mul(&mask.one_minus())?.add(&d_fake.mul(&mask)?)?;
    Ok(d_composite.sub(&target)?.square().mean_all())
}

/// Mean absolute difference over every element.
pub fn l1_recon<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape(pred, target, "l1_recon")?;
    Ok(pred.sub(target)?.abs().mean_all())
}

/// Feature maps of one image batch, in extraction order.
#[derive(Clone, Debug)]
pub struct FeatureStack<T: Real = f32> {
    pub layers: Vec<Tensor<T>>,
}

impl<T: Real> FeatureStack<T> {
    /// `C_q · H_q · W_q` for every layer.
    pub fn element_counts(&self) -> Vec<usize> {
        self.layers
            .iter()
            .map(|t| t.shape()[1..].iter().product())
            .collect()
    }
}

/// A frozen network that maps `[N, 3, H, W]` images in `[0, 1]` to features.
pub trait FeatureExtractor<T: Real>: Send + Sync {
    fn name(&self) -> &str;

    fn extract(&self, images: &Tensor<T>) -> Result<FeatureStack<T>>;
}

/// `Σ_q (1/N_q) ‖φ_q(pred) − φ_q(target)‖₁`, averaged over the batch.
pub fn perceptual_loss<T: Real>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    extractor: &dyn FeatureExtractor<T>,
) -> Result<Tensor<T>> {
    same_shape(pred, target, "perceptual_loss")?;
    let (fp, ft) = extract_pair(pred, target, extractor)?;
    perceptual_from_features(&fp, &ft)
}

/// `Σ_q ‖gram(φ_q(pred)) − gram(φ_q(target))‖₁`, averaged over the batch.
pub fn style_loss<T: Real>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    extractor: &dyn FeatureExtractor<T>,
) -> Result<Tensor<T>> {
    same_shape(pred, target, "style_loss")?;
    let (fp, ft) = extract_pair(pred, target, extractor)?;
    style_from_features(&fp, &ft)
}

fn extract_pair<T: Real>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    extractor: &dyn FeatureExtractor<T>,
) -> Result<(FeatureStack<T>, FeatureStack<T>)> {
    let wrap = |e: Error| match e {
        Error::Dependency(_) => e,
        other => Error::Dependency(format!("extractor {} failed: {other}", extractor.name())),
    };
    let fp = extractor.extract(pred).map_err(wrap)?;
    let ft = extractor.extract(target).map_err(wrap)?;
    if fp.layers.len() != ft.layers.len() || fp.layers.is_empty() {
        return Err(Error::Dependency(format!(
            "extractor {} returned {} and {} layers",
            extractor.name(),
            fp.layers.len(),
            ft.layers.len()
        )));
    }
    Ok((fp, ft))
}

fn perceptual_from_features<T: Real>(fp: &FeatureStack<T>, ft: &FeatureStack<T>) -> Result<Tensor<T>> {
    let mut total: Option<Tensor<T>> = None;
    for (a, b) in fp.layers.iter().zip(&ft.layers) {
        let term = l1_recon(a, b)?;
        total = Some(match total {
            Some(t) => t.add(&term)?,
            None => term,
        });
    }
    Ok(total.expect("at least one layer"))
}

fn style_from_features<T: Real>(fp: &FeatureStack<T>, ft: &FeatureStack<T>) -> Result<Tensor<T>> {
    let mut total: Option<Tensor<T>> = None;
    for (a, b) in fp.layers.iter().zip(&ft.layers) {
        let n = a.shape()[0] as f64;
        let term = a.gram()?.sub(&b.gram()?)?.abs().sum_all().scale(1.0 / n);
        total = Some(match total {
            Some(t) => t.add(&term)?,
            None => term,
        });
    }
    Ok(total.expect("at least one layer"))
}

/// Returns the image itself as a single feature layer.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityExtractor;

impl<T: Real> FeatureExtractor<T> for IdentityExtractor {
    fn name(&self) -> &str {
        "identity"
    }

    fn extract(&self, images: &Tensor<T>) -> Result<FeatureStack<T>> {
        Ok(FeatureStack {
            layers: vec![images.clone()],
        })
    }
}

/// Three stride-2 3×3 convolutions with ELU, weights drawn from a fixed seed.
#[derive(Clone, Debug)]
pub struct RandomConvExtractor<T: Real = f32> {
    pub stages: Vec<(Tensor<T>, Tensor<T>)>,
}

impl<T: Real> RandomConvExtractor<T> {
    pub const DEFAULT_SEED: u64 = 0x5eed;

    pub fn new(seed: u64, widths: [usize; 3]) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut c_in = 3;
        let mut stages = Vec::with_capacity(3);
        for c_out in widths {
            let (k, b) = init_conv::<T, _>(c_out, c_in, 3, &mut rng);
            stages.push((k.detach(), b.detach()));
            c_in = c_out;
        }
        RandomConvExtractor { stages }
    }

    pub fn config() -> Conv2dConfig {
        Conv2dConfig::same(3, 1, 2)
    }
}

impl<T: Real> Default for RandomConvExtractor<T> {
    fn default() -> Self {
        Self::new(Self::DEFAULT_SEED, [8, 16, 32])
    }
}

impl<T: Real> FeatureExtractor<T> for RandomConvExtractor<T> {
    fn name(&self) -> &str {
        "random-conv"
    }

    fn extract(&self, images: &Tensor<T>) -> Result<FeatureStack<T>> {
        let mut x = images.clone();
        let mut layers = Vec::with_capacity(self.stages.len());
        for (k, b) in &self.stages {
            x = x.conv2d(k, Some(b), Self::config())?.elu();
            layers.push(x.clone());
        }
        Ok(FeatureStack { layers })
    }
}

/// VGG-16 convolutional trunk up to `pool3`, read from a safetensors file
/// using torchvision's `features.{i}.weight` / `features.{i}.bias` keys.
#[derive(Clone, Debug)]
pub struct Vgg16Extractor<T: Real = f32> {
    blocks: Vec<Vec<(Tensor<T>, Tensor<T>)>>,
}

const VGG_BLOCKS: [&[(usize, usize, usize)]; 3] = [
    &[(0, 3, 64), (2, 64, 64)],
    &[(5, 64, 128), (7, 128, 128)],
    &[(10, 128, 256), (12, 256, 256), (14, 256, 256)],
];
const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

impl<T: Real> Vgg16Extractor<T> {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| {
            Error::Dependency(format!("cannot read VGG-16 weights {}: {e}", path.display()))
        })?;
        let st = safetensors::SafeTensors::deserialize(&bytes).map_err(|e| {
            Error::Dependency(format!("invalid safetensors file {}: {e}", path.display()))
        })?;
        let fetch = |name: String, shape: &[usize]| -> Result<Tensor<T>> {
            let view = st
                .tensor(&name)
                .map_err(|e| Error::Dependency(format!("VGG-16 weights lack {name}: {e}")))?;
            if view.dtype() != safetensors::Dtype::F32 || view.shape() != shape {
                return Err(Error::Dependency(format!(
                    "{name}: expected f32 {shape:?}, found {:?} {:?}",
                    view.dtype(),
                    view.shape()
                )));
            }
            let data = view
                .data()
                .chunks_exact(4)
                .map(|b| T::of(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
                .collect();
            Tensor::from_vec(data, shape)
        };
        let mut blocks = Vec::new();
        for block in VGG_BLOCKS {
            let mut convs = Vec::new();
            for &(idx, c_in, c_out) in block {
                let k = fetch(format!("features.{idx}.weight"), &[c_out, c_in, 3, 3])?;
                let b = fetch(format!("features.{idx}.bias"), &[c_out])?;
                convs.push((k, b));
            }
            blocks.push(convs);
        }
        Ok(Vgg16Extractor { blocks })
    }

    fn normalize(images: &Tensor<T>) -> Result<Tensor<T>> {
        let channels: Vec<Tensor<T>> = (0..3)
            .map(|c| {
                let s = 1.0 / IMAGENET_STD[c];
                Ok(images.narrow(1, c, 1)?.affine(s, -IMAGENET_MEAN[c] * s))
            })
            .collect::<Result<_>>()?;
        Tensor::cat(&channels.iter().collect::<Vec<_>>(), 1)
    }
}

impl<T: Real> FeatureExtractor<T> for Vgg16Extractor<T> {
    fn name(&self) -> &str {
        "vgg16"
    }

    fn extract(&self, images: &Tensor<T>) -> Result<FeatureStack<T>> {
        let mut x = Self::normalize(images)?;
        let mut layers = Vec::with_capacity(3);
        for block in &self.blocks {
            for (k, b) in block {
                x = x.conv2d(k, Some(b), Conv2dConfig::same(3, 1, 1))?.relu();
            }
            x = x.max_pool2x2()?;
            layers.push(x.clone());
        }
        Ok(FeatureStack { layers })
    }
}

/// Loss weights and ablation toggles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub adversarial: f64,
    pub recon: f64,
    pub perceptual: f64,
    /// Style weight for texture levels 1 to 4.
    pub style: [f64; 4],
    pub use_consistency: bool,
    pub two_stage: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            adversarial: 0.001,
            recon: 0.1,
            perceptual: 0.1,
            style: [1.0, 50.0, 120.0, 250.0],
            use_consistency: true,
            two_stage: true,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.adversarial, self.recon, self.perceptual]
            .into_iter()
            .chain(self.style);
        for w in all {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::input(format!("loss weight {w} must be finite and >= 0")));
            }
        }
        Ok(())
    }

    /// Style weight of texture level `level` (1-based).
    pub fn style_for(&self, level: usize) -> Result<f64> {
        if level == 0 || level > self.style.len() {
            return Err(Error::input(format!(
                "style weight is defined for texture levels 1..={}, got {level}",
                self.style.len()
            )));
        }
        Ok(self.style[level - 1])
    }
}

/// Named scalar loss terms in insertion order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossLog {
    pub terms: BTreeMap<String, f64>,
}

impl LossLog {
    pub fn record<T: Real>(&mut self, name: &str, value: &Tensor<T>) {
        self.terms
            .insert(name.to_string(), value.data().first().map_or(f64::NAN, |v| v.as_f64()));
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.terms.get(name).copied()
    }

    pub fn names(&self) -> Vec<&str> {
        self.terms.keys().map(String::as_str).collect()
    }

    pub fn merge(&mut self, other: LossLog) {
        self.terms.extend(other.terms);
    }
}

/// Discriminator scores needed by the level-0 discriminator loss.
pub struct Level0Scores<'a, T: Real> {
    pub real: &'a Tensor<T>,
    pub fake: &'a Tensor<T>,
    /// `D_0(y_0)` on the composited output, with the mask at score resolution.
    pub composite: Option<(&'a Tensor<T>, &'a Tensor<T>)>,
}

/// `L_D0 = hinge_d + consistency` (when enabled).
pub fn d_loss_level0<T: Real>(
    scores: &Level0Scores<'_, T>,
    weights: &LossWeights,
    log: &mut LossLog,
) -> Result<Tensor<T>> {
    let adv = hinge_d(scores.real, scores.fake)?;
    log.record("d0.adv", &adv);
    if !weights.use_consistency {
        log.record("d0.total", &adv);
        return Ok(adv);
    }
    let (d_comp, mask) = scores.composite.ok_or_else(|| {
        Error::input("consistency loss is enabled but no composite scores were given")
    })?;
    let cons = consistency_loss(d_comp, scores.real, scores.fake, mask)?;
    log.record("d0.cons", &cons);
    let total = adv.add(&cons)?;
    log.record("d0.total", &total);
    Ok(total)
}

/// `L_G0 = hinge_g(D_0(x'_0)) + l1(x'_0, x_0)`.
pub fn g_loss_level0<T: Real>(
    fake_scores: &Tensor<T>,
    pred: &Tensor<T>,
    target: &Tensor<T>,
    log: &mut LossLog,
) -> Result<Tensor<T>> {
    let adv = hinge_g(fake_scores);
    log.record("g0.adv", &adv);
    let rec = l1_recon(pred, target)?;
    log.record("g0.l1", &rec);
    let total = adv.add(&rec)?;
    log.record("g0.total", &total);
    Ok(total)
}

/// Inputs to both level-0 losses.
pub struct Level0Batch<'a, T: Real> {
    pub target: &'a Tensor<T>,
    pub pred: &'a Tensor<T>,
    pub scores: Level0Scores<'a, T>,
}

/// `(L_D0, L_G0)` with every term recorded in the returned log.
pub fn total_losses_level0<T: Real>(
    batch: &Level0Batch<'_, T>,
    weights: &LossWeights,
) -> Result<(Tensor<T>, Tensor<T>, LossLog)> {
    let mut log = LossLog::default();
    let d = d_loss_level0(&batch.scores, weights, &mut log)?;
    let g = g_loss_level0(batch.scores.fake, batch.pred, batch.target, &mut log)?;
    Ok((d, g, log))
}

/// `L_Di = hinge_d`.
pub fn d_loss_level_i<T: Real>(
    real_scores: &Tensor<T>,
    fake_scores: &Tensor<T>,
    level: usize,
    log: &mut LossLog,
) -> Result<Tensor<T>> {
    let adv = hinge_d(real_scores, fake_scores)?;
    log.record(&format!("d{level}.adv"), &adv);
    log.record(&format!("d{level}.total"), &adv);
    Ok(adv)
}

/// `L_Gi = λ_a hinge_g + Σ_{x''_i, x'_i} (λ_r l1 + λ_p perceptual + λ_s style)`.
/// `coarse` (`x'_i`) is supervised only when two-stage refinement is on.
#[allow(clippy::too_many_arguments)]
pub fn g_loss_level_i<T: Real>(
    fake_scores: &Tensor<T>,
    refined: &Tensor<T>,
    coarse: Option<&Tensor<T>>,
    target: &Tensor<T>,
    level: usize,
    weights: &LossWeights,
    extractor: &dyn FeatureExtractor<T>,
    log: &mut LossLog,
) -> Result<Tensor<T>> {
    let style_w = weights.style_for(level)?;
    let adv = hinge_g(fake_scores);
    log.record(&format!("g{level}.adv"), &adv);
    let mut total = adv.scale(weights.adversarial);

    let target_features = extractor.extract(target).map_err(|e| match e {
        Error::Dependency(_) => e,
        other => Error::Dependency(format!("extractor {} failed: {other}", extractor.name())),
    })?;
    let mut outputs = vec![("refined", refined)];
    if weights.two_stage {
        let coarse = coarse.ok_or_else(|| {
            Error::input("two-stage refinement is enabled but no coarse output was given")
        })?;
        outputs.push(("coarse", coarse));
    }
    for (tag, out) in outputs {
        same_shape(out, target, "g_loss_level_i")?;
        let features = extractor.extract(out).map_err(|e| match e {
            Error::Dependency(_) => e,
            other => Error::Dependency(format!("extractor {} failed: {other}", extractor.name())),
        })?;
        let rec = l1_recon(out, target)?;
        let per = perceptual_from_features(&features, &target_features)?;
        let sty = style_from_features(&features, &target_features)?;
        log.record(&format!("g{level}.{tag}.l1"), &rec);
        log.record(&format!("g{level}.{tag}.perceptual"), &per);
        log.record(&format!("g{level}.{tag}.style"), &sty);
        total = total
            .add(&rec.scale(weights.recon))?
            .add(&per.scale(weights.perceptual))?
            .add(&sty.scale(style_w))?;
    }
    log.record(&format!("g{level}.total"), &total);
    Ok(total)
}

/// Inputs to both level-`i` losses.
pub struct LevelIBatch<'a, T: Real> {
    pub target: &'a Tensor<T>,
    pub refined: &'a Tensor<T>,
    pub coarse: Option<&'a Tensor<T>>,
    pub real_scores: &'a Tensor<T>,
    pub fake_scores: &'a Tensor<T>,
}

/// `(L_Di, L_Gi)` with every term recorded in the returned log.
pub fn total_losses_level_i<T: Real>(
    batch: &LevelIBatch<'_, T>,
    level: usize,
    weights: &LossWeights,
    extractor: &dyn FeatureExtractor<T>,
) -> Result<(Tensor<T>, Tensor<T>, LossLog)> {
    let mut log = LossLog::default();
    let d = d_loss_level_i(batch.real_scores, batch.fake_scores, level, &mut log)?;
    let g = g_loss_level_i(
        batch.fake_scores,
        batch.refined,
        batch.coarse,
        batch.target,
        level,
        weights,
        extractor,
        &mut log,
    )?;
    Ok((d, g, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(data: Vec<f64>, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_vec(data, shape).unwrap()
    }

    #[test]
    fn hinge_margins() {
        let two = Tensor::<f64>::full(&[2, 1, 3, 3], 2.0);
        let m_two = Tensor::<f64>::full(&[2, 1, 3, 3], -2.0);
        let zero = Tensor::<f64>::zeros(&[2, 1, 3, 3]);
        assert_eq!(hinge_d(&two, &m_two).unwrap().scalar().unwrap(), 0.0);
        assert_eq!(hinge_d(&zero, &zero).unwrap().scalar().unwrap(), 2.0);
        assert_eq!(hinge_g(&Tensor::<f64>::ones(&[1, 1, 2, 2])).scalar().unwrap(), -1.0);
        assert_eq!(hinge_g(&zero).scalar().unwrap(), 0.0);
    }

    #[test]
    fn consistency_trivial_cases() {
        let real = t(vec![0.3, -1.0, 2.0, 0.5], &[1, 1, 2, 2]);
        let fake = t(vec![1.3, 0.2, -0.7, 0.1], &[1, 1, 2, 2]);
        let zero = Tensor::<f64>::zeros(&[1, 1, 2, 2]);
        // empty mask: y = x so D(y) = D(x)
        assert_eq!(consistency_loss(&real, &real, &fake, &zero).unwrap().scalar().unwrap(), 0.0);
        let mask = t(vec![1.0, 0.0, 1.0, 0.0], &[1, 1, 2, 2]);
        assert_eq!(consistency_loss(&real, &real, &real, &mask).unwrap().scalar().unwrap(), 0.0);
        let bad = Tensor::<f64>::zeros(&[1, 1, 3, 3]);
        assert!(matches!(
            consistency_loss(&real, &real, &fake, &bad),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn l1_and_identity_perceptual() {
        let a = Tensor::<f64>::full(&[1, 3, 4, 4], 0.25);
        let b = Tensor::<f64>::full(&[1, 3, 4, 4], 0.75);
        assert_eq!(l1_recon(&a, &a).unwrap().scalar().unwrap(), 0.0);
        assert_eq!(l1_recon(&a, &b).unwrap().scalar().unwrap(), 0.5);
        let p = perceptual_loss(&a, &b, &IdentityExtractor).unwrap();
        assert_eq!(p.scalar().unwrap(), 0.5);
    }

    #[test]
    fn gram_closed_forms() {
        let c = Tensor::<f64>::full(&[1, 1, 3, 3], 0.5);
        assert!((c.gram().unwrap().scalar().unwrap() - 0.25).abs() < 1e-15);
        let mut d = vec![0.0; 2 * 4];
        d[0] = 1.0;
        d[1] = 2.0;
        d[6] = 3.0;
        let g = t(d, &[1, 2, 2, 2]).gram().unwrap();
        assert_eq!(g.at(&[0, 0, 1]), 0.0);
        assert_eq!(g.at(&[0, 1, 0]), 0.0);
    }

    #[test]
    fn style_weight_index() {
        let w = LossWeights::default();
        assert_eq!(w.style_for(1).unwrap(), 1.0);
        assert_eq!(w.style_for(4).unwrap(), 250.0);
        assert!(w.style_for(0).is_err());
        assert!(w.style_for(5).is_err());
        let mut neg = w.clone();
        neg.recon = -1.0;
        assert!(neg.validate().is_err());
    }

    struct Failing;
    impl FeatureExtractor<f64> for Failing {
        fn name(&self) -> &str {
            "failing"
        }
        fn extract(&self, _: &Tensor<f64>) -> Result<FeatureStack<f64>> {
            Err(Error::input("boom"))
        }
    }

    #[test]
    fn extractor_failure_is_dependency_error() {
        let a = Tensor::<f64>::zeros(&[1, 3, 4, 4]);
        assert!(matches!(perceptual_loss(&a, &a, &Failing), Err(Error::Dependency(_))));
        assert!(matches!(style_loss(&a, &a, &Failing), Err(Error::Dependency(_))));
    }
}
