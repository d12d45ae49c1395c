//! Progressive level-by-level training, checkpoints and pyramid inference.

pub mod adam;
pub mod checkpoint;
pub mod inference;

use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{level_dir, Manifest};
pub use inference::{infer_pyramid, run_chain, run_level, InferenceOutput, LevelOutput, PyramidModel};

use crate::data::{center_square_crop, random_square_crop, rgb_to_tensor, save_rgb, stack, tensor_to_rgb, ImageDataset};
use crate::error::{Error, Result};
use crate::losses::{
    d_loss_level0, d_loss_level_i, g_loss_level0, g_loss_level_i, FeatureExtractor, IdentityExtractor, Level0Scores,
    LossLog, LossWeights, RandomConvExtractor, Vgg16Extractor,
};
use crate::mask::{FreeformParams, Mask, MaskKind, MaskSpec};
use crate::networks::{ContentGenerator, Generator, NetworkWidths, PatchDiscriminator, TextureGenerator};
use crate::params::Parameterized;
use crate::pyramid::{build_pyramid, composite, PyramidLevel};
use crate::tensor::{no_grad, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr_g: f64,
    pub lr_d: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr_g: 1e-4,
            lr_d: 4e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn generator(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr_g,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn discriminator(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr_d,
            ..self.generator()
        }
    }
}

/// Share of center masks per batch; the rest are free-form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskMix {
    pub center_fraction: f64,
    pub freeform: FreeformParams,
}

impl Default for MaskMix {
    fn default() -> Self {
        MaskMix {
            center_fraction: 0.5,
            freeform: FreeformParams::default(),
        }
    }
}

impl MaskMix {
    pub fn sample<R: Rng + ?Sized>(&self, size: usize, rng: &mut R) -> Result<Mask> {
        let spec = if rng.random::<f64>() < self.center_fraction {
            MaskSpec::center()
        } else {
            MaskSpec {
                kind: MaskKind::Freeform(self.freeform.clone()),
                seed: rng.random(),
            }
        };
        spec.generate(size, size)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExtractorKind {
    Vgg16,
    RandomConv,
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractorConfig {
    pub kind: ExtractorKind,
    /// VGG-16 safetensors file.
    pub weights: PathBuf,
    pub seed: u64,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        ExtractorConfig {
            kind: ExtractorKind::Vgg16,
            weights: PathBuf::from("weights/vgg16.safetensors"),
            seed: RandomConvExtractor::<f32>::DEFAULT_SEED,
        }
    }
}

impl ExtractorConfig {
    pub fn build(&self) -> Result<Box<dyn FeatureExtractor<f32>>> {
        Ok(match self.kind {
            ExtractorKind::Vgg16 => Box::new(Vgg16Extractor::load(&self.weights)?),
            ExtractorKind::RandomConv => Box::new(RandomConvExtractor::new(self.seed, [8, 16, 32])),
            ExtractorKind::Identity => Box::new(IdentityExtractor),
        })
    }
}

/// Everything needed to train a pyramid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub dataset_root: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub seed: u64,
    pub base_resolution: usize,
    pub levels: usize,
    pub scale_factor: usize,
    /// Batch size per level; a single entry applies to every level.
    pub batch_size: Vec<usize>,
    /// Training steps per level; a single entry applies to every level.
    pub steps: Vec<u64>,
    pub widths: NetworkWidths,
    pub optimizer: OptimizerConfig,
    pub masks: MaskMix,
    pub losses: LossWeights,
    pub extractor: ExtractorConfig,
    pub power_iterations: usize,
    pub log_every: u64,
    pub eval_every: u64,
    pub sample_every: u64,
    pub checkpoint_every: u64,
    /// Training images (with fixed masks) used for the masked-region L1 curve.
    pub eval_images: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dataset_root: PathBuf::from("data/train"),
            checkpoint_dir: PathBuf::from("checkpoints"),
            seed: 0,
            base_resolution: 64,
            levels: 5,
            scale_factor: 2,
            batch_size: vec![4],
            steps: vec![2000],
            widths: NetworkWidths::default(),
            optimizer: OptimizerConfig::default(),
            masks: MaskMix::default(),
            losses: LossWeights::default(),
            extractor: ExtractorConfig::default(),
            power_iterations: 1,
            log_every: 50,
            eval_every: 250,
            sample_every: 500,
            checkpoint_every: 500,
            eval_images: 8,
        }
    }
}

fn parse_override_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key v was just written"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_toml_with_overrides(text, &[])
    }

    /// Parses `text` after applying `dotted.key = value` overrides; values
    /// are read as TOML literals, falling back to plain strings.
    pub fn from_toml_with_overrides(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e| Error::input(format!("invalid config: {e}")))?;
        for (key, raw) in overrides {
            let mut parts: Vec<&str> = key.split('.').collect();
            let last = parts.pop().filter(|k| !k.is_empty()).ok_or_else(|| Error::input(format!("empty override key {key:?}")))?;
            let mut node = &mut table;
            for p in parts {
                let entry = node
                    .entry(p.to_string())
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()));
                node = entry
                    .as_table_mut()
                    .ok_or_else(|| Error::input(format!("override {key}: {p} is not a table")))?;
            }
            node.insert(last.to_string(), parse_override_value(raw));
        }
        let cfg: TrainConfig = table
            .try_into()
            .map_err(|e| Error::input(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>, overrides: &[(String, String)]) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_with_overrides(&text, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::input(format!("cannot serialize config: {e}")))
    }

    pub fn full_resolution(&self) -> usize {
        self.resolution(self.levels.saturating_sub(1))
    }

    pub fn resolution(&self, level: usize) -> usize {
        self.base_resolution * self.scale_factor.pow(level as u32)
    }

    fn per_level<V: Copy>(values: &[V], level: usize) -> V {
        if values.len() == 1 {
            values[0]
        } else {
            values[level]
        }
    }

    pub fn batch_for(&self, level: usize) -> usize {
        Self::per_level(&self.batch_size, level)
    }

    pub fn steps_for(&self, level: usize) -> u64 {
        Self::per_level(&self.steps, level)
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.scale_factor < 2 || self.base_resolution == 0 {
            return Err(Error::input("levels, base_resolution must be positive and scale_factor >= 2"));
        }
        for (name, len) in [("batch_size", self.batch_size.len()), ("steps", self.steps.len())] {
            if len != 1 && len != self.levels {
                return Err(Error::input(format!(
                    "{name} needs 1 or {} entries, got {len}",
                    self.levels
                )));
            }
        }
        if self.batch_size.contains(&0) || self.steps.contains(&0) {
            return Err(Error::input("batch sizes and step counts must be positive"));
        }
        if self.widths.generator < 2 || self.widths.generator % 2 != 0 || self.widths.discriminator == 0 {
            return Err(Error::input("generator width must be even and >= 2, discriminator width >= 1"));
        }
        for i in 1..self.levels {
            if self.resolution(i) % 16 != 0 {
                return Err(Error::input(format!(
                    "level {i} resolution {} is not divisible by 16",
                    self.resolution(i)
                )));
            }
        }
        if self.levels > 5 {
            return Err(Error::input("at most four texture levels are supported"));
        }
        if !(0.0..=1.0).contains(&self.masks.center_fraction) {
            return Err(Error::input("masks.center_fraction must lie in [0, 1]"));
        }
        self.losses.validate()
    }

    fn level_seed(&self, level: usize, stream: u64) -> u64 {
        self.seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add((level as u64) << 32 | stream)
    }
}

/// Generator, discriminator and optimizer state of one level.
#[derive(Clone, Debug)]
pub struct LevelBundle {
    pub level: usize,
    pub generator: Generator<f32>,
    pub discriminator: PatchDiscriminator<f32>,
    pub opt_g: Adam,
    pub opt_d: Adam,
    pub step: u64,
}

impl LevelBundle {
    pub fn new(level: usize, config: &TrainConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.level_seed(level, 1));
        let widths = config.widths;
        let (generator, mut discriminator) = if level == 0 {
            let base = config.base_resolution;
            (
                Generator::Content(ContentGenerator::new(widths, Some((base, base)), &mut rng)),
                PatchDiscriminator::content(widths, &mut rng),
            )
        } else {
            (
                Generator::Texture(TextureGenerator::new(widths, !config.losses.two_stage, &mut rng)),
                PatchDiscriminator::texture(widths, &mut rng),
            )
        };
        for s in &mut discriminator.spectral {
            s.power_iterations = config.power_iterations.max(1);
        }
        LevelBundle {
            level,
            generator,
            discriminator,
            opt_g: Adam::new(config.optimizer.generator()),
            opt_d: Adam::new(config.optimizer.discriminator()),
            step: 0,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.generator.all_finite() && self.discriminator.all_finite()
    }
}

fn manifest_for(config: &TrainConfig, level: usize) -> Manifest {
    Manifest {
        format_version: checkpoint::FORMAT_VERSION,
        level,
        levels: config.levels,
        scale_factor: config.scale_factor,
        resolution: config.resolution(level),
        base_resolution: config.base_resolution,
        full_resolution: config.full_resolution(),
        generator: if level == 0 { "content" } else { "texture" }.into(),
        widths: config.widths,
        one_stage: level > 0 && !config.losses.two_stage,
        use_consistency: config.losses.use_consistency,
        two_stage: config.losses.two_stage,
        step: 0,
        target_steps: config.steps_for(level),
        seed: config.seed,
        param_count: 0,
        blob: checkpoint::BLOB_FILE.into(),
    }
}

/// Writes `bundle` under `config.checkpoint_dir` with the manifest training would write.
pub fn save_bundle(config: &TrainConfig, bundle: &LevelBundle) -> Result<PathBuf> {
    checkpoint::save_level(&config.checkpoint_dir, bundle, &manifest_for(config, bundle.level))
}

fn load_options(config: &TrainConfig, trainable: bool) -> checkpoint::LoadOptions {
    checkpoint::LoadOptions {
        trainable,
        adam_g: config.optimizer.generator(),
        adam_d: config.optimizer.discriminator(),
        power_iterations: config.power_iterations,
    }
}

/// Training images, decoded once when the dataset is small.
pub struct DataSource {
    dataset: ImageDataset,
    cache: Option<Vec<RgbImage>>,
}

const CACHE_LIMIT: usize = 256;

impl DataSource {
    pub fn open(root: &Path) -> Result<Self> {
        let dataset = ImageDataset::open(root)?;
        if dataset.is_empty() {
            return Err(Error::input(format!("no training images under {}", root.display())));
        }
        let cache = if dataset.len() <= CACHE_LIMIT {
            Some((0..dataset.len()).map(|i| dataset.load(i)).collect::<Result<Vec<_>>>()?)
        } else {
            None
        };
        Ok(DataSource { dataset, cache })
    }

    pub fn len(&self) -> usize {
        self.dataset.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dataset.is_empty()
    }

    pub fn image(&self, index: usize) -> Result<RgbImage> {
        match &self.cache {
            Some(c) => Ok(c[index].clone()),
            None => self.dataset.load(index),
        }
    }
}

/// A random training batch as a full pyramid.
pub fn sample_batch<R: Rng + ?Sized>(
    data: &DataSource,
    config: &TrainConfig,
    batch: usize,
    rng: &mut R,
) -> Result<Vec<PyramidLevel<f32>>> {
    let size = config.full_resolution();
    let mut xs = Vec::with_capacity(batch);
    let mut ms = Vec::with_capacity(batch);
    for _ in 0..batch {
        let img = data.image(rng.random_range(0..data.len()))?;
        xs.push(rgb_to_tensor::<f32>(&random_square_crop(&img, size as u32, rng)));
        ms.push(config.masks.sample(size, rng)?.to_tensor::<f32>());
    }
    let p = build_pyramid(&stack(&xs)?, &stack(&ms)?, config.levels, config.scale_factor)?;
    Ok(p.levels)
}

/// The first `eval_images` training images with fixed masks.
pub fn eval_set(data: &DataSource, config: &TrainConfig) -> Result<Vec<PyramidLevel<f32>>> {
    let size = config.full_resolution();
    let count = config.eval_images.min(data.len()).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(config.level_seed(0, 7));
    let mut xs = Vec::with_capacity(count);
    let mut ms = Vec::with_capacity(count);
    for i in 0..count {
        xs.push(rgb_to_tensor::<f32>(&center_square_crop(&data.image(i)?, size as u32)));
        ms.push(config.masks.sample(size, &mut rng)?.to_tensor::<f32>());
    }
    Ok(build_pyramid(&stack(&xs)?, &stack(&ms)?, config.levels, config.scale_factor)?.levels)
}

/// `Σ |pred − x| · m / (C · Σ m)`: mean absolute error inside the holes.
pub fn masked_l1(pred: &Tensor<f32>, x: &Tensor<f32>, m: &Tensor<f32>) -> Result<f64> {
    let (n, c, h, w) = x.dims4()?;
    if pred.shape() != x.shape() || m.shape() != [n, 1, h, w] {
        return Err(Error::dim("masked_l1: mismatched shapes"));
    }
    let (p, xd, md) = (pred.data(), x.data(), m.data());
    let (mut err, mut count) = (0.0f64, 0.0f64);
    for b in 0..n {
        for ch in 0..c {
            for i in 0..h * w {
                let mv = md[b * h * w + i] as f64;
                if mv > 0.0 {
                    let j = (b * c + ch) * h * w + i;
                    err += mv * (p[j] as f64 - xd[j] as f64).abs();
                    count += mv;
                }
            }
        }
    }
    Ok(if count == 0.0 { 0.0 } else { err / count })
}

fn slice_levels(levels: &[PyramidLevel<f32>], start: usize, len: usize) -> Result<Vec<PyramidLevel<f32>>> {
    levels
        .iter()
        .map(|l| {
            Ok(PyramidLevel {
                x: l.x.narrow(0, start, len)?.detach(),
                z: l.z.narrow(0, start, len)?.detach(),
                m: l.m.narrow(0, start, len)?.detach(),
            })
        })
        .collect()
}

/// Masked-region L1 of level `level` on `eval`, with lower levels from `lower`.
pub fn evaluate_level(
    lower: &[Generator<f32>],
    generator: &Generator<f32>,
    eval: &[PyramidLevel<f32>],
    level: usize,
    batch: usize,
) -> Result<(f64, Vec<LevelOutput>)> {
    no_grad(|| {
        let n = eval[0].x.shape()[0];
        let generator = generator.detached();
        let mut weighted = 0.0;
        let mut holes = 0.0;
        let mut outputs = Vec::new();
        let mut start = 0;
        while start < n {
            let len = batch.min(n - start);
            let part = slice_levels(eval, start, len)?;
            let prev = run_chain(lower, &part)?;
            let out = run_level(&generator, &part[level], prev.last())?;
            let lv = &part[level];
            let count: f64 = lv.m.data().iter().map(|&v| v as f64).sum();
            weighted += masked_l1(&out.pred, &lv.x, &lv.m)? * count;
            holes += count;
            outputs.push(out);
            start += len;
        }
        Ok((if holes == 0.0 { 0.0 } else { weighted / holes }, outputs))
    })
}

/// Loss terms recorded at one step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub terms: LossLog,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: u64,
    pub masked_l1: f64,
}

/// Result of [`train_level`].
#[derive(Clone, Debug)]
pub struct LevelOutcome {
    pub bundle: LevelBundle,
    pub dir: PathBuf,
    pub losses: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
}

impl LevelOutcome {
    pub fn first_eval(&self) -> Option<f64> {
        self.evals.first().map(|e| e.masked_l1)
    }

    pub fn last_eval(&self) -> Option<f64> {
        self.evals.last().map(|e| e.masked_l1)
    }
}

/// Generators of levels `0..level`, loaded frozen from `config.checkpoint_dir`.
pub fn load_lower_levels(config: &TrainConfig, level: usize) -> Result<Vec<Generator<f32>>> {
    (0..level)
        .map(|j| {
            let (manifest, bundle) = checkpoint::load_level(&config.checkpoint_dir, j, load_options(config, false))
                .map_err(|e| match e {
                    Error::Dependency(msg) => {
                        Error::Dependency(format!("level {level} needs a trained level {j}: {msg}"))
                    }
                    other => other,
                })?;
            if manifest.levels != config.levels || manifest.scale_factor != config.scale_factor {
                return Err(Error::Dependency(format!(
                    "level {j} checkpoint was trained for a different pyramid"
                )));
            }
            Ok(bundle.generator.detached())
        })
        .collect()
}

/// One discriminator update followed by one generator update.
pub fn train_step(
    bundle: &mut LevelBundle,
    lower: &[Generator<f32>],
    levels: &[PyramidLevel<f32>],
    weights: &LossWeights,
    extractor: &dyn FeatureExtractor<f32>,
) -> Result<LossLog> {
    let i = bundle.level;
    let lv = &levels[i];
    let mut log = LossLog::default();
    let y_prev = no_grad(|| run_chain(lower, levels))?.pop();

    let (pred, coarse) = match &bundle.generator {
        Generator::Content(g) => (g.forward(&lv.z, &lv.m)?, None),
        Generator::Texture(g) => {
            let prev = y_prev
                .as_ref()
                .ok_or_else(|| Error::Dependency(format!("level {i} needs frozen lower levels")))?;
            let out = g.forward(&lv.z, &lv.m, prev)?;
            (out.refined, out.coarse)
        }
    };

    // Discriminator update.
    let sw = bundle.discriminator.spectral_weights()?;
    let d = &bundle.discriminator;
    let fake = pred.detach();
    let d_real = d.forward_with(&lv.x, &sw)?;
    let d_fake = d.forward_with(&fake, &sw)?;
    let d_loss = if i == 0 {
        let d_comp = if weights.use_consistency {
            let y = composite(&lv.z, &lv.m, &fake)?;
            Some(d.forward_with(&y, &sw)?)
        } else {
            None
        };
        let scores = Level0Scores {
            real: &d_real,
            fake: &d_fake,
            composite: d_comp.as_ref().map(|c| (c, &lv.m)),
        };
        d_loss_level0(&scores, weights, &mut log)?
    } else {
        d_loss_level_i(&d_real, &d_fake, i, &mut log)?
    };
    let d_value = d_loss.scalar()?;
    if !d_value.is_finite() {
        return Err(Error::Divergence {
            level: i,
            step: bundle.step,
            detail: format!("discriminator loss is {d_value}"),
        });
    }
    let grads = d_loss.backward()?;
    bundle.opt_d.step(&mut bundle.discriminator, &grads);

    // Generator update against the updated, frozen discriminator.
    let d_frozen = bundle.discriminator.detached();
    let sw = d_frozen.spectral_weights_frozen()?;
    let g_scores = d_frozen.forward_with(&pred, &sw)?;
    let g_loss = if i == 0 {
        g_loss_level0(&g_scores, &pred, &lv.x, &mut log)?
    } else {
        g_loss_level_i(&g_scores, &pred, coarse.as_ref(), &lv.x, i, weights, extractor, &mut log)?
    };
    let g_value = g_loss.scalar()?;
    if !g_value.is_finite() {
        return Err(Error::Divergence {
            level: i,
            step: bundle.step,
            detail: format!("generator loss is {g_value}"),
        });
    }
    let grads = g_loss.backward()?;
    bundle.opt_g.step(&mut bundle.generator, &grads);
    bundle.step += 1;
    if !bundle.all_finite() {
        return Err(Error::Divergence {
            level: i,
            step: bundle.step,
            detail: "non-finite parameters after update".into(),
        });
    }
    Ok(log)
}

/// Side-by-side `z | y | x` rows for up to four samples.
pub fn sample_grid(level: &PyramidLevel<f32>, y: &Tensor<f32>) -> Result<RgbImage> {
    let (n, _, h, w) = level.x.dims4()?;
    let rows = n.min(4);
    let mut grid = RgbImage::new(3 * w as u32, (rows * h) as u32);
    for r in 0..rows {
        for (col, t) in [&level.z, y, &level.x].into_iter().enumerate() {
            let img = tensor_to_rgb(t, r)?;
            image::imageops::replace(&mut grid, &img, (col * w) as i64, (r * h) as i64);
        }
    }
    Ok(grid)
}

fn append_csv(path: &Path, header: &str, lines: &[String]) -> Result<()> {
    use std::io::Write as _;
    let new = !path.exists();
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    if new {
        writeln!(f, "{header}").map_err(|e| Error::io(path, e))?;
    }
    for l in lines {
        writeln!(f, "{l}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Trains level `level` to `config.steps_for(level)` steps, resuming from an
/// existing checkpoint of that level when present.
pub fn train_level(level: usize, config: &TrainConfig) -> Result<LevelOutcome> {
    config.validate()?;
    if level >= config.levels {
        return Err(Error::input(format!(
            "level {level} is outside a {}-level pyramid",
            config.levels
        )));
    }
    let lower = load_lower_levels(config, level)?;
    let data = DataSource::open(&config.dataset_root)?;
    let extractor: Box<dyn FeatureExtractor<f32>> = if level == 0 {
        Box::new(IdentityExtractor)
    } else {
        config.extractor.build()?
    };
    let dir = level_dir(&config.checkpoint_dir, level);
    let mut bundle = if dir.join(checkpoint::MANIFEST_FILE).exists() {
        let (_, b) = checkpoint::load_level(&config.checkpoint_dir, level, load_options(config, true))?;
        log::info!("level {level}: resuming from step {}", b.step);
        b
    } else {
        LevelBundle::new(level, config)
    };
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    fs::write(dir.join("config.toml"), config.to_toml()?).map_err(|e| Error::io(&dir, e))?;
    let manifest = manifest_for(config, level);
    let target = config.steps_for(level);
    let batch = config.batch_for(level);
    let eval = eval_set(&data, config)?;
    let samples_dir = dir.join("samples");
    let mut rng = ChaCha8Rng::seed_from_u64(config.level_seed(level, 2).wrapping_add(bundle.step));

    let mut losses = Vec::new();
    let mut evals = Vec::new();
    let mut pending_losses: Vec<String> = Vec::new();
    let mut pending_evals: Vec<String> = Vec::new();
    let run_eval = |bundle: &LevelBundle, evals: &mut Vec<EvalRecord>, pending: &mut Vec<String>| -> Result<()> {
        let (l1, outs) = evaluate_level(&lower, &bundle.generator, &eval, level, batch)?;
        log::info!("level {level} step {}: masked L1 {l1:.5}", bundle.step);
        evals.push(EvalRecord {
            step: bundle.step,
            masked_l1: l1,
        });
        pending.push(format!("{},{l1}", bundle.step));
        if config.sample_every > 0 && (bundle.step % config.sample_every == 0 || bundle.step == target) {
            fs::create_dir_all(&samples_dir).map_err(|e| Error::io(&samples_dir, e))?;
            let first = slice_levels(&eval, 0, outs[0].y.shape()[0])?;
            let grid = sample_grid(&first[level], &outs[0].y)?;
            save_rgb(&grid, samples_dir.join(format!("step_{:06}.png", bundle.step)))?;
        }
        Ok(())
    };
    let flush = |losses: &mut Vec<String>, evals: &mut Vec<String>| -> Result<()> {
        append_csv(&dir.join("losses.csv"), "step,term,value", losses)?;
        append_csv(&dir.join("eval.csv"), "step,masked_l1", evals)?;
        losses.clear();
        evals.clear();
        Ok(())
    };

    if bundle.step < target {
        run_eval(&bundle, &mut evals, &mut pending_evals)?;
    }
    while bundle.step < target {
        let levels = sample_batch(&data, config, batch, &mut rng)?;
        let log = train_step(&mut bundle, &lower, &levels[..=level], &config.losses, extractor.as_ref())?;
        let step = bundle.step;
        if config.log_every > 0 && (step % config.log_every == 0 || step == 1 || step == target) {
            log::info!(
                "level {level} step {step}: {}",
                log.terms
                    .iter()
                    .map(|(k, v)| format!("{k}={v:.4}"))
                    .collect::<Vec<_>>()
                    .join(" ")
            );
            pending_losses.extend(log.terms.iter().map(|(k, v)| format!("{step},{k},{v}")));
        }
        losses.push(StepRecord { step, terms: log });
        if (config.eval_every > 0 && step % config.eval_every == 0) || step == target {
            run_eval(&bundle, &mut evals, &mut pending_evals)?;
        }
        if (config.checkpoint_every > 0 && step % config.checkpoint_every == 0) || step == target {
            checkpoint::save_level(&config.checkpoint_dir, &bundle, &manifest)?;
            flush(&mut pending_losses, &mut pending_evals)?;
        }
    }
    if !dir.join(checkpoint::MANIFEST_FILE).exists() {
        checkpoint::save_level(&config.checkpoint_dir, &bundle, &manifest)?;
    }
    flush(&mut pending_losses, &mut pending_evals)?;
    Ok(LevelOutcome {
        bundle,
        dir,
        losses,
        evals,
    })
}

/// Whether `<checkpoint_dir>/level_<i>` holds a checkpoint that reached its step target.
pub fn level_complete(config: &TrainConfig, level: usize) -> bool {
    checkpoint::read_manifest(&level_dir(&config.checkpoint_dir, level))
        .map(|m| m.step >= config.steps_for(level))
        .unwrap_or(false)
}

/// Trains every level in order, skipping levels whose checkpoints are complete.
pub fn train_all(config: &TrainConfig) -> Result<Vec<PathBuf>> {
    config.validate()?;
    let mut dirs = Vec::with_capacity(config.levels);
    for level in 0..config.levels {
        if level_complete(config, level) {
            log::info!("level {level}: checkpoint complete, skipping");
        } else {
            train_level(level, config)?;
        }
        dirs.push(level_dir(&config.checkpoint_dir, level));
    }
    Ok(dirs)
}
