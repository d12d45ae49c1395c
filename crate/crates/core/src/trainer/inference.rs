//! Coarse-to-fine inference through every pyramid level.

use std::path::{Path, PathBuf};

use super::adam::AdamConfig;
use super::checkpoint::{level_dir, load_level, read_manifest, LoadOptions, Manifest};
use crate::error::{Error, Result};
use crate::metrics::Inpainter;
use crate::networks::Generator;
use crate::params::Parameterized;
use crate::pyramid::{build_pyramid, composite, PyramidLevel};
use crate::tensor::{no_grad, Tensor};

/// Outputs of one generator at one level.
#[derive(Clone, Debug)]
pub struct LevelOutput {
    /// Raw prediction (`x'_0` at level 0, `x''_i` above).
    pub pred: Tensor<f32>,
    /// Super-resolution output `x'_i` of two-stage texture generators.
    pub coarse: Option<Tensor<f32>>,
    /// Prediction composited into the known pixels.
    pub y: Tensor<f32>,
}

/// Runs one level. Level 0 ignores `y_prev`; content generators run at any size.
pub fn run_level(
    generator: &Generator<f32>,
    level: &PyramidLevel<f32>,
    y_prev: Option<&Tensor<f32>>,
) -> Result<LevelOutput> {
    let (pred, coarse) = match generator {
        Generator::Content(g) => (g.forward_any_size(&level.z, &level.m)?, None),
        Generator::Texture(g) => {
            let prev = y_prev.ok_or_else(|| {
                Error::Dependency("texture level needs the result of the level below".into())
            })?;
            let out = g.forward(&level.z, &level.m, prev)?;
            (out.refined, out.coarse)
        }
    };
    let y = composite(&level.z, &level.m, &pred)?;
    Ok(LevelOutput { pred, coarse, y })
}

/// Runs `generators` over the first `generators.len()` levels and returns
/// the composited result of each.
pub fn run_chain(generators: &[Generator<f32>], levels: &[PyramidLevel<f32>]) -> Result<Vec<Tensor<f32>>> {
    if generators.len() > levels.len() {
        return Err(Error::dim(format!(
            "{} generators for a {}-level pyramid",
            generators.len(),
            levels.len()
        )));
    }
    let mut out: Vec<Tensor<f32>> = Vec::with_capacity(generators.len());
    for (g, level) in generators.iter().zip(levels) {
        let y = run_level(g, level, out.last())?.y;
        out.push(y);
    }
    Ok(out)
}

/// Full-resolution result plus the composited output of every level.
#[derive(Clone, Debug)]
pub struct InferenceOutput {
    pub image: Tensor<f32>,
    pub intermediates: Vec<Tensor<f32>>,
}

/// Frozen generators of a complete pyramid.
#[derive(Clone, Debug)]
pub struct PyramidModel {
    pub model_id: String,
    pub scale_factor: usize,
    pub generators: Vec<Generator<f32>>,
    pub manifests: Vec<Manifest>,
    pub root: Option<PathBuf>,
}

impl PyramidModel {
    /// Loads `level_0 .. level_{L-1}` from `root` as constants.
    pub fn load(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref();
        let first = read_manifest(&level_dir(root, 0))?;
        let opts = LoadOptions {
            trainable: false,
            adam_g: AdamConfig {
                lr: 0.0,
                beta1: 0.0,
                beta2: 0.0,
                eps: 0.0,
            },
            adam_d: AdamConfig {
                lr: 0.0,
                beta1: 0.0,
                beta2: 0.0,
                eps: 0.0,
            },
            power_iterations: 1,
        };
        let mut generators = Vec::with_capacity(first.levels);
        let mut manifests = Vec::with_capacity(first.levels);
        for i in 0..first.levels {
            let (manifest, bundle) = load_level(root, i, opts).map_err(|e| match e {
                Error::Dependency(msg) => Error::Dependency(format!(
                    "incomplete checkpoints under {} (level {i} of {}): {msg}",
                    root.display(),
                    first.levels
                )),
                other => other,
            })?;
            if manifest.levels != first.levels || manifest.scale_factor != first.scale_factor {
                return Err(Error::Dependency(format!(
                    "level {i} under {} was trained for a different pyramid",
                    root.display()
                )));
            }
            generators.push(bundle.generator.detached());
            manifests.push(manifest);
        }
        let model_id = root
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "pyramidfill".into());
        Ok(PyramidModel {
            model_id,
            scale_factor: first.scale_factor,
            generators,
            manifests,
            root: Some(root.to_path_buf()),
        })
    }

    pub fn from_generators(model_id: impl Into<String>, scale_factor: usize, generators: Vec<Generator<f32>>) -> Self {
        PyramidModel {
            model_id: model_id.into(),
            scale_factor,
            generators: generators.iter().map(|g| g.detached()).collect(),
            manifests: Vec::new(),
            root: None,
        }
    }

    pub fn levels(&self) -> usize {
        self.generators.len()
    }

    /// Image sides must be divisible by `r^(L-1)`.
    pub fn size_multiple(&self) -> usize {
        self.scale_factor.pow(self.levels().saturating_sub(1) as u32)
    }

    /// Resolution the finest level was trained at, if known.
    pub fn full_resolution(&self) -> Option<usize> {
        self.manifests.first().map(|m| m.full_resolution)
    }

    pub fn infer(&self, x_masked: &Tensor<f32>, m: &Tensor<f32>) -> Result<InferenceOutput> {
        infer_pyramid(x_masked, m, self)
    }
}

/// Builds the pyramid of `x_masked`, runs level 0 and then every texture
/// level on the previous composited result. Known pixels of the output are
/// copied from the input unchanged.
pub fn infer_pyramid(x_masked: &Tensor<f32>, m: &Tensor<f32>, model: &PyramidModel) -> Result<InferenceOutput> {
    if model.generators.is_empty() {
        return Err(Error::Dependency("model has no levels".into()));
    }
    no_grad(|| {
        let pyramid = build_pyramid(x_masked, m, model.levels(), model.scale_factor)?;
        let intermediates = run_chain(&model.generators, &pyramid.levels)?;
        let image = intermediates.last().expect("at least one level").clone();
        Ok(InferenceOutput { image, intermediates })
    })
}

impl Inpainter for PyramidModel {
    fn model_id(&self) -> String {
        self.model_id.clone()
    }

    fn size_multiple(&self) -> usize {
        PyramidModel::size_multiple(self)
    }

    fn inpaint(&self, z: &Tensor<f32>, m: &Tensor<f32>) -> Result<Tensor<f32>> {
        Ok(self.infer(z, m)?.image)
    }
}
