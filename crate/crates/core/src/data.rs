//! Image directories, raster/tensor conversion and training batches.

use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::RgbImage;
use rand::Rng;
use walkdir::WalkDir;

use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::tensor::{Real, Tensor};

const EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "bmp"];

/// `[1, 3, H, W]` tensor in `[0, 1]`.
pub fn rgb_to_tensor<T: Real>(img: &RgbImage) -> Tensor<T> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![T::zero(); 3 * h * w];
    let scale = T::of(1.0 / 255.0);
    for (x, y, p) in img.enumerate_pixels() {
        let idx = y as usize * w + x as usize;
        for c in 0..3 {
            data[c * h * w + idx] = T::of(p.0[c] as f64) * scale;
        }
    }
    Tensor::from_vec(data, &[1, 3, h, w]).expect("rgb tensor shape")
}

/// Inverse of [`rgb_to_tensor`] for sample `index` of a batch; values are
/// clamped to `[0, 1]` and rounded.
pub fn tensor_to_rgb<T: Real>(t: &Tensor<T>, index: usize) -> Result<RgbImage> {
    let (n, c, h, w) = t.dims4()?;
    if c != 3 || index >= n {
        return Err(Error::dim(format!(
            "cannot read image {index} from a {:?} tensor",
            t.shape()
        )));
    }
    let base = index * 3 * h * w;
    let d = &t.data()[base..base + 3 * h * w];
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let idx = y as usize * w + x as usize;
        let px = |c: usize| (d[c * h * w + idx].as_f64().clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    }))
}

/// Stacks `[1, C, H, W]` tensors into one `[N, C, H, W]` batch.
pub fn stack<T: Real>(items: &[Tensor<T>]) -> Result<Tensor<T>> {
    let refs: Vec<&Tensor<T>> = items.iter().collect();
    Tensor::cat(&refs, 0)
}

/// Sample `index` of a batch as a `[1, C, H, W]` tensor.
pub fn unstack<T: Real>(batch: &Tensor<T>, index: usize) -> Result<Tensor<T>> {
    Ok(batch.narrow(0, index, 1)?.detach())
}

pub fn load_rgb(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    image::open(path)
        .map(|img| img.to_rgb8())
        .map_err(|e| Error::input(format!("cannot read image {}: {e}", path.display())))
}

pub fn save_rgb(img: &RgbImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    img.save(path)
        .map_err(|e| Error::input(format!("cannot write image {}: {e}", path.display())))
}

/// Square crop of side `size` at a random offset; smaller images are first
/// resized so their short side equals `size`.
pub fn random_square_crop<R: Rng + ?Sized>(img: &RgbImage, size: u32, rng: &mut R) -> RgbImage {
    let img = ensure_min_side(img, size);
    let x = rng.random_range(0..=img.width() - size);
    let y = rng.random_range(0..=img.height() - size);
    imageops::crop_imm(&img, x, y, size, size).to_image()
}

/// Deterministic centered square crop, used for evaluation.
pub fn center_square_crop(img: &RgbImage, size: u32) -> RgbImage {
    let img = ensure_min_side(img, size);
    let x = (img.width() - size) / 2;
    let y = (img.height() - size) / 2;
    imageops::crop_imm(&img, x, y, size, size).to_image()
}

fn ensure_min_side(img: &RgbImage, size: u32) -> RgbImage {
    let short = img.width().min(img.height());
    if short >= size {
        return img.clone();
    }
    let scale = size as f64 / short as f64;
    let w = ((img.width() as f64 * scale).ceil() as u32).max(size);
    let h = ((img.height() as f64 * scale).ceil() as u32).max(size);
    imageops::resize(img, w, h, FilterType::Triangle)
}

/// A directory of images scanned recursively, ordered by path.
#[derive(Clone, Debug)]
pub struct ImageDataset {
    root: PathBuf,
    paths: Vec<PathBuf>,
}

impl ImageDataset {
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        if !root.is_dir() {
            return Err(Error::input(format!(
                "dataset root {} is not a directory",
                root.display()
            )));
        }
        let mut paths: Vec<PathBuf> = WalkDir::new(&root)
            .follow_links(true)
            .into_iter()
            .filter_map(|e| e.ok())
            .filter(|e| e.file_type().is_file())
            .map(|e| e.into_path())
            .filter(|p| {
                p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
            })
            .collect();
        paths.sort();
        Ok(ImageDataset { root, paths })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    pub fn paths(&self) -> &[PathBuf] {
        &self.paths
    }

    pub fn load(&self, index: usize) -> Result<RgbImage> {
        let path = self
            .paths
            .get(index)
            .ok_or_else(|| Error::input(format!("dataset index {index} out of range")))?;
        load_rgb(path)
    }
}

/// A mask applied to an image tensor, as the masked input `z`.
pub fn masked_image<T: Real>(img: &Tensor<T>, mask: &Mask) -> Result<Tensor<T>> {
    crate::pyramid::apply_mask(img, &mask.to_tensor())
}

/// Smooth synthetic image: a two-color linear gradient plus a few soft
/// discs, fully determined by `seed`.
pub fn synthetic_image(seed: u64, size: u32) -> RgbImage {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut color = || [rng.random::<f32>(), rng.random::<f32>(), rng.random::<f32>()];
    let (c0, c1) = (color(), color());
    let discs: Vec<([f32; 3], f32, f32, f32)> = (0..3).map(|_| (color(), 0.0, 0.0, 0.0)).collect();
    let angle = rng.random::<f32>() * std::f32::consts::TAU;
    let discs: Vec<([f32; 3], f32, f32, f32)> = discs
        .into_iter()
        .map(|(c, ..)| (c, rng.random::<f32>(), rng.random::<f32>(), 0.1 + 0.2 * rng.random::<f32>()))
        .collect();
    let (dx, dy) = (angle.cos(), angle.sin());
    let n = size as f32;
    RgbImage::from_fn(size, size, |x, y| {
        let (u, v) = (x as f32 / n, y as f32 / n);
        let t = ((u - 0.5) * dx + (v - 0.5) * dy + 0.5).clamp(0.0, 1.0);
        let mut px = [0.0f32; 3];
        for c in 0..3 {
            px[c] = c0[c] * (1.0 - t) + c1[c] * t;
        }
        for (col, cx, cy, r) in &discs {
            let d = ((u - cx).powi(2) + (v - cy).powi(2)).sqrt();
            let a = (1.0 - (d / r)).clamp(0.0, 1.0).powf(0.5);
            for c in 0..3 {
                px[c] = px[c] * (1.0 - a) + col[c] * a;
            }
        }
        image::Rgb(px.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
    })
}

/// Writes `count` synthetic images as PNG files into `dir`.
pub fn write_synthetic_dataset(dir: &Path, count: usize, size: u32, seed: u64) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    (0..count)
        .map(|i| {
            let path = dir.join(format!("synthetic_{i:03}.png"));
            save_rgb(&synthetic_image(seed.wrapping_add(i as u64), size), &path)?;
            Ok(path)
        })
        .collect()
}
