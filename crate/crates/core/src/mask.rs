//! Binary hole masks: generation, file ingestion and hole-ratio buckets.

use std::f64::consts::PI;
use std::fmt;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// A binary mask, row-major, `1` = hole.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn empty(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn from_bits(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::dim(format!(
                "{} mask values for a {height}x{width} mask",
                data.len()
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::input("mask values must be 0 or 1"));
        }
        Ok(Mask {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[u8] {
        &self.data
    }

    pub fn is_hole(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] == 1
    }

    pub fn set(&mut self, y: usize, x: usize, hole: bool) {
        self.data[y * self.width + x] = hole as u8;
    }

    pub fn hole_count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    /// `[1, 1, H, W]` tensor of zeros and ones.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let d = self.data.iter().map(|&v| if v == 1 { T::one() } else { T::zero() }).collect();
        Tensor::from_vec(d, &[1, 1, self.height, self.width]).expect("mask shape")
    }

    /// Reads a `[1, 1, H, W]` tensor; any positive value is a hole.
    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<Self> {
        let (n, c, h, w) = t.dims4()?;
        if n != 1 || c != 1 {
            return Err(Error::dim(format!("expected a [1, 1, H, W] mask, got {:?}", t.shape())));
        }
        let data = t.data().iter().map(|&v| (v > T::zero()) as u8).collect();
        Ok(Mask {
            height: h,
            width: w,
            data,
        })
    }

    /// 8-bit grayscale raster, 255 = hole.
    pub fn to_gray_image(&self) -> GrayImage {
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            Luma([if self.is_hole(y as usize, x as usize) { 255 } else { 0 }])
        })
    }

    /// Pixels `>= 128` become holes.
    pub fn from_gray_image(img: &GrayImage) -> Self {
        Mask {
            height: img.height() as usize,
            width: img.width() as usize,
            data: img.pixels().map(|p| (p.0[0] >= 128) as u8).collect(),
        }
    }

    /// Nearest-neighbour resampling to `height × width`.
    pub fn resize_nearest(&self, height: usize, width: usize) -> Mask {
        if (height, width) == (self.height, self.width) {
            return self.clone();
        }
        let mut out = Mask::empty(height, width);
        for y in 0..height {
            let sy = (y * self.height) / height;
            for x in 0..width {
                let sx = (x * self.width) / width;
                out.data[y * width + x] = self.data[sy * self.width + sx];
            }
        }
        out
    }

    /// Window `[top, top + height) × [left, left + width)`; outside pixels are known.
    pub fn crop(&self, top: isize, left: isize, height: usize, width: usize) -> Mask {
        let mut out = Mask::empty(height, width);
        for y in 0..height {
            let sy = top + y as isize;
            if sy < 0 || sy >= self.height as isize {
                continue;
            }
            for x in 0..width {
                let sx = left + x as isize;
                if sx >= 0 && sx < self.width as isize {
                    out.data[y * width + x] = self.data[sy as usize * self.width + sx as usize];
                }
            }
        }
        out
    }
}

/// Fraction of hole pixels.
pub fn hole_ratio(mask: &Mask) -> f64 {
    if mask.data.is_empty() {
        return 0.0;
    }
    mask.hole_count() as f64 / mask.data.len() as f64
}

/// Half-open hole-ratio intervals used to group evaluation results.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RatioBucket {
    /// `[0, 0.1)`
    P0To10,
    /// `[0.1, 0.2)`
    P10To20,
    /// `[0.2, 0.3)`
    P20To30,
    /// `[0.3, 0.4)`
    P30To40,
    /// `[0.4, 0.5)`
    P40To50,
    /// `>= 0.5`, reported separately.
    OutOfRange,
}

impl RatioBucket {
    pub const IN_RANGE: [RatioBucket; 5] = [
        RatioBucket::P0To10,
        RatioBucket::P10To20,
        RatioBucket::P20To30,
        RatioBucket::P30To40,
        RatioBucket::P40To50,
    ];

    pub fn label(self) -> &'static str {
        match self {
            RatioBucket::P0To10 => "0-10%",
            RatioBucket::P10To20 => "10-20%",
            RatioBucket::P20To30 => "20-30%",
            RatioBucket::P30To40 => "30-40%",
            RatioBucket::P40To50 => "40-50%",
            RatioBucket::OutOfRange => ">=50%",
        }
    }
}

impl fmt::Display for RatioBucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

pub fn ratio_bucket(ratio: f64) -> RatioBucket {
    // Integer decile avoids 0.3 / 0.1 style rounding at the boundaries.
    let decile = (ratio * 10.0 + 1e-12).floor();
    match decile as i64 {
        i64::MIN..=0 => RatioBucket::P0To10,
        1 => RatioBucket::P10To20,
        2 => RatioBucket::P20To30,
        3 => RatioBucket::P30To40,
        4 => RatioBucket::P40To50,
        _ => RatioBucket::OutOfRange,
    }
}

/// Centered `(H/2) × (W/2)` rectangular hole.
pub fn gen_center_mask(height: usize, width: usize) -> Result<Mask> {
    if height % 2 != 0 || width % 2 != 0 || height == 0 || width == 0 {
        return Err(Error::dim(format!(
            "center masks need even dimensions, got {height}x{width}"
        )));
    }
    if height % 4 != 0 || width % 4 != 0 {
        // Keeps the hole exactly half-size; the offset is floor((H - H/2) / 2).
        log::debug!("center mask on {height}x{width}: hole is not perfectly centered");
    }
    let (hh, hw) = (height / 2, width / 2);
    let (top, left) = ((height - hh) / 2, (width - hw) / 2);
    let mut m = Mask::empty(height, width);
    for y in top..top + hh {
        for x in left..left + hw {
            m.set(y, x, true);
        }
    }
    Ok(m)
}

/// Brush parameters of random free-form masks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FreeformParams {
    /// Inclusive stroke-count range.
    pub strokes: (usize, usize),
    /// Inclusive vertex-count range per stroke.
    pub vertices: (usize, usize),
    /// Maximum per-segment angle perturbation in radians.
    pub angle_range: f64,
    /// Inclusive brush width range in pixels; `None` uses `[12, H/8]`.
    pub width: Option<(usize, usize)>,
    /// Maximum segment length as a fraction of `max(H, W)`.
    pub max_segment_fraction: f64,
}

impl Default for FreeformParams {
    fn default() -> Self {
        FreeformParams {
            strokes: (1, 8),
            vertices: (4, 12),
            angle_range: 2.0 * PI / 5.0,
            width: None,
            max_segment_fraction: 0.125,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum MaskKind {
    Center,
    Freeform(FreeformParams),
    File { path: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    #[serde(flatten)]
    pub kind: MaskKind,
    #[serde(default)]
    pub seed: u64,
}

impl MaskSpec {
    pub fn center() -> Self {
        MaskSpec {
            kind: MaskKind::Center,
            seed: 0,
        }
    }

    pub fn freeform(seed: u64) -> Self {
        MaskSpec {
            kind: MaskKind::Freeform(FreeformParams::default()),
            seed,
        }
    }

    /// Pure function of `(height, width, self)`.
    pub fn generate(&self, height: usize, width: usize) -> Result<Mask> {
        match &self.kind {
            MaskKind::Center => gen_center_mask(height, width),
            MaskKind::Freeform(_) => gen_freeform_mask(height, width, self),
            MaskKind::File { path } => {
                let m = load_mask_file(path)?;
                Ok(m.resize_nearest(height, width))
            }
        }
    }
}

/// Random brush strokes: polylines with perturbed headings, rendered as
/// thick segments with round caps.
pub fn gen_freeform_mask(height: usize, width: usize, spec: &MaskSpec) -> Result<Mask> {
    let MaskKind::Freeform(p) = &spec.kind else {
        return Err(Error::input("gen_freeform_mask needs a freeform mask spec"));
    };
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut mask = Mask::empty(height, width);
    if height == 0 || width == 0 {
        return Ok(mask);
    }
    let (w_lo, w_hi) = p.width.unwrap_or_else(|| {
        let hi = (height / 8).max(1);
        (12.min(hi), hi.max(12.min(hi)))
    });
    let (w_lo, w_hi) = (w_lo.max(1), w_hi.max(w_lo.max(1)));
    let max_len = (p.max_segment_fraction * height.max(width) as f64).max(1.0);
    let strokes = draw_range(&mut rng, p.strokes);
    for _ in 0..strokes {
        let mut x = rng.random_range(0.0..width as f64);
        let mut y = rng.random_range(0.0..height as f64);
        let vertices = draw_range(&mut rng, p.vertices);
        let brush = rng.random_range(w_lo..=w_hi) as f64;
        let mut heading = rng.random_range(0.0..2.0 * PI);
        for _ in 0..vertices {
            let jitter = if p.angle_range > 0.0 {
                rng.random_range(-p.angle_range..=p.angle_range)
            } else {
                0.0
            };
            heading += jitter;
            let len = rng.random_range(max_len * 0.25..=max_len);
            let nx = (x + len * heading.cos()).clamp(0.0, width as f64 - 1.0);
            let ny = (y + len * heading.sin()).clamp(0.0, height as f64 - 1.0);
            stamp_segment(&mut mask, (x, y), (nx, ny), brush / 2.0);
            x = nx;
            y = ny;
        }
    }
    Ok(mask)
}

fn draw_range(rng: &mut ChaCha8Rng, (lo, hi): (usize, usize)) -> usize {
    if hi <= lo {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

/// Marks every pixel whose center lies within `radius` of segment `a–b`.
fn stamp_segment(mask: &mut Mask, a: (f64, f64), b: (f64, f64), radius: f64) {
    let x0 = (a.0.min(b.0) - radius).floor().max(0.0) as usize;
    let x1 = ((a.0.max(b.0) + radius).ceil() as usize).min(mask.width - 1);
    let y0 = (a.1.min(b.1) - radius).floor().max(0.0) as usize;
    let y1 = ((a.1.max(b.1) + radius).ceil() as usize).min(mask.height - 1);
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let r2 = radius * radius;
    for y in y0..=y1 {
        for x in x0..=x1 {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let t = if len2 > 0.0 {
                (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let (cx, cy) = (a.0 + t * dx - px, a.1 + t * dy - py);
            if cx * cx + cy * cy <= r2 {
                mask.set(y, x, true);
            }
        }
    }
}

/// Loads an 8-bit grayscale raster; pixels `>= 128` are holes.
pub fn load_mask_file(path: impl AsRef<Path>) -> Result<Mask> {
    let path = path.as_ref();
    let img = image::open(path)
        .map_err(|e| Error::input(format!("cannot read mask {}: {e}", path.display())))?;
    match img {
        image::DynamicImage::ImageLuma8(g) => Ok(Mask::from_gray_image(&g)),
        other => Err(Error::input(format!(
            "mask {} is {:?}, expected 8-bit grayscale",
            path.display(),
            other.color()
        ))),
    }
}

/// Loads a mask and checks its size.
pub fn load_mask_file_sized(path: impl AsRef<Path>, height: usize, width: usize) -> Result<Mask> {
    let m = load_mask_file(&path)?;
    if (m.height, m.width) != (height, width) {
        return Err(Error::input(format!(
            "mask {} is {}x{}, expected {height}x{width}",
            path.as_ref().display(),
            m.height,
            m.width
        )));
    }
    Ok(m)
}

pub fn save_mask_file(mask: &Mask, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    mask.to_gray_image()
        .save(path)
        .map_err(|e| Error::input(format!("cannot write mask {}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn center_mask_256_rows_and_cols() {
        let m = gen_center_mask(256, 256).unwrap();
        for y in 0..256 {
            for x in 0..256 {
                let inside = (64..=191).contains(&y) && (64..=191).contains(&x);
                assert_eq!(m.is_hole(y, x), inside);
            }
        }
    }

    #[test]
    fn center_mask_64_bounds() {
        let m = gen_center_mask(64, 64).unwrap();
        // Arithmetic oracle: top = (64 - 32) / 2 = 16, last = 16 + 32 - 1 = 47.
        assert!(m.is_hole(16, 16) && m.is_hole(47, 47));
        assert!(!m.is_hole(15, 16) && !m.is_hole(48, 47) && !m.is_hole(16, 48));
    }

    #[test]
    fn center_mask_ratio_is_quarter() {
        for (h, w) in [(2, 2), (6, 10), (64, 128), (100, 36)] {
            assert_eq!(hole_ratio(&gen_center_mask(h, w).unwrap()), 0.25);
        }
        assert!(matches!(gen_center_mask(7, 8), Err(Error::Dimension(_))));
    }

    #[test]
    fn freeform_is_deterministic() {
        let spec = MaskSpec::freeform(99);
        assert_eq!(
            gen_freeform_mask(128, 96, &spec).unwrap(),
            gen_freeform_mask(128, 96, &spec).unwrap()
        );
        assert_ne!(
            gen_freeform_mask(128, 96, &spec).unwrap(),
            gen_freeform_mask(128, 96, &MaskSpec::freeform(100)).unwrap()
        );
    }

    #[test]
    fn zero_strokes_gives_empty_mask() {
        let spec = MaskSpec {
            kind: MaskKind::Freeform(FreeformParams {
                strokes: (0, 0),
                ..FreeformParams::default()
            }),
            seed: 3,
        };
        assert_eq!(gen_freeform_mask(64, 64, &spec).unwrap().hole_count(), 0);
    }

    #[test]
    fn buckets() {
        assert_eq!(ratio_bucket(0.0), RatioBucket::P0To10);
        assert_eq!(ratio_bucket(0.099), RatioBucket::P0To10);
        assert_eq!(ratio_bucket(0.1), RatioBucket::P10To20);
        assert_eq!(ratio_bucket(0.25), RatioBucket::P20To30);
        assert_eq!(ratio_bucket(0.3), RatioBucket::P30To40);
        assert_eq!(ratio_bucket(0.4999), RatioBucket::P40To50);
        assert_eq!(ratio_bucket(0.5), RatioBucket::OutOfRange);
        assert_eq!(ratio_bucket(1.0), RatioBucket::OutOfRange);
        assert_eq!(ratio_bucket(0.25).label(), "20-30%");
    }

    #[test]
    fn checkerboard_is_out_of_range() {
        let mut m = Mask::empty(8, 8);
        for y in 0..8 {
            for x in 0..8 {
                m.set(y, x, (x + y) % 2 == 0);
            }
        }
        // Pixel-count oracle: 32 of 64 pixels.
        assert_eq!(m.hole_count(), 32);
        assert_eq!(hole_ratio(&m), 0.5);
        assert_eq!(ratio_bucket(hole_ratio(&m)), RatioBucket::OutOfRange);
    }
}
