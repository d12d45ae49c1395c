//! Raster-level inpainting: size adjustment, inference and re-compositing.

use image::{ImageBuffer, RgbImage};
use pyramidfill_core::data::{rgb_to_tensor, tensor_to_rgb};
use pyramidfill_core::mask::Mask;
use pyramidfill_core::pyramid::apply_mask;
use pyramidfill_core::trainer::PyramidModel;
use serde::Serialize;

use crate::error::ApiError;

/// How the request raster was mapped onto a size the model accepts.
///
/// `offset_x`/`offset_y` locate the processed frame in the original image;
/// negative offsets mean padding (edge pixels repeated, never holes).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Adjustment {
    pub original_width: usize,
    pub original_height: usize,
    pub width: usize,
    pub height: usize,
    pub offset_x: isize,
    pub offset_y: isize,
}

impl Adjustment {
    pub fn identity(width: usize, height: usize) -> Self {
        Adjustment {
            original_width: width,
            original_height: height,
            width,
            height,
            offset_x: 0,
            offset_y: 0,
        }
    }

    /// Center crop or pad each side to the nearest multiple of `k`; ties pad.
    pub fn for_multiple(width: usize, height: usize, k: usize) -> Self {
        let k = k.max(1);
        let (w, ox) = nearest_axis(width, k);
        let (h, oy) = nearest_axis(height, k);
        Adjustment {
            original_width: width,
            original_height: height,
            width: w,
            height: h,
            offset_x: ox,
            offset_y: oy,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.width == self.original_width && self.height == self.original_height
    }

    pub fn mode(&self) -> &'static str {
        let area = |a: usize, b: usize| a * b;
        if self.is_identity() {
            "none"
        } else if self.width <= self.original_width && self.height <= self.original_height {
            "crop"
        } else if self.width >= self.original_width && self.height >= self.original_height {
            "pad"
        } else if area(self.width, self.height) < area(self.original_width, self.original_height) {
            "crop+pad"
        } else {
            "pad+crop"
        }
    }

    pub fn apply_image(&self, img: &RgbImage) -> RgbImage {
        if self.is_identity() {
            return img.clone();
        }
        let (w, h) = (img.width() as isize, img.height() as isize);
        ImageBuffer::from_fn(self.width as u32, self.height as u32, |x, y| {
            let sx = (x as isize + self.offset_x).clamp(0, w - 1);
            let sy = (y as isize + self.offset_y).clamp(0, h - 1);
            *img.get_pixel(sx as u32, sy as u32)
        })
    }

    pub fn apply_mask(&self, mask: &Mask) -> Mask {
        if self.is_identity() {
            return mask.clone();
        }
        mask.crop(self.offset_y, self.offset_x, self.height, self.width)
    }
}

fn nearest_axis(d: usize, k: usize) -> (usize, isize) {
    let down = d / k * k;
    let up = down + if d % k == 0 { 0 } else { k };
    let n = if down == 0 || up - d <= d - down { up } else { down };
    (n, (d as isize - n as isize) / 2)
}

#[derive(Clone, Debug)]
pub struct InpaintResult {
    pub image: RgbImage,
    pub intermediates: Vec<RgbImage>,
    pub adjustment: Adjustment,
}

/// Checks that the two rasters can be processed together.
pub fn validate_inputs(image: &RgbImage, mask: &Mask) -> Result<(), ApiError> {
    let (w, h) = (image.width() as usize, image.height() as usize);
    if w == 0 || h == 0 {
        return Err(ApiError::Unprocessable("image is empty".into()));
    }
    if (mask.width(), mask.height()) != (w, h) {
        return Err(ApiError::Unprocessable(format!(
            "image is {w}x{h} but mask is {}x{}",
            mask.width(),
            mask.height()
        )));
    }
    Ok(())
}

/// Inpaints `image` under `mask` with `model`. Known pixels of the adjusted
/// image are copied into the result unchanged.
pub fn inpaint_raster(
    model: &PyramidModel,
    image: &RgbImage,
    mask: &Mask,
    with_intermediates: bool,
) -> Result<InpaintResult, ApiError> {
    validate_inputs(image, mask)?;
    let adjustment = Adjustment::for_multiple(image.width() as usize, image.height() as usize, model.size_multiple());
    let image = adjustment.apply_image(image);
    let mask = adjustment.apply_mask(mask);
    if mask.hole_count() == 0 && !with_intermediates {
        return Ok(InpaintResult {
            image,
            intermediates: Vec::new(),
            adjustment,
        });
    }
    let x = rgb_to_tensor::<f32>(&image);
    let m = mask.to_tensor::<f32>();
    let z = apply_mask(&x, &m)?;
    let out = model.infer(&z, &m)?;
    let mut result = tensor_to_rgb(&out.image, 0)?;
    for (i, (dst, src)) in result.pixels_mut().zip(image.pixels()).enumerate() {
        if mask.bits()[i] == 0 {
            *dst = *src;
        }
    }
    let intermediates = if with_intermediates {
        out.intermediates
            .iter()
            .map(|t| tensor_to_rgb(t, 0))
            .collect::<Result<Vec<_>, _>>()?
    } else {
        Vec::new()
    };
    Ok(InpaintResult {
        image: result,
        intermediates,
        adjustment,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_multiple_prefers_padding_on_ties() {
        assert_eq!(nearest_axis(64, 16), (64, 0));
        assert_eq!(nearest_axis(66, 16), (64, 1));
        assert_eq!(nearest_axis(72, 16), (80, -4));
        assert_eq!(nearest_axis(75, 16), (80, -2));
        assert_eq!(nearest_axis(5, 16), (16, -5));
    }

    #[test]
    fn adjustment_modes() {
        assert_eq!(Adjustment::for_multiple(64, 64, 16).mode(), "none");
        assert_eq!(Adjustment::for_multiple(66, 65, 16).mode(), "crop");
        assert_eq!(Adjustment::for_multiple(60, 62, 16).mode(), "pad");
    }

    #[test]
    fn padding_repeats_edges_and_keeps_mask_known() {
        let img = RgbImage::from_fn(3, 2, |x, y| image::Rgb([x as u8, y as u8, 7]));
        let mut mask = Mask::empty(2, 3);
        mask.set(0, 0, true);
        let adj = Adjustment::for_multiple(3, 2, 4);
        assert_eq!((adj.width, adj.height, adj.offset_x, adj.offset_y), (4, 4, 0, -1));
        let out = adj.apply_image(&img);
        assert_eq!(out.get_pixel(3, 0).0, [2, 0, 7]);
        assert_eq!(out.get_pixel(0, 3).0, [0, 1, 7]);
        let m = adj.apply_mask(&mask);
        assert_eq!(m.hole_count(), 1);
        assert!(m.is_hole(1, 0));
    }
}
