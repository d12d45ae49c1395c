//! Hole masking, compositing and image/mask pyramids.
//!
//! Images are `[N, 3, H, W]` tensors with values in `[0, 1]`; masks are
//! `[N, 1, H, W]` with `1` marking a hole. Holes are filled with `1.0`
//! (white) in the masked input.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

fn check_mask_for<T: Real>(image: &Tensor<T>, mask: &Tensor<T>, what: &str) -> Result<usize> {
    let (n, c, h, w) = image.dims4()?;
    let (mn, mc, mh, mw) = mask.dims4()?;
    if (mn, mh, mw) != (n, h, w) || (mc != 1 && mc != c) {
        return Err(Error::dim(format!(
            "{what}: mask {:?} does not match image {:?}",
            mask.shape(),
            image.shape()
        )));
    }
    Ok(c)
}

fn expand<T: Real>(mask: &Tensor<T>, channels: usize) -> Result<Tensor<T>> {
    if mask.shape()[1] == channels {
        Ok(mask.clone())
    } else {
        mask.expand_channels(channels)
    }
}

/// `z = x ⊙ (1 − m) + m`.
pub fn apply_mask<T: Real>(x: &Tensor<T>, m: &Tensor<T>) -> Result<Tensor<T>> {
    let c = check_mask_for(x, m, "apply_mask")?;
    let m = expand(m, c)?;
    x.mul(&m.one_minus())?.add(&m)
}

/// `y = z ⊙ (1 − m) + pred ⊙ m`; known pixels of `z` pass through unchanged.
pub fn composite<T: Real>(z: &Tensor<T>, m: &Tensor<T>, pred: &Tensor<T>) -> Result<Tensor<T>> {
    let c = check_mask_for(z, m, "composite")?;
    if pred.shape() != z.shape() {
        return Err(Error::dim(format!(
            "composite: prediction {:?} does not match input {:?}",
            pred.shape(),
            z.shape()
        )));
    }
    let m = expand(m, c)?;
    z.mul(&m.one_minus())?.add(&pred.mul(&m)?)
}

/// Mean over non-overlapping `f × f` cells.
pub fn box_downsample<T: Real>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    reduce_cells(x, factor, |cell| {
        let n = T::of(cell.len() as f64);
        cell.iter().copied().sum::<T>() / n
    })
}

/// A cell becomes a hole if any pixel in it is a hole.
pub fn mask_downsample<T: Real>(m: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    reduce_cells(m, factor, |cell| {
        if cell.iter().any(|&v| v > T::zero()) {
            T::one()
        } else {
            T::zero()
        }
    })
}

fn reduce_cells<T: Real>(x: &Tensor<T>, factor: usize, f: impl Fn(&[T]) -> T) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::dim(format!(
            "{h}x{w} is not divisible by the downsampling factor {factor}"
        )));
    }
    if factor == 1 {
        return Ok(x.detach());
    }
    let (ho, wo) = (h / factor, w / factor);
    let src = x.data();
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut cell = Vec::with_capacity(factor * factor);
    for p in 0..n * c {
        let plane = &src[p * h * w..(p + 1) * h * w];
        for y in 0..ho {
            for xx in 0..wo {
                cell.clear();
                for dy in 0..factor {
                    let row = (y * factor + dy) * w + xx * factor;
                    cell.extend_from_slice(&plane[row..row + factor]);
                }
                out.push(f(&cell));
            }
        }
    }
    Tensor::from_vec(out, &[n, c, ho, wo])
}

/// One pyramid level: original, masked input and mask at a common size.
#[derive(Clone, Debug)]
pub struct PyramidLevel<T: Real = f32> {
    pub x: Tensor<T>,
    pub z: Tensor<T>,
    pub m: Tensor<T>,
}

impl<T: Real> PyramidLevel<T> {
    pub fn size(&self) -> (usize, usize) {
        let s = self.x.shape();
        (s[2], s[3])
    }
}

/// Aligned `(x_i, z_i, m_i)` triplets, coarsest level first.
#[derive(Clone, Debug)]
pub struct PyramidSample<T: Real = f32> {
    pub levels: Vec<PyramidLevel<T>>,
    pub scale_factor: usize,
}

impl<T: Real> PyramidSample<T> {
    pub fn level_count(&self) -> usize {
        self.levels.len()
    }

    pub fn sizes(&self) -> Vec<(usize, usize)> {
        self.levels.iter().map(PyramidLevel::size).collect()
    }

    pub fn finest(&self) -> &PyramidLevel<T> {
        self.levels.last().expect("pyramids have at least one level")
    }
}

/// Builds an `L`-level pyramid whose last level is the full-resolution input.
pub fn build_pyramid<T: Real>(
    x: &Tensor<T>,
    m: &Tensor<T>,
    levels: usize,
    factor: usize,
) -> Result<PyramidSample<T>> {
    check_mask_for(x, m, "build_pyramid")?;
    if m.shape()[1] != 1 {
        return Err(Error::dim("pyramid masks must have a single channel"));
    }
    if levels == 0 || factor == 0 {
        return Err(Error::dim("pyramid needs at least one level and a positive factor"));
    }
    let (_, _, h, w) = x.dims4()?;
    let coarsest = factor
        .checked_pow(levels as u32 - 1)
        .ok_or_else(|| Error::dim("pyramid factor overflows"))?;
    if h % coarsest != 0 || w % coarsest != 0 {
        return Err(Error::dim(format!(
            "{h}x{w} is not divisible by {factor}^{} = {coarsest}",
            levels - 1
        )));
    }
    let x = x.detach();
    let m = m.detach();
    let mut out = Vec::with_capacity(levels);
    for i in 0..levels {
        let f = factor.pow((levels - 1 - i) as u32);
        let xi = box_downsample(&x, f)?;
        let mi = mask_downsample(&m, f)?;
        let zi = apply_mask(&xi, &mi)?;
        out.push(PyramidLevel { x: xi, z: zi, m: mi });
    }
    Ok(PyramidSample {
        levels: out,
        scale_factor: factor,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn center_mask(n: usize) -> Tensor<f64> {
        let mut d = vec![0.0; n * n];
        for y in n / 4..3 * n / 4 {
            for x in n / 4..3 * n / 4 {
                d[y * n + x] = 1.0;
            }
        }
        Tensor::from_vec(d, &[1, 1, n, n]).unwrap()
    }

    #[test]
    fn apply_mask_empty_and_full() {
        let x = Tensor::<f64>::full(&[1, 3, 4, 4], 0.3);
        let zero = Tensor::<f64>::zeros(&[1, 1, 4, 4]);
        let one = Tensor::<f64>::ones(&[1, 1, 4, 4]);
        assert_eq!(apply_mask(&x, &zero).unwrap().data(), x.data());
        assert!(apply_mask(&x, &one).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn apply_mask_center_block() {
        let x = Tensor::<f64>::full(&[1, 3, 8, 8], 0.25);
        let z = apply_mask(&x, &center_mask(8)).unwrap();
        for c in 0..3 {
            for y in 0..8 {
                for xx in 0..8 {
                    let inside = (2..=5).contains(&y) && (2..=5).contains(&xx);
                    let expect = if inside { 1.0 } else { 0.25 };
                    assert_eq!(z.at(&[0, c, y, xx]), expect);
                }
            }
        }
    }

    #[test]
    fn composite_extremes() {
        let z = Tensor::<f64>::full(&[1, 3, 4, 4], 0.2);
        let p = Tensor::<f64>::full(&[1, 3, 4, 4], 0.9);
        let zero = Tensor::<f64>::zeros(&[1, 1, 4, 4]);
        let one = Tensor::<f64>::ones(&[1, 1, 4, 4]);
        assert_eq!(composite(&z, &zero, &p).unwrap().data(), z.data());
        assert_eq!(composite(&z, &one, &p).unwrap().data(), p.data());
    }

    #[test]
    fn mismatched_shapes_are_dimension_errors() {
        let x = Tensor::<f64>::zeros(&[1, 3, 4, 4]);
        let m = Tensor::<f64>::zeros(&[1, 1, 4, 5]);
        assert!(matches!(apply_mask(&x, &m), Err(Error::Dimension(_))));
        assert!(matches!(composite(&x, &m, &x), Err(Error::Dimension(_))));
        let m = Tensor::<f64>::zeros(&[1, 1, 4, 4]);
        let p = Tensor::<f64>::zeros(&[1, 3, 2, 2]);
        assert!(matches!(composite(&x, &m, &p), Err(Error::Dimension(_))));
    }

    #[test]
    fn pyramid_level_sizes() {
        let x = Tensor::<f32>::zeros(&[1, 3, 1024, 1024]);
        let m = Tensor::<f32>::zeros(&[1, 1, 1024, 1024]);
        let p = build_pyramid(&x, &m, 5, 2).unwrap();
        let sizes: Vec<usize> = p.sizes().iter().map(|s| s.0).collect();
        assert_eq!(sizes, vec![64, 128, 256, 512, 1024]);

        let x = Tensor::<f32>::zeros(&[1, 3, 512, 512]);
        let m = Tensor::<f32>::zeros(&[1, 1, 512, 512]);
        let p = build_pyramid(&x, &m, 4, 2).unwrap();
        let sizes: Vec<usize> = p.sizes().iter().map(|s| s.0).collect();
        assert_eq!(sizes, vec![64, 128, 256, 512]);
    }

    #[test]
    fn pyramid_rejects_indivisible() {
        let x = Tensor::<f32>::zeros(&[1, 3, 100, 100]);
        let m = Tensor::<f32>::zeros(&[1, 1, 100, 100]);
        assert!(matches!(build_pyramid(&x, &m, 4, 2), Err(Error::Dimension(_))));
    }

    #[test]
    fn constant_image_stays_constant() {
        let x = Tensor::<f64>::full(&[1, 3, 32, 32], 0.375);
        let m = center_mask(32);
        let p = build_pyramid(&x, &m, 3, 2).unwrap();
        for level in &p.levels {
            assert!(level.x.data().iter().all(|&v| v == 0.375));
        }
    }

    #[test]
    fn partially_covered_cell_becomes_hole() {
        let mut d = vec![0.0; 16];
        d[5] = 1.0;
        let m = Tensor::<f64>::from_vec(d, &[1, 1, 4, 4]).unwrap();
        let down = mask_downsample(&m, 2).unwrap();
        assert_eq!(down.data(), &[1.0, 0.0, 0.0, 0.0]);
    }
}
