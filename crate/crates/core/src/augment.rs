//! Random perspective + crop-resize augmentation with exact pullbacks.
//!
//! Both transforms compose into one [`Homography`] per copy and the image is
//! resampled once with bilinear interpolation. Homographies act on pixel
//! index coordinates: output pixel `(u, v)` reads the source at `H · (u, v, 1)`.

use nalgebra::{Matrix3, SMatrix, SVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::ImageTensor;

const MIN_DET: f64 = 1e-9;

/// Projective map from output pixel coordinates to source pixel coordinates,
/// normalized so the bottom-right entry is 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography(Matrix3<f64>);

impl Homography {
    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self> {
        let h33 = m[(2, 2)];
        if !h33.is_finite() || h33.abs() < 1e-300 {
            return Err(Error::contract("homography has a zero h33 entry"));
        }
        let h = Self(m / h33);
        h.check_invertible()?;
        Ok(h)
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn det(&self) -> f64 {
        self.0.determinant()
    }

    fn check_invertible(&self) -> Result<()> {
        let det = self.det();
        if !det.is_finite() || det.abs() <= MIN_DET {
            return Err(Error::contract(format!("homography is not invertible (det {det:e})")));
        }
        Ok(())
    }

    /// `self` after `other`: first `other`, then `self`.
    pub fn compose(&self, other: &Homography) -> Result<Homography> {
        Homography::from_matrix(self.0 * other.0)
    }

    /// Maps `(u, v)`; `None` when the point goes to infinity.
    #[inline]
    pub fn apply(&self, u: f64, v: f64) -> Option<(f64, f64)> {
        let m = &self.0;
        let w = m[(2, 0)] * u + m[(2, 1)] * v + m[(2, 2)];
        if w.abs() < 1e-12 || !w.is_finite() {
            return None;
        }
        let x = (m[(0, 0)] * u + m[(0, 1)] * v + m[(0, 2)]) / w;
        let y = (m[(1, 0)] * u + m[(1, 1)] * v + m[(1, 2)]) / w;
        Some((x, y))
    }

    /// The homography taking each `from[i]` to `to[i]`.
    pub fn from_correspondences(from: [(f64, f64); 4], to: [(f64, f64); 4]) -> Result<Homography> {
        let mut a = SMatrix::<f64, 8, 8>::zeros();
        let mut b = SVector::<f64, 8>::zeros();
        for (i, (&(u, v), &(x, y))) in from.iter().zip(&to).enumerate() {
            let r = 2 * i;
            a.set_row(r, &SMatrix::<f64, 1, 8>::from_row_slice(&[u, v, 1.0, 0.0, 0.0, 0.0, -u * x, -v * x]));
            a.set_row(r + 1, &SMatrix::<f64, 1, 8>::from_row_slice(&[0.0, 0.0, 0.0, u, v, 1.0, -u * y, -v * y]));
            b[r] = x;
            b[r + 1] = y;
        }
        let h = a.lu().solve(&b).ok_or_else(|| Error::contract("degenerate corner correspondence"))?;
        Homography::from_matrix(Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], 1.0))
    }

    /// Re-expresses a map between pixel-edge coordinates (pixel `i` spans
    /// `[i, i+1]`) in pixel index coordinates.
    fn edge_to_index(m: Matrix3<f64>) -> Result<Homography> {
        let to_edge = Matrix3::new(1.0, 0.0, 0.5, 0.0, 1.0, 0.5, 0.0, 0.0, 1.0);
        let to_index = Matrix3::new(1.0, 0.0, -0.5, 0.0, 1.0, -0.5, 0.0, 0.0, 1.0);
        Homography::from_matrix(to_index * m * to_edge)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Number of augmented copies per iteration.
    pub n_copies: usize,
    /// Corner displacement as a fraction of the side length, in [0, 1).
    pub distortion_scale: f64,
    /// Crop area as a fraction of the image area.
    pub crop_scale: (f64, f64),
    /// Crop width / height ratio.
    pub crop_aspect: (f64, f64),
    pub fill: [f64; 3],
    /// Side length of every augmented copy.
    pub out_size: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            n_copies: 8,
            distortion_scale: 0.5,
            crop_scale: (0.7, 0.9),
            crop_aspect: (1.0, 1.0),
            fill: [1.0; 3],
            out_size: 224,
        }
    }
}

impl AugmentConfig {
    /// A config whose every homography is the identity up to resizing.
    pub fn identity(n_copies: usize, out_size: usize) -> Self {
        Self {
            n_copies,
            distortion_scale: 0.0,
            crop_scale: (1.0, 1.0),
            crop_aspect: (1.0, 1.0),
            out_size,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_copies == 0 {
            return Err(Error::config("augmentation needs at least one copy"));
        }
        if !(0.0..1.0).contains(&self.distortion_scale) {
            return Err(Error::config("distortion_scale must lie in [0, 1)"));
        }
        let (lo, hi) = self.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::config(format!("crop scale range ({lo}, {hi}) must satisfy 0 < lo <= hi <= 1")));
        }
        let (alo, ahi) = self.crop_aspect;
        if !(alo > 0.0 && alo <= ahi) {
            return Err(Error::config("crop aspect range must satisfy 0 < lo <= hi"));
        }
        if self.out_size == 0 {
            return Err(Error::config("augmentation out_size must be positive"));
        }
        Ok(())
    }
}

/// Draws `config.n_copies` perspective ∘ crop-resize homographies for a
/// `src_width x src_height` source.
///
/// The perspective step moves each source corner by an independent uniform
/// offset of at most `distortion_scale * side / 2` per axis; the crop picks an
/// area fraction and (log-uniform) aspect ratio, then a uniform position
/// inside the image, and stretches it to `out_size`.
pub fn sample_augmentations<R: Rng + ?Sized>(
    config: &AugmentConfig,
    src_width: usize,
    src_height: usize,
    rng: &mut R,
) -> Result<Vec<Homography>> {
    config.validate()?;
    let (w, h) = (src_width as f64, src_height as f64);
    let out = config.out_size as f64;
    let corners = [(0.0, 0.0), (w, 0.0), (w, h), (0.0, h)];
    (0..config.n_copies)
        .map(|_| {
            let ds = config.distortion_scale;
            let moved = corners.map(|(cx, cy)| {
                let dx = (2.0 * rng.random::<f64>() - 1.0) * ds * w / 2.0;
                let dy = (2.0 * rng.random::<f64>() - 1.0) * ds * h / 2.0;
                (cx + dx, cy + dy)
            });
            // perspective output coordinates -> perspective input coordinates;
            // no distortion skips the solve so the identity stays exact
            let persp =
                if ds == 0.0 { Homography::identity() } else { Homography::from_correspondences(moved, corners)? };

            let (lo, hi) = config.crop_scale;
            let area = (lo + (hi - lo) * rng.random::<f64>()) * w * h;
            let (alo, ahi) = config.crop_aspect;
            let aspect = (alo.ln() + (ahi.ln() - alo.ln()) * rng.random::<f64>()).exp();
            let cw = (area * aspect).sqrt().min(w);
            let ch = (area / aspect).sqrt().min(h);
            let x0 = (w - cw) * rng.random::<f64>();
            let y0 = (h - ch) * rng.random::<f64>();
            let crop = Matrix3::new(cw / out, 0.0, x0, 0.0, ch / out, y0, 0.0, 0.0, 1.0);

            Homography::edge_to_index(persp.0 * crop)
        })
        .collect()
}

/// The four bilinear taps for a sample at `(x, y)`. Taps outside the image
/// come back as `None` and read the fill color.
#[inline]
fn bilinear_taps(x: f64, y: f64, width: usize, height: usize) -> Option<[(Option<usize>, f64); 4]> {
    if !(x > -1.0 && x < width as f64 && y > -1.0 && y < height as f64) {
        return None;
    }
    let fx = x.floor();
    let fy = y.floor();
    let (tx, ty) = (x - fx, y - fy);
    let (ix, iy) = (fx as i64, fy as i64);
    let at = |cx: i64, cy: i64| {
        if cx >= 0 && cy >= 0 && (cx as usize) < width && (cy as usize) < height {
            Some((cy as usize * width + cx as usize) * 3)
        } else {
            None
        }
    };
    Some([
        (at(ix, iy), (1.0 - tx) * (1.0 - ty)),
        (at(ix + 1, iy), tx * (1.0 - ty)),
        (at(ix, iy + 1), (1.0 - tx) * ty),
        (at(ix + 1, iy + 1), tx * ty),
    ])
}

/// Bilinear resampling of `image` through `h` onto an `out_size²` grid.
pub fn warp_image(image: &ImageTensor, h: &Homography, out_size: usize, fill: [f64; 3]) -> Result<ImageTensor> {
    h.check_invertible()?;
    let (sw, sh) = (image.width, image.height);
    let mut data = vec![0.0; out_size * out_size * 3];
    data.par_chunks_mut(out_size * 3).enumerate().for_each(|(v, row)| {
        for u in 0..out_size {
            let px = &mut row[u * 3..u * 3 + 3];
            let taps = h.apply(u as f64, v as f64).and_then(|(x, y)| bilinear_taps(x, y, sw, sh));
            match taps {
                None => px.copy_from_slice(&fill),
                Some(taps) => {
                    let mut c = [0.0; 3];
                    for (tap, wt) in taps {
                        if wt == 0.0 {
                            continue;
                        }
                        for ch in 0..3 {
                            c[ch] += wt * tap.map_or(fill[ch], |o| image.data[o + ch]);
                        }
                    }
                    px.copy_from_slice(&c);
                }
            }
        }
    });
    ImageTensor::new(out_size, out_size, data)
}

/// Adjoint of [`warp_image`] with respect to the source image. Gradient that
/// lands on out-of-bounds taps is dropped.
pub fn warp_pullback(
    src_height: usize,
    src_width: usize,
    h: &Homography,
    out_size: usize,
    grad_out: &ImageTensor,
) -> Result<ImageTensor> {
    h.check_invertible()?;
    grad_out.check_shape(out_size, out_size, "warp output gradient")?;
    let mut grad = ImageTensor::zeros(src_height, src_width);
    for v in 0..out_size {
        for u in 0..out_size {
            let o = grad_out.offset(u, v);
            let g = [grad_out.data[o], grad_out.data[o + 1], grad_out.data[o + 2]];
            if g == [0.0; 3] {
                continue;
            }
            let Some(taps) = h.apply(u as f64, v as f64).and_then(|(x, y)| bilinear_taps(x, y, src_width, src_height))
            else {
                continue;
            };
            for (tap, wt) in taps {
                if let Some(t) = tap {
                    for (d, gc) in grad.data[t..t + 3].iter_mut().zip(g) {
                        *d += wt * gc;
                    }
                }
            }
        }
    }
    Ok(grad)
}

/// One warped copy per homography.
pub fn augment_batch(
    image: &ImageTensor,
    homographies: &[Homography],
    config: &AugmentConfig,
) -> Result<Vec<ImageTensor>> {
    homographies.par_iter().map(|h| warp_image(image, h, config.out_size, config.fill)).collect()
}

/// Sum of the per-copy pullbacks, accumulated in copy order.
pub fn augment_pullback(
    src_height: usize,
    src_width: usize,
    homographies: &[Homography],
    config: &AugmentConfig,
    grads: &[ImageTensor],
) -> Result<ImageTensor> {
    if grads.len() != homographies.len() {
        return Err(Error::contract(format!("{} copy gradients for {} homographies", grads.len(), homographies.len())));
    }
    let parts: Vec<ImageTensor> = homographies
        .par_iter()
        .zip(grads.par_iter())
        .map(|(h, g)| warp_pullback(src_height, src_width, h, config.out_size, g))
        .collect::<Result<_>>()?;
    let mut total = ImageTensor::zeros(src_height, src_width);
    for p in &parts {
        total.add_assign(p);
    }
    Ok(total)
}
