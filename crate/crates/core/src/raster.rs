//! Distance-field stroke rasterizer and its adjoint.
//!
//! Each stroke is flattened to a polyline in pixel space. A pixel centered at
//! `p` receives coverage `clamp((w/2 + a/2 - d) / a, 0, 1)`, where `d` is the
//! distance from `p` to the polyline, `w` the stroke width and `a` the
//! antialias ramp width. Strokes are composited "over" in list order on an
//! opaque background:
//!
//! ```text
//! C <- C * (1 - alpha * cov) + rgb * (alpha * cov)
//! ```
//!
//! [`render_pullback`] is the exact vector-Jacobian product of [`render`].
//! Rows are processed in parallel; per-band gradient buffers are reduced in
//! band order, so results are bitwise reproducible.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{bernstein, flatten_points, ParamLayout, Point, Scene, MAX_POINTS};

/// `height x width x 3` image, row-major, channel-last.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::contract(format!(
                "{}x{}x3 image needs {} values, got {}",
                height,
                width,
                height * width * 3,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0.0; height * width * 3] }
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            data.extend_from_slice(&rgb);
        }
        Self { height, width, data }
    }

    #[inline]
    pub fn offset(&self, x: usize, y: usize) -> usize {
        (y * self.width + x) * 3
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let o = self.offset(x, y);
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn same_shape(&self, other: &ImageTensor) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn check_shape(&self, height: usize, width: usize, what: &str) -> Result<()> {
        if self.height != height || self.width != width || self.data.len() != height * width * 3 {
            return Err(Error::contract(format!(
                "{what} is {}x{}, expected {}x{}",
                self.height, self.width, height, width
            )));
        }
        Ok(())
    }

    /// Sum of elementwise products.
    pub fn dot(&self, other: &ImageTensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn mean_abs_diff(&self, other: &ImageTensor) -> f64 {
        let n = self.data.len().max(1) as f64;
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).sum::<f64>() / n
    }

    /// Mean absolute difference per channel.
    pub fn channel_mean_abs_diff(&self, other: &ImageTensor) -> [f64; 3] {
        let mut acc = [0.0; 3];
        for (i, (a, b)) in self.data.iter().zip(&other.data).enumerate() {
            acc[i % 3] += (a - b).abs();
        }
        let n = (self.height * self.width).max(1) as f64;
        acc.map(|v| v / n)
    }

    pub fn add_assign(&mut self, other: &ImageTensor) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RasterConfig {
    /// Polyline resolution per stroke.
    pub curve_samples: usize,
    /// Width of the linear coverage ramp in pixels.
    pub antialias_width: f64,
    /// Subsamples per pixel axis for [`reference_render`].
    pub supersample: usize,
}

impl Default for RasterConfig {
    fn default() -> Self {
        Self { curve_samples: 32, antialias_width: 1.0, supersample: 16 }
    }
}

impl RasterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.curve_samples < 2 {
            return Err(Error::config("curve_samples must be at least 2"));
        }
        if self.antialias_width.is_nan() || self.antialias_width <= 0.0 {
            return Err(Error::config("antialias_width must be positive"));
        }
        if self.supersample == 0 {
            return Err(Error::config("supersample must be at least 1"));
        }
        Ok(())
    }
}

/// Closest point on a polyline to `p`.
#[derive(Debug, Clone, Copy)]
struct Closest {
    dist: f64,
    segment: usize,
    /// Position along the segment in [0, 1].
    s: f64,
    point: Point,
}

/// Ties go to the lowest segment index.
#[inline]
fn closest_on_polyline(p: Point, poly: &[Point]) -> Closest {
    let mut best = Closest { dist: f64::INFINITY, segment: 0, s: 0.0, point: poly[0] };
    let mut best_d2 = f64::INFINITY;
    for (i, w) in poly.windows(2).enumerate() {
        let (a, b) = (w[0], w[1]);
        let vx = b.x - a.x;
        let vy = b.y - a.y;
        let len2 = vx * vx + vy * vy;
        let s = if len2 > 0.0 { (((p.x - a.x) * vx + (p.y - a.y) * vy) / len2).clamp(0.0, 1.0) } else { 0.0 };
        let c = Point::new(a.x + s * vx, a.y + s * vy);
        let d2 = (p.x - c.x) * (p.x - c.x) + (p.y - c.y) * (p.y - c.y);
        if d2 < best_d2 {
            best_d2 = d2;
            best = Closest { dist: 0.0, segment: i, s, point: c };
        }
    }
    best.dist = best_d2.sqrt();
    best
}

/// Minimum Euclidean distance from `p` to any segment of `poly`.
///
/// # Panics
///
/// If the polyline has fewer than two points.
pub fn distance_to_polyline(p: Point, poly: &[Point]) -> f64 {
    assert!(poly.len() >= 2, "polyline needs at least two points");
    closest_on_polyline(p, poly).dist
}

/// A stroke in pixel space, ready for scanning.
struct Prepared {
    poly: Vec<Point>,
    half_width: f64,
    rgb: [f64; 3],
    alpha: f64,
    /// Inclusive pixel index ranges; empty when `x0 > x1` or `y0 > y1`.
    x0: i64,
    x1: i64,
    y0: i64,
    y1: i64,
}

impl Prepared {
    fn new(scene: &Scene, idx: usize, samples: usize, reach_extra: f64) -> Self {
        let s = &scene.strokes[idx];
        let ctrl: Vec<Point> = s.points.iter().map(|&p| scene.to_pixels(p)).collect();
        let poly = flatten_points(&ctrl, samples);
        let reach = s.width / 2.0 + reach_extra;
        let (mut minx, mut miny, mut maxx, mut maxy) =
            (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in &poly {
            minx = minx.min(p.x);
            maxx = maxx.max(p.x);
            miny = miny.min(p.y);
            maxy = maxy.max(p.y);
        }
        // pixel centers sit at i + 0.5
        let lo = |v: f64| (v - reach - 0.5).ceil().max(-1.0) as i64;
        let hi = |v: f64, n: usize| (v + reach - 0.5).floor().min(n as f64) as i64;
        let w = scene.canvas.width;
        let h = scene.canvas.height;
        let finite = minx.is_finite() && maxx.is_finite() && miny.is_finite() && maxy.is_finite();
        let (x0, x1, y0, y1) = if finite {
            (lo(minx).max(0), hi(maxx, w).min(w as i64 - 1), lo(miny).max(0), hi(maxy, h).min(h as i64 - 1))
        } else {
            (1, 0, 1, 0)
        };
        Self { poly, half_width: s.width / 2.0, rgb: s.rgb(), alpha: s.alpha(), x0, x1, y0, y1 }
    }

    #[inline]
    fn covers_row(&self, y: usize) -> bool {
        (self.y0..=self.y1).contains(&(y as i64))
    }

    #[inline]
    fn covers_col(&self, x: usize) -> bool {
        (self.x0..=self.x1).contains(&(x as i64))
    }
}

fn prepare(scene: &Scene, config: &RasterConfig) -> Vec<Prepared> {
    (0..scene.strokes.len()).map(|i| Prepared::new(scene, i, config.curve_samples, config.antialias_width)).collect()
}

/// Coverage and whether it lies on the open linear ramp.
#[inline]
fn coverage(half_width: f64, dist: f64, aa: f64) -> (f64, bool) {
    let raw = (half_width + aa / 2.0 - dist) / aa;
    if raw <= 0.0 {
        (0.0, false)
    } else if raw >= 1.0 {
        (1.0, false)
    } else {
        (raw, true)
    }
}

#[inline]
fn pixel_center(x: usize, y: usize) -> Point {
    Point::new(x as f64 + 0.5, y as f64 + 0.5)
}

/// Renders the scene with antialiased distance-field coverage.
pub fn render(scene: &Scene, config: &RasterConfig) -> ImageTensor {
    let prepared = prepare(scene, config);
    let (w, h) = (scene.canvas.width, scene.canvas.height);
    let bg = scene.canvas.background;
    let aa = config.antialias_width;
    let mut data = vec![0.0; w * h * 3];
    data.par_chunks_mut(w * 3).enumerate().for_each(|(y, row)| {
        let active: Vec<&Prepared> = prepared.iter().filter(|s| s.covers_row(y)).collect();
        for x in 0..w {
            let p = pixel_center(x, y);
            let mut c = bg;
            for s in active.iter().filter(|s| s.covers_col(x)) {
                let d = closest_on_polyline(p, &s.poly).dist;
                let (cov, _) = coverage(s.half_width, d, aa);
                if cov > 0.0 {
                    let beta = s.alpha * cov;
                    for (cc, sc) in c.iter_mut().zip(s.rgb) {
                        *cc = *cc * (1.0 - beta) + sc * beta;
                    }
                }
            }
            for ch in 0..3 {
                row[x * 3 + ch] = c[ch].clamp(0.0, 1.0);
            }
        }
    });
    ImageTensor { height: h, width: w, data }
}

struct Hit {
    stroke: usize,
    closest: Closest,
    cov: f64,
    on_ramp: bool,
    before: [f64; 3],
}

const BAND_ROWS: usize = 8;

/// Gradient of a scalar loss with respect to every scene parameter, laid out
/// as [`ParamLayout::for_scene`].
///
/// Non-differentiable points (coverage clamp corners, equidistant segments)
/// take the derivative of the branch the forward pass selected.
pub fn render_pullback(scene: &Scene, config: &RasterConfig, grad: &ImageTensor) -> Result<Vec<f64>> {
    let (w, h) = (scene.canvas.width, scene.canvas.height);
    grad.check_shape(h, w, "pixel gradient")?;
    let layout = ParamLayout::for_scene(scene);
    let prepared = prepare(scene, config);
    let aa = config.antialias_width;
    let samples = config.curve_samples;
    let bg = scene.canvas.background;
    let (sx, sy) = (w as f64, h as f64);

    // basis[n][i][j] = B_j(t_i) for a stroke with n control points
    let basis: Vec<Vec<[f64; MAX_POINTS]>> = (0..=MAX_POINTS)
        .map(|n| {
            if n < 2 {
                return Vec::new();
            }
            (0..samples).map(|i| bernstein(n, i as f64 / (samples - 1) as f64)).collect()
        })
        .collect();

    let n_bands = h.div_ceil(BAND_ROWS);
    let partials: Vec<Vec<f64>> = (0..n_bands)
        .into_par_iter()
        .map(|band| {
            let mut acc = vec![0.0; layout.len()];
            let mut hits: Vec<Hit> = Vec::new();
            for y in band * BAND_ROWS..((band + 1) * BAND_ROWS).min(h) {
                let active: Vec<usize> = (0..prepared.len()).filter(|&i| prepared[i].covers_row(y)).collect();
                if active.is_empty() {
                    continue;
                }
                for x in 0..w {
                    let o = grad.offset(x, y);
                    let g_out = [grad.data[o], grad.data[o + 1], grad.data[o + 2]];
                    if g_out == [0.0; 3] {
                        continue;
                    }
                    let p = pixel_center(x, y);
                    hits.clear();
                    let mut c = bg;
                    for &i in &active {
                        let s = &prepared[i];
                        if !s.covers_col(x) {
                            continue;
                        }
                        let closest = closest_on_polyline(p, &s.poly);
                        let (cov, on_ramp) = coverage(s.half_width, closest.dist, aa);
                        if cov <= 0.0 {
                            continue;
                        }
                        hits.push(Hit { stroke: i, closest, cov, on_ramp, before: c });
                        let beta = s.alpha * cov;
                        for (cc, sc) in c.iter_mut().zip(s.rgb) {
                            *cc = *cc * (1.0 - beta) + sc * beta;
                        }
                    }
                    // the output clamp passes gradient only where inactive
                    let mut g = [0.0; 3];
                    for ch in 0..3 {
                        if (0.0..=1.0).contains(&c[ch]) {
                            g[ch] = g_out[ch];
                        }
                    }
                    for hit in hits.iter().rev() {
                        let s = &prepared[hit.stroke];
                        let slot = layout.slots[hit.stroke];
                        let beta = s.alpha * hit.cov;
                        let mut d_beta = 0.0;
                        for ch in 0..3 {
                            acc[slot.color + ch] += g[ch] * beta;
                            d_beta += g[ch] * (s.rgb[ch] - hit.before[ch]);
                        }
                        acc[slot.color + 3] += d_beta * hit.cov;
                        if hit.on_ramp {
                            let d_cov = d_beta * s.alpha;
                            acc[slot.width] += d_cov / (2.0 * aa);
                            let d_dist = -d_cov / aa;
                            let cl = hit.closest;
                            if cl.dist > 0.0 {
                                // envelope theorem: the projection parameter
                                // does not contribute at the minimizer
                                let dir_x = (cl.point.x - p.x) / cl.dist;
                                let dir_y = (cl.point.y - p.y) / cl.dist;
                                let ends = [(cl.segment, 1.0 - cl.s), (cl.segment + 1, cl.s)];
                                let table = &basis[slot.n_points];
                                for (k, wk) in ends {
                                    if wk == 0.0 {
                                        continue;
                                    }
                                    let gx = d_dist * wk * dir_x * sx;
                                    let gy = d_dist * wk * dir_y * sy;
                                    let b = &table[k];
                                    for j in 0..slot.n_points {
                                        acc[slot.point_x(j)] += gx * b[j];
                                        acc[slot.point_y(j)] += gy * b[j];
                                    }
                                }
                            }
                        }
                        for gc in &mut g {
                            *gc *= 1.0 - beta;
                        }
                    }
                }
            }
            acc
        })
        .collect();

    let mut out = vec![0.0; layout.len()];
    for part in partials {
        for (o, v) in out.iter_mut().zip(part) {
            *o += v;
        }
    }
    Ok(out)
}

/// Supersampled hard-coverage renderer used as a ground truth.
///
/// Each pixel averages `supersample²` stratified samples; a sample is inside a
/// stroke when its distance to the (densely flattened) centerline is at most
/// half the width. No antialias ramp, no gradients.
pub fn reference_render(scene: &Scene, config: &RasterConfig) -> ImageTensor {
    let samples = config.curve_samples.max(2) * 8;
    let prepared: Vec<Prepared> = (0..scene.strokes.len()).map(|i| Prepared::new(scene, i, samples, 1.0)).collect();
    let (w, h) = (scene.canvas.width, scene.canvas.height);
    let bg = scene.canvas.background;
    let ss = config.supersample.max(1);
    let inv = 1.0 / ss as f64;
    let norm = 1.0 / (ss * ss) as f64;
    let mut data = vec![0.0; w * h * 3];
    data.par_chunks_mut(w * 3).enumerate().for_each(|(y, row)| {
        let active: Vec<&Prepared> = prepared.iter().filter(|s| s.covers_row(y)).collect();
        for x in 0..w {
            let hits: Vec<&&Prepared> = active.iter().filter(|s| s.covers_col(x)).collect();
            let mut sum = [0.0; 3];
            for j in 0..ss {
                for i in 0..ss {
                    let p = Point::new(x as f64 + (i as f64 + 0.5) * inv, y as f64 + (j as f64 + 0.5) * inv);
                    let mut c = bg;
                    for s in &hits {
                        if closest_on_polyline(p, &s.poly).dist <= s.half_width {
                            for (cc, sc) in c.iter_mut().zip(s.rgb) {
                                *cc = *cc * (1.0 - s.alpha) + sc * s.alpha;
                            }
                        }
                    }
                    for ch in 0..3 {
                        sum[ch] += c[ch];
                    }
                }
            }
            for ch in 0..3 {
                row[x * 3 + ch] = (sum[ch] * norm).clamp(0.0, 1.0);
            }
        }
    });
    ImageTensor { height: h, width: w, data }
}
