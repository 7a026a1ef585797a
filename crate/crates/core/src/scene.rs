//! Strokes, scenes, and the flat parameter vector the optimizer works on.
//!
//! Control points are stored in normalized canvas coordinates: `[0, 1]²`
//! covers the canvas, but points are free to leave it. Widths are in output
//! pixels.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MIN_POINTS: usize = 3;
pub const MAX_POINTS: usize = 5;

/// Default lower width bound in pixels.
pub const DEFAULT_MIN_WIDTH: f64 = 0.5;
/// Default upper width bound in pixels.
pub const DEFAULT_MAX_WIDTH: f64 = 12.0;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    #[inline]
    pub fn lerp(self, other: Point, t: f64) -> Point {
        Point::new(self.x + (other.x - self.x) * t, self.y + (other.y - self.y) * t)
    }

    #[inline]
    pub fn dist(self, other: Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CanvasConfig {
    pub width: usize,
    pub height: usize,
    pub background: [f64; 3],
}

impl CanvasConfig {
    /// Square white canvas.
    pub fn square(size: usize) -> Result<Self> {
        Self::new(size, size, [1.0; 3])
    }

    pub fn new(width: usize, height: usize, background: [f64; 3]) -> Result<Self> {
        let canvas = Self { width, height, background };
        canvas.validate()?;
        Ok(canvas)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < 8 || self.height < 8 {
            return Err(Error::config(format!("canvas must be at least 8x8, got {}x{}", self.width, self.height)));
        }
        if self.background.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::config("background color must lie in [0, 1]"));
        }
        Ok(())
    }
}

impl Default for CanvasConfig {
    fn default() -> Self {
        Self { width: 224, height: 224, background: [1.0; 3] }
    }
}

/// A single Bézier segment of degree `points.len() - 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stroke {
    pub points: Vec<Point>,
    pub width: f64,
    pub color: [f64; 4],
}

impl Stroke {
    pub fn new(points: Vec<Point>, width: f64, color: [f64; 4]) -> Result<Self> {
        check_point_count(points.len())?;
        Ok(Self { points, width, color })
    }

    pub fn degree(&self) -> usize {
        self.points.len() - 1
    }

    pub fn rgb(&self) -> [f64; 3] {
        [self.color[0], self.color[1], self.color[2]]
    }

    pub fn alpha(&self) -> f64 {
        self.color[3]
    }
}

fn check_point_count(n: usize) -> Result<()> {
    if !(MIN_POINTS..=MAX_POINTS).contains(&n) {
        return Err(Error::config(format!("a stroke needs {MIN_POINTS} to {MAX_POINTS} control points, got {n}")));
    }
    Ok(())
}

/// Strokes in draw order (later strokes are composited over earlier ones).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub strokes: Vec<Stroke>,
    pub canvas: CanvasConfig,
}

impl Scene {
    pub fn empty(canvas: CanvasConfig) -> Self {
        Self { strokes: Vec::new(), canvas }
    }

    pub fn validate(&self) -> Result<()> {
        self.canvas.validate()?;
        for s in &self.strokes {
            check_point_count(s.points.len())?;
            if !s.width.is_finite() || s.width < 0.0 {
                return Err(Error::config(format!("invalid stroke width {}", s.width)));
            }
        }
        Ok(())
    }

    /// Maps a normalized point to pixel coordinates on this canvas.
    #[inline]
    pub fn to_pixels(&self, p: Point) -> Point {
        Point::new(p.x * self.canvas.width as f64, p.y * self.canvas.height as f64)
    }
}

/// Random initial scene.
///
/// Each stroke draws its point count uniformly from {3, 4, 5}. The first point
/// is uniform on the unit square and every later point is a step of at most
/// 0.05 per axis from its predecessor. Width is uniform in [1, 3] px and each
/// RGBA component uniform in [0, 1].
pub fn init_scene<R: Rng + ?Sized>(n_strokes: usize, canvas: CanvasConfig, rng: &mut R) -> Result<Scene> {
    if n_strokes == 0 {
        return Err(Error::config("stroke count must be at least 1"));
    }
    canvas.validate()?;
    let strokes = (0..n_strokes)
        .map(|_| {
            let n_points = rng.random_range(MIN_POINTS..=MAX_POINTS);
            let mut p = Point::new(rng.random::<f64>(), rng.random::<f64>());
            let mut points = Vec::with_capacity(n_points);
            points.push(p);
            for _ in 1..n_points {
                p = Point::new(p.x + rng.random_range(-0.05..=0.05), p.y + rng.random_range(-0.05..=0.05));
                points.push(p);
            }
            let width = rng.random_range(1.0..=3.0);
            let color = std::array::from_fn(|_| rng.random::<f64>());
            Stroke { points, width, color }
        })
        .collect();
    Ok(Scene { strokes, canvas })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    Points,
    Width,
    Color,
}

/// Where one stroke's scalars live in the flat vector.
///
/// Layout per stroke is `x0 y0 x1 y1 .. width r g b a`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StrokeSlot {
    pub points: usize,
    pub n_points: usize,
    pub width: usize,
    pub color: usize,
}

impl StrokeSlot {
    #[inline]
    pub fn point_x(&self, j: usize) -> usize {
        self.points + 2 * j
    }

    #[inline]
    pub fn point_y(&self, j: usize) -> usize {
        self.points + 2 * j + 1
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    pub slots: Vec<StrokeSlot>,
    pub groups: Vec<ParamGroup>,
}

impl ParamLayout {
    pub fn for_scene(scene: &Scene) -> Self {
        let mut slots = Vec::with_capacity(scene.strokes.len());
        let mut groups = Vec::new();
        for s in &scene.strokes {
            let n = s.points.len();
            let start = groups.len();
            groups.extend(std::iter::repeat_n(ParamGroup::Points, 2 * n));
            groups.push(ParamGroup::Width);
            groups.extend(std::iter::repeat_n(ParamGroup::Color, 4));
            slots.push(StrokeSlot { points: start, n_points: n, width: start + 2 * n, color: start + 2 * n + 1 });
        }
        Self { slots, groups }
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }
}

pub fn scene_to_params(scene: &Scene) -> (Vec<f64>, ParamLayout) {
    let layout = ParamLayout::for_scene(scene);
    let mut params = Vec::with_capacity(layout.len());
    for s in &scene.strokes {
        for p in &s.points {
            params.push(p.x);
            params.push(p.y);
        }
        params.push(s.width);
        params.extend_from_slice(&s.color);
    }
    (params, layout)
}

pub fn params_to_scene(params: &[f64], layout: &ParamLayout, canvas: &CanvasConfig) -> Result<Scene> {
    if params.len() != layout.len() {
        return Err(Error::contract(format!(
            "parameter vector has {} scalars, layout expects {}",
            params.len(),
            layout.len()
        )));
    }
    let strokes = layout
        .slots
        .iter()
        .map(|slot| Stroke {
            points: (0..slot.n_points).map(|j| Point::new(params[slot.point_x(j)], params[slot.point_y(j)])).collect(),
            width: params[slot.width],
            color: std::array::from_fn(|c| params[slot.color + c]),
        })
        .collect();
    Ok(Scene { strokes, canvas: canvas.clone() })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WidthBounds {
    pub min: f64,
    pub max: f64,
}

impl Default for WidthBounds {
    fn default() -> Self {
        Self { min: DEFAULT_MIN_WIDTH, max: DEFAULT_MAX_WIDTH }
    }
}

/// Projects colors onto [0, 1] and widths onto the bounds. Points are left
/// alone.
pub fn clamp_params(params: &mut [f64], layout: &ParamLayout, bounds: WidthBounds) -> Result<()> {
    if bounds.min > bounds.max {
        return Err(Error::config(format!("width bounds inverted: min {} > max {}", bounds.min, bounds.max)));
    }
    if params.len() != layout.len() {
        return Err(Error::contract("parameter vector does not match layout"));
    }
    for (v, g) in params.iter_mut().zip(&layout.groups) {
        match g {
            ParamGroup::Points => {}
            ParamGroup::Width => *v = v.clamp(bounds.min, bounds.max),
            ParamGroup::Color => *v = v.clamp(0.0, 1.0),
        }
    }
    Ok(())
}

/// Point on the Bézier curve through `ctrl` at `t`, by de Casteljau.
pub fn bezier_point(ctrl: &[Point], t: f64) -> Result<Point> {
    check_point_count(ctrl.len())?;
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("curve parameter {t} outside [0, 1]")));
    }
    Ok(de_casteljau(ctrl, t))
}

pub(crate) fn de_casteljau(ctrl: &[Point], t: f64) -> Point {
    let mut buf = [Point::default(); MAX_POINTS];
    let n = ctrl.len();
    buf[..n].copy_from_slice(ctrl);
    for level in 1..n {
        for i in 0..n - level {
            buf[i] = buf[i].lerp(buf[i + 1], t);
        }
    }
    buf[0]
}

/// Splits a Bézier at `t` into two curves of the same degree.
pub fn subdivide(ctrl: &[Point], t: f64) -> (Vec<Point>, Vec<Point>) {
    let n = ctrl.len();
    let mut work = ctrl.to_vec();
    let mut left = Vec::with_capacity(n);
    let mut right = Vec::with_capacity(n);
    left.push(work[0]);
    right.push(work[n - 1]);
    for level in 1..n {
        for i in 0..n - level {
            work[i] = work[i].lerp(work[i + 1], t);
        }
        left.push(work[0]);
        right.push(work[n - 1 - level]);
    }
    right.reverse();
    (left, right)
}

/// Bernstein basis values `B_{j,n-1}(t)` for `n` control points.
pub(crate) fn bernstein(n: usize, t: f64) -> [f64; MAX_POINTS] {
    let deg = n - 1;
    let mut out = [0.0; MAX_POINTS];
    let u = 1.0 - t;
    for (j, o) in out.iter_mut().enumerate().take(n) {
        *o = binomial(deg, j) * t.powi(j as i32) * u.powi((deg - j) as i32);
    }
    out
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Samples the stroke centerline at `t = i / (samples - 1)`.
///
/// # Panics
///
/// If `samples < 2`.
pub fn flatten_stroke(stroke: &Stroke, samples: usize) -> Vec<Point> {
    flatten_points(&stroke.points, samples)
}

pub(crate) fn flatten_points(ctrl: &[Point], samples: usize) -> Vec<Point> {
    assert!(samples >= 2, "flattening needs at least 2 samples");
    let last = (samples - 1) as f64;
    (0..samples).map(|i| de_casteljau(ctrl, i as f64 / last)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};
    use proptest::prelude::*;

    fn pts(v: &[(f64, f64)]) -> Vec<Point> {
        v.iter().map(|&(x, y)| Point::new(x, y)).collect()
    }

    #[test]
    fn init_paper_default_count() {
        let scene = init_scene(256, CanvasConfig::default(), &mut stream_rng(7, Stream::Init)).unwrap();
        assert_eq!(scene.strokes.len(), 256);
        assert!(scene.strokes.iter().all(|s| (3..=5).contains(&s.points.len())));
        let mut counts = [0usize; 6];
        for s in &scene.strokes {
            counts[s.points.len()] += 1;
        }
        assert!(counts[3] > 0 && counts[4] > 0 && counts[5] > 0);
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_scene(1, CanvasConfig::default(), &mut stream_rng(0, Stream::Init)).unwrap();
        let b = init_scene(1, CanvasConfig::default(), &mut stream_rng(0, Stream::Init)).unwrap();
        assert_eq!(a, b);
        let c = init_scene(1, CanvasConfig::default(), &mut stream_rng(1, Stream::Init)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn init_points_stay_local() {
        for seed in 0..20 {
            let scene = init_scene(16, CanvasConfig::default(), &mut stream_rng(seed, Stream::Init)).unwrap();
            for s in &scene.strokes {
                assert!((0.0..=1.0).contains(&s.points[0].x));
                assert!((0.0..=1.0).contains(&s.points[0].y));
                for p in &s.points {
                    assert!((-0.2..=1.2).contains(&p.x) && (-0.2..=1.2).contains(&p.y));
                }
                assert!((1.0..=3.0).contains(&s.width));
                assert!(s.color.iter().all(|c| (0.0..=1.0).contains(c)));
            }
        }
    }

    #[test]
    fn init_rejects_zero_strokes() {
        let err = init_scene(0, CanvasConfig::default(), &mut stream_rng(0, Stream::Init));
        assert!(matches!(err, Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn canvas_minimum_size() {
        assert!(CanvasConfig::square(7).is_err());
        assert!(CanvasConfig::square(8).is_ok());
    }

    #[test]
    fn param_lengths() {
        let one = Scene {
            strokes: vec![Stroke::new(pts(&[(0., 0.), (1., 0.), (1., 1.)]), 1.0, [0.0; 4]).unwrap()],
            canvas: CanvasConfig::default(),
        };
        assert_eq!(scene_to_params(&one).0.len(), 11);

        let five = Stroke::new(pts(&[(0., 0.); 5]), 1.0, [0.0; 4]).unwrap();
        let many = Scene { strokes: vec![five; 256], canvas: CanvasConfig::default() };
        assert_eq!(scene_to_params(&many).0.len(), 3840);
    }

    #[test]
    fn layout_groups_cover_every_scalar() {
        let scene = init_scene(9, CanvasConfig::default(), &mut stream_rng(3, Stream::Init)).unwrap();
        let (params, layout) = scene_to_params(&scene);
        assert_eq!(layout.groups.len(), params.len());
        let widths = layout.groups.iter().filter(|g| **g == ParamGroup::Width).count();
        let colors = layout.groups.iter().filter(|g| **g == ParamGroup::Color).count();
        assert_eq!(widths, 9);
        assert_eq!(colors, 36);
    }

    #[test]
    fn clamp_examples() {
        let scene = Scene {
            strokes: vec![Stroke::new(pts(&[(0., 0.), (1., 0.), (1., 1.)]), 1.0, [0.0; 4]).unwrap()],
            canvas: CanvasConfig::default(),
        };
        let (mut params, layout) = scene_to_params(&scene);
        let slot = layout.slots[0];
        params[slot.color] = 1.4;
        params[slot.color + 1] = -0.3;
        params[slot.width] = 0.2;
        params[slot.point_x(0)] = -3.0;
        clamp_params(&mut params, &layout, WidthBounds::default()).unwrap();
        assert_eq!(params[slot.color], 1.0);
        assert_eq!(params[slot.color + 1], 0.0);
        assert_eq!(params[slot.width], 0.5);
        assert_eq!(params[slot.point_x(0)], -3.0);

        let before = params.clone();
        clamp_params(&mut params, &layout, WidthBounds::default()).unwrap();
        assert_eq!(params, before);

        let bad = WidthBounds { min: 2.0, max: 1.0 };
        assert!(matches!(clamp_params(&mut params, &layout, bad), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn bezier_examples() {
        let q = pts(&[(0., 0.), (1., 0.), (1., 1.)]);
        assert_eq!(bezier_point(&q, 0.5).unwrap(), Point::new(0.75, 0.25));
        assert_eq!(bezier_point(&q, 0.0).unwrap(), q[0]);
        assert_eq!(bezier_point(&q, 1.0).unwrap(), q[2]);
        let arch = pts(&[(0., 0.), (0.5, 1.), (1., 0.)]);
        assert_eq!(bezier_point(&arch, 0.5).unwrap(), Point::new(0.5, 0.5));
        assert!(matches!(bezier_point(&q, 1.5), Err(Error::Domain(_))));
        assert!(matches!(bezier_point(&q, -0.1), Err(Error::Domain(_))));
    }

    #[test]
    fn bernstein_matches_de_casteljau() {
        let c = pts(&[(0.1, 0.3), (0.7, -0.2), (0.4, 0.9), (1.1, 0.5), (0.2, 0.2)]);
        for n in 3..=5 {
            for i in 0..=10 {
                let t = i as f64 / 10.0;
                let b = bernstein(n, t);
                let x: f64 = (0..n).map(|j| b[j] * c[j].x).sum();
                let y: f64 = (0..n).map(|j| b[j] * c[j].y).sum();
                let p = de_casteljau(&c[..n], t);
                assert!((p.x - x).abs() < 1e-12 && (p.y - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn subdivision_reproduces_curve() {
        let c = pts(&[(0.1, 0.3), (0.7, -0.2), (0.4, 0.9), (1.1, 0.5), (0.2, 0.2)]);
        let (l, r) = subdivide(&c, 0.5);
        for i in 0..=10 {
            let t = i as f64 / 10.0;
            let a = de_casteljau(&l, t);
            let b = de_casteljau(&c, 0.5 * t);
            assert!(a.dist(b) < 1e-12);
            let a = de_casteljau(&r, t);
            let b = de_casteljau(&c, 0.5 + 0.5 * t);
            assert!(a.dist(b) < 1e-12);
        }
    }

    #[test]
    fn flatten_examples() {
        let q = Stroke::new(pts(&[(0., 0.), (1., 0.), (1., 1.)]), 1.0, [0.0; 4]).unwrap();
        assert_eq!(flatten_stroke(&q, 2), pts(&[(0., 0.), (1., 1.)]));
        assert_eq!(flatten_stroke(&q, 3), pts(&[(0., 0.), (0.75, 0.25), (1., 1.)]));
    }

    #[test]
    fn chord_length_grows_with_samples() {
        // Grids t = i/(S-1) are only nested when S-1 doubles; for S = 4 -> 8
        // an inscribed polygon can come out marginally shorter.
        let scene = init_scene(50, CanvasConfig::default(), &mut stream_rng(11, Stream::Init)).unwrap();
        for s in &scene.strokes {
            let dense: f64 = flatten_stroke(s, 4097).windows(2).map(|w| w[0].dist(w[1])).sum();
            let lens: Vec<f64> = [2, 3, 5, 9, 17]
                .iter()
                .map(|&n| {
                    let poly = flatten_stroke(s, n);
                    poly.windows(2).map(|w| w[0].dist(w[1])).sum()
                })
                .collect();
            for w in lens.windows(2) {
                assert!(w[1] >= w[0] - 1e-12, "{lens:?}");
            }
            for n in [2, 4, 8, 16] {
                let len: f64 = flatten_stroke(s, n).windows(2).map(|w| w[0].dist(w[1])).sum();
                assert!(len <= dense + 1e-12);
            }
        }
    }

    fn arb_stroke() -> impl Strategy<Value = Stroke> {
        (3usize..=5)
            .prop_flat_map(|n| {
                (
                    prop::collection::vec((-2.0f64..2.0, -2.0f64..2.0), n),
                    0.0f64..20.0,
                    prop::array::uniform4(0.0f64..=1.0),
                )
            })
            .prop_map(|(p, w, c)| Stroke {
                points: p.into_iter().map(|(x, y)| Point::new(x, y)).collect(),
                width: w,
                color: c,
            })
    }

    proptest! {
        #[test]
        fn params_round_trip(strokes in prop::collection::vec(arb_stroke(), 0..12)) {
            let scene = Scene { strokes, canvas: CanvasConfig::default() };
            let (params, layout) = scene_to_params(&scene);
            let back = params_to_scene(&params, &layout, &scene.canvas).unwrap();
            prop_assert_eq!(back, scene);
        }

        #[test]
        fn bezier_is_affine_equivariant(
            stroke in arb_stroke(),
            m in prop::array::uniform4(-3.0f64..3.0),
            off in prop::array::uniform2(-5.0f64..5.0),
            t in 0.0f64..=1.0,
        ) {
            let map = |p: Point| Point::new(m[0] * p.x + m[1] * p.y + off[0], m[2] * p.x + m[3] * p.y + off[1]);
            let mapped: Vec<Point> = stroke.points.iter().copied().map(map).collect();
            let a = bezier_point(&mapped, t).unwrap();
            let b = map(bezier_point(&stroke.points, t).unwrap());
            prop_assert!((a.x - b.x).abs() < 1e-9 && (a.y - b.y).abs() < 1e-9);
        }

        #[test]
        fn clamp_enforces_bounds(
            strokes in prop::collection::vec(arb_stroke(), 1..6),
            noise in prop::collection::vec(-5.0f64..5.0, 100),
        ) {
            let scene = Scene { strokes, canvas: CanvasConfig::default() };
            let (mut params, layout) = scene_to_params(&scene);
            for (p, n) in params.iter_mut().zip(noise.iter().cycle()) {
                *p += n;
            }
            let bounds = WidthBounds::default();
            clamp_params(&mut params, &layout, bounds).unwrap();
            for (v, g) in params.iter().zip(&layout.groups) {
                match g {
                    ParamGroup::Color => prop_assert!((0.0..=1.0).contains(v)),
                    ParamGroup::Width => prop_assert!((bounds.min..=bounds.max).contains(v)),
                    ParamGroup::Points => {}
                }
            }
        }
    }
}
