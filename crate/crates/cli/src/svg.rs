//! SVG 1.1 export and import of stroke scenes.
//!
//! Quadratic and cubic strokes map onto `Q` and `C` path commands. Quartic
//! strokes have no SVG command: each is split at `t = 0.5` and every half is
//! replaced by a least-squares cubic with pinned endpoints, splitting further
//! while the fit deviates by [`FIT_TOLERANCE_PX`] or more.
//!
//! Renderers only read the standard attributes. Exact values ride along in
//! `data-*` attributes so that [`import_svg`] restores the scene losslessly.

use std::fmt::Write as _;

use roxmltree::Document;
use vecsketch_core::scene::{bezier_point, subdivide, CanvasConfig, Point, Scene, Stroke};

/// Upper bound on the distance between a quartic and its cubic export.
pub const FIT_TOLERANCE_PX: f64 = 0.25;

const FIT_SAMPLES: usize = 65;
const CHECK_SAMPLES: usize = 513;
const MAX_SPLIT_DEPTH: u32 = 10;

#[derive(Debug, thiserror::Error)]
pub enum SvgError {
    #[error("malformed SVG: {0}")]
    Xml(#[from] roxmltree::Error),
    #[error("unsupported SVG content: {0}")]
    Unsupported(String),
}

/// An exported document and the worst cubic-fit deviation it contains.
#[derive(Debug, Clone, PartialEq)]
pub struct SvgExport {
    pub document: String,
    /// Largest parametric distance, in pixels, between any quartic stroke
    /// and its cubic segments; 0 when the scene has none.
    pub max_fit_error_px: f64,
}

fn hex(rgb: [f64; 3]) -> String {
    let byte = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    format!("#{:02x}{:02x}{:02x}", byte(rgb[0]), byte(rgb[1]), byte(rgb[2]))
}

fn join(values: impl IntoIterator<Item = f64>) -> String {
    values.into_iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ")
}

fn cubic_at(c: &[Point; 4], t: f64) -> Point {
    let u = 1.0 - t;
    let b = [u * u * u, 3.0 * u * u * t, 3.0 * u * t * t, t * t * t];
    Point::new(b.iter().zip(c).map(|(w, p)| w * p.x).sum(), b.iter().zip(c).map(|(w, p)| w * p.y).sum())
}

fn eval(ctrl: &[Point], t: f64) -> Point {
    bezier_point(ctrl, t).expect("control point count and t checked by caller")
}

/// Least-squares cubic through the endpoints of `ctrl`, sampled at equal
/// parameter steps, and its maximum parametric deviation.
fn fit_cubic(ctrl: &[Point]) -> ([Point; 4], f64) {
    let p0 = ctrl[0];
    let p3 = ctrl[ctrl.len() - 1];
    let (mut a11, mut a12, mut a22) = (0.0, 0.0, 0.0);
    let (mut rx1, mut rx2, mut ry1, mut ry2) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..FIT_SAMPLES {
        let t = i as f64 / (FIT_SAMPLES - 1) as f64;
        let u = 1.0 - t;
        let (b0, b1, b2, b3) = (u * u * u, 3.0 * u * u * t, 3.0 * u * t * t, t * t * t);
        let q = eval(ctrl, t);
        let rx = q.x - b0 * p0.x - b3 * p3.x;
        let ry = q.y - b0 * p0.y - b3 * p3.y;
        a11 += b1 * b1;
        a12 += b1 * b2;
        a22 += b2 * b2;
        rx1 += b1 * rx;
        rx2 += b2 * rx;
        ry1 += b1 * ry;
        ry2 += b2 * ry;
    }
    let det = a11 * a22 - a12 * a12;
    let solve = |r1: f64, r2: f64| ((a22 * r1 - a12 * r2) / det, (a11 * r2 - a12 * r1) / det);
    let (x1, x2) = solve(rx1, rx2);
    let (y1, y2) = solve(ry1, ry2);
    let cubic = [p0, Point::new(x1, y1), Point::new(x2, y2), p3];
    let err = (0..CHECK_SAMPLES)
        .map(|i| {
            let t = i as f64 / (CHECK_SAMPLES - 1) as f64;
            eval(ctrl, t).dist(cubic_at(&cubic, t))
        })
        .fold(0.0, f64::max);
    (cubic, err)
}

fn fit_recursive(ctrl: &[Point], depth: u32, out: &mut Vec<[Point; 4]>) -> f64 {
    let (cubic, err) = fit_cubic(ctrl);
    if err < FIT_TOLERANCE_PX || depth >= MAX_SPLIT_DEPTH {
        out.push(cubic);
        return err;
    }
    let (left, right) = subdivide(ctrl, 0.5);
    fit_recursive(&left, depth + 1, out).max(fit_recursive(&right, depth + 1, out))
}

/// Cubic segments approximating a quartic given in pixel coordinates: at
/// least two, one per half, more where a half does not fit.
pub fn quartic_to_cubics(ctrl: &[Point]) -> (Vec<[Point; 4]>, f64) {
    assert_eq!(ctrl.len(), 5, "quartic needs five control points");
    let (left, right) = subdivide(ctrl, 0.5);
    let mut out = Vec::new();
    let err = fit_recursive(&left, 0, &mut out).max(fit_recursive(&right, 0, &mut out));
    (out, err)
}

fn path_data(px: &[Point]) -> (String, f64) {
    let mut d = format!("M {} {}", px[0].x, px[0].y);
    let mut err = 0.0;
    match px.len() {
        3 => write!(d, " Q {} {} {} {}", px[1].x, px[1].y, px[2].x, px[2].y).unwrap(),
        4 => write!(d, " C {} {} {} {} {} {}", px[1].x, px[1].y, px[2].x, px[2].y, px[3].x, px[3].y).unwrap(),
        5 => {
            let (segments, e) = quartic_to_cubics(px);
            err = e;
            for c in segments {
                write!(d, " C {} {} {} {} {} {}", c[1].x, c[1].y, c[2].x, c[2].y, c[3].x, c[3].y).unwrap();
            }
        }
        n => unreachable!("validated scene has a stroke with {n} points"),
    }
    (d, err)
}

/// Serializes `scene` as a standalone SVG 1.1 document.
pub fn export_svg(scene: &Scene) -> SvgExport {
    let (w, h) = (scene.canvas.width, scene.canvas.height);
    let bg = scene.canvas.background;
    let mut doc = String::new();
    writeln!(
        doc,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    )
    .unwrap();
    writeln!(doc, r#"  <rect x="0" y="0" width="{w}" height="{h}" fill="{}" data-rgb="{}"/>"#, hex(bg), join(bg))
        .unwrap();
    let mut max_err = 0.0f64;
    for stroke in &scene.strokes {
        let px: Vec<Point> = stroke.points.iter().map(|&p| scene.to_pixels(p)).collect();
        let (d, err) = path_data(&px);
        max_err = max_err.max(err);
        let exact = if stroke.points.len() == 5 {
            format!(r#" data-ctrl="{}""#, join(stroke.points.iter().flat_map(|p| [p.x, p.y])))
        } else {
            String::new()
        };
        writeln!(
            doc,
            r#"  <path d="{d}" fill="none" stroke="{}" stroke-opacity="{}" stroke-width="{}" stroke-linecap="round" stroke-linejoin="round" data-rgb="{}"{exact}/>"#,
            hex(stroke.rgb()),
            stroke.alpha(),
            stroke.width,
            join(stroke.rgb()),
        )
        .unwrap();
    }
    doc.push_str("</svg>\n");
    SvgExport { document: doc, max_fit_error_px: max_err }
}

fn numbers(s: &str) -> Result<Vec<f64>, SvgError> {
    s.split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|_| SvgError::Unsupported(format!("bad number {t:?}"))))
        .collect()
}

fn attr_f64(node: roxmltree::Node, name: &str, default: Option<f64>) -> Result<f64, SvgError> {
    match node.attribute(name) {
        Some(v) => v.trim().parse().map_err(|_| SvgError::Unsupported(format!("bad {name} {v:?}"))),
        None => default.ok_or_else(|| SvgError::Unsupported(format!("missing {name}"))),
    }
}

fn color(node: roxmltree::Node, paint: &str) -> Result<[f64; 3], SvgError> {
    if let Some(exact) = node.attribute("data-rgb") {
        let v = numbers(exact)?;
        if let [r, g, b] = v[..] {
            return Ok([r, g, b]);
        }
        return Err(SvgError::Unsupported(format!("data-rgb needs 3 values, got {}", v.len())));
    }
    let spec = node.attribute(paint).ok_or_else(|| SvgError::Unsupported(format!("missing {paint}")))?;
    let c: svgtypes::Color = spec.parse().map_err(|_| SvgError::Unsupported(format!("bad color {spec:?}")))?;
    Ok([c.red as f64 / 255.0, c.green as f64 / 255.0, c.blue as f64 / 255.0])
}

/// Control points of a single `M` + `Q`/`C` path, in pixels.
fn path_points(d: &str) -> Result<Vec<Point>, SvgError> {
    use svgtypes::PathSegment as S;
    let mut pts = Vec::new();
    for seg in svgtypes::PathParser::from(d) {
        let seg = seg.map_err(|e| SvgError::Unsupported(format!("path data: {e}")))?;
        match (pts.len(), seg) {
            (0, S::MoveTo { abs: true, x, y }) => pts.push(Point::new(x, y)),
            (1, S::Quadratic { abs: true, x1, y1, x, y }) => pts.extend([Point::new(x1, y1), Point::new(x, y)]),
            (1, S::CurveTo { abs: true, x1, y1, x2, y2, x, y }) => {
                pts.extend([Point::new(x1, y1), Point::new(x2, y2), Point::new(x, y)])
            }
            (_, other) => return Err(SvgError::Unsupported(format!("path segment {other:?}"))),
        }
    }
    if pts.len() < 3 {
        return Err(SvgError::Unsupported(format!("path {d:?} has no curve")));
    }
    Ok(pts)
}

/// Parses a document written by [`export_svg`] back into a scene.
pub fn import_svg(document: &str) -> Result<Scene, SvgError> {
    let doc = Document::parse(document)?;
    let root = doc.root_element();
    if root.tag_name().name() != "svg" {
        return Err(SvgError::Unsupported("root element is not <svg>".into()));
    }
    let width = attr_f64(root, "width", None)? as usize;
    let height = attr_f64(root, "height", None)? as usize;
    let mut background = [1.0; 3];
    let mut strokes = Vec::new();
    for node in root.children().filter(|n| n.is_element()) {
        match node.tag_name().name() {
            "rect" if strokes.is_empty() => background = color(node, "fill")?,
            "path" => {
                let normalized = match node.attribute("data-ctrl") {
                    Some(exact) => numbers(exact)?.chunks_exact(2).map(|c| Point::new(c[0], c[1])).collect(),
                    None => {
                        let d = node.attribute("d").ok_or_else(|| SvgError::Unsupported("path without d".into()))?;
                        path_points(d)?
                            .into_iter()
                            .map(|p| Point::new(p.x / width as f64, p.y / height as f64))
                            .collect::<Vec<_>>()
                    }
                };
                let [r, g, b] = color(node, "stroke")?;
                let alpha = attr_f64(node, "stroke-opacity", Some(1.0))?;
                let stroke_width = attr_f64(node, "stroke-width", Some(1.0))?;
                let stroke = Stroke::new(normalized, stroke_width, [r, g, b, alpha])
                    .map_err(|e| SvgError::Unsupported(e.to_string()))?;
                strokes.push(stroke);
            }
            other => return Err(SvgError::Unsupported(format!("element <{other}>"))),
        }
    }
    let canvas = CanvasConfig::new(width, height, background).map_err(|e| SvgError::Unsupported(e.to_string()))?;
    Ok(Scene { strokes, canvas })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn canvas() -> CanvasConfig {
        CanvasConfig::square(100).unwrap()
    }

    #[test]
    fn empty_scene_has_only_background() {
        let svg = export_svg(&Scene::empty(canvas())).document;
        let doc = Document::parse(&svg).unwrap();
        let children: Vec<_> = doc.root_element().children().filter(|n| n.is_element()).collect();
        assert_eq!(children.len(), 1);
        assert_eq!(children[0].tag_name().name(), "rect");
        assert_eq!(children[0].attribute("fill"), Some("#ffffff"));
    }

    #[test]
    fn one_quadratic_stroke_is_one_q_path() {
        let stroke = Stroke::new(
            vec![Point::new(0.1, 0.2), Point::new(0.5, 0.9), Point::new(0.9, 0.2)],
            2.0,
            [1.0, 0.0, 0.0, 1.0],
        )
        .unwrap();
        let svg = export_svg(&Scene { strokes: vec![stroke], canvas: canvas() }).document;
        let doc = Document::parse(&svg).unwrap();
        let paths: Vec<_> = doc.descendants().filter(|n| n.has_tag_name("path")).collect();
        assert_eq!(paths.len(), 1);
        let d = paths[0].attribute("d").unwrap();
        assert_eq!(d.matches('Q').count(), 1);
        assert!(!d.contains('C'));
        assert_eq!(d, "M 10 20 Q 50 90 90 20");
    }

    #[test]
    fn cubic_fit_reproduces_a_raised_cubic() {
        // A cubic written as a quartic is fitted exactly.
        let c = [Point::new(0.0, 0.0), Point::new(30.0, 80.0), Point::new(70.0, -40.0), Point::new(100.0, 10.0)];
        let q: Vec<Point> = (0..5)
            .map(|i| {
                let k = i as f64 / 4.0;
                let a = if i == 0 { c[0] } else { c[i - 1] };
                let b = if i == 4 { c[3] } else { c[i] };
                Point::new(k * a.x + (1.0 - k) * b.x, k * a.y + (1.0 - k) * b.y)
            })
            .collect();
        let (fit, err) = fit_cubic(&q);
        assert!(err < 1e-9, "{err}");
        for (a, b) in fit.iter().zip(&c) {
            assert!(a.dist(*b) < 1e-9);
        }
    }

    #[test]
    fn wild_quartic_is_split_until_within_tolerance() {
        let q = [
            Point::new(0.0, 0.0),
            Point::new(400.0, 900.0),
            Point::new(-300.0, -800.0),
            Point::new(900.0, 500.0),
            Point::new(10.0, 10.0),
        ];
        let (segments, err) = quartic_to_cubics(&q);
        assert!(err < FIT_TOLERANCE_PX, "{err}");
        assert!(segments.len() > 2);
        assert_eq!(segments[0][0], q[0]);
        assert_eq!(segments.last().unwrap()[3], q[4]);
        for w in segments.windows(2) {
            assert_eq!(w[0][3], w[1][0]);
        }
    }

    #[test]
    fn quartic_round_trip_uses_exact_control_points() {
        let stroke = Stroke::new(
            (0..5).map(|i| Point::new(0.1 + 0.2 * i as f64, 0.5 + 0.1 * (i % 2) as f64)).collect(),
            3.5,
            [0.1, 0.2, 0.3, 0.4],
        )
        .unwrap();
        let scene = Scene { strokes: vec![stroke], canvas: canvas() };
        let export = export_svg(&scene);
        assert!(export.max_fit_error_px < FIT_TOLERANCE_PX);
        assert_eq!(import_svg(&export.document).unwrap(), scene);
    }

    #[test]
    fn plain_svg_without_data_attributes_imports() {
        let svg = r##"<svg xmlns="http://www.w3.org/2000/svg" width="50" height="25">
            <rect width="50" height="25" fill="#000000"/>
            <path d="M 0 0 C 10 5 20 5 50 25" stroke="#ff0000" stroke-width="2"/>
        </svg>"##;
        let scene = import_svg(svg).unwrap();
        assert_eq!(scene.canvas.background, [0.0; 3]);
        assert_eq!(scene.strokes[0].points[3], Point::new(1.0, 1.0));
        assert_eq!(scene.strokes[0].color, [1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn relative_paths_are_rejected() {
        let svg = r#"<svg xmlns="http://www.w3.org/2000/svg" width="10" height="10"><path d="m 0 0 q 1 1 2 2" stroke="red"/></svg>"#;
        assert!(matches!(import_svg(svg), Err(SvgError::Unsupported(_))));
    }
}
