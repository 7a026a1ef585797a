//! Prompts, the scoring-backend contract, and the losses built on it.
//!
//! For a batch of `D` augmented copies the prompt loss is
//!
//! ```text
//! L = -Σ_d Σ_pos w·cos(E(img_d), e) + λ·Σ_d Σ_neg w·cos(E(img_d), e)
//! ```
//!
//! summed (not averaged) over copies; [`ScoreReport::loss_mean`] carries the
//! per-copy mean for reporting.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::raster::ImageTensor;

/// Default weight of negative prompts relative to positive ones.
pub const DEFAULT_NEGATIVE_SCALE: f64 = 0.3;

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::contract(format!("vector lengths differ: {} vs {}", a.len(), b.len())));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Domain("cosine similarity of a zero vector".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok(dot / (na * nb))
}

/// Unit-norm embedding vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn normalized(v: Vec<f64>) -> Result<Self> {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm.is_nan() || norm <= 0.0 || norm.is_infinite() {
            return Err(Error::Domain("cannot normalize a zero or non-finite embedding".into()));
        }
        Ok(Self(v.into_iter().map(|x| x / norm).collect()))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &[f64]) -> f64 {
        self.0.iter().zip(other).map(|(a, b)| a * b).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prompt {
    pub text: String,
    #[serde(default = "one")]
    pub weight: f64,
}

fn one() -> f64 {
    1.0
}

fn default_negative_scale() -> f64 {
    DEFAULT_NEGATIVE_SCALE
}

impl Prompt {
    pub fn new(text: impl Into<String>, weight: f64) -> Self {
        Self { text: text.into(), weight }
    }

    /// Parses `text` or `text:weight`. A suffix that is not a number stays
    /// part of the text.
    pub fn parse(spec: &str) -> Self {
        if let Some((text, w)) = spec.rsplit_once(':') {
            if let Ok(weight) = w.trim().parse::<f64>() {
                return Self::new(text, weight);
            }
        }
        Self::new(spec, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSet {
    pub positives: Vec<Prompt>,
    #[serde(default)]
    pub negatives: Vec<Prompt>,
    /// λ, applied multiplicatively to every negative weight.
    #[serde(default = "default_negative_scale")]
    pub negative_scale: f64,
}

impl Default for PromptSet {
    fn default() -> Self {
        Self { positives: Vec::new(), negatives: Vec::new(), negative_scale: DEFAULT_NEGATIVE_SCALE }
    }
}

impl PromptSet {
    pub fn single(text: impl Into<String>) -> Self {
        Self { positives: vec![Prompt::new(text, 1.0)], ..Self::default() }
    }

    pub fn with_negative(mut self, text: impl Into<String>, weight: f64) -> Self {
        self.negatives.push(Prompt::new(text, weight));
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.positives.is_empty() {
            return Err(Error::config("at least one positive prompt is required"));
        }
        for p in self.positives.iter().chain(&self.negatives) {
            if p.text.trim().is_empty() {
                return Err(Error::config("prompt text must not be empty"));
            }
            if !(p.weight.is_finite() && p.weight > 0.0) {
                return Err(Error::config(format!("prompt {:?} has invalid weight {}", p.text, p.weight)));
            }
        }
        if !(self.negative_scale.is_finite() && self.negative_scale >= 0.0) {
            return Err(Error::config("negative scale must be finite and non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negative,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompiledPrompt {
    pub text: String,
    pub weight: f64,
    pub polarity: Polarity,
    pub embedding: Embedding,
}

/// Prompts with their text embeddings, positives first.
#[derive(Debug, Clone, PartialEq)]
pub struct CompiledPrompts {
    pub prompts: Vec<CompiledPrompt>,
    pub negative_scale: f64,
}

impl CompiledPrompts {
    /// Signed loss coefficient of a prompt: `-w` for positives, `λ·w` for
    /// negatives.
    pub fn coefficient(&self, p: &CompiledPrompt) -> f64 {
        match p.polarity {
            Polarity::Positive => -p.weight,
            Polarity::Negative => self.negative_scale * p.weight,
        }
    }

    pub fn dim(&self) -> usize {
        self.prompts.first().map_or(0, |p| p.embedding.dim())
    }
}

/// Encodes every prompt of `set` through `backend`.
pub fn compile_prompts(backend: &mut dyn ScoringBackend, set: &PromptSet) -> Result<CompiledPrompts> {
    set.validate()?;
    let entries: Vec<(&Prompt, Polarity)> = set
        .positives
        .iter()
        .map(|p| (p, Polarity::Positive))
        .chain(set.negatives.iter().map(|p| (p, Polarity::Negative)))
        .collect();
    let texts: Vec<String> = entries.iter().map(|(p, _)| p.text.clone()).collect();
    let embeddings = backend.encode_text(&texts)?;
    if embeddings.len() != texts.len() {
        return Err(Error::contract(format!(
            "backend returned {} embeddings for {} texts",
            embeddings.len(),
            texts.len()
        )));
    }
    let dim = backend.info().dim;
    let prompts = entries
        .into_iter()
        .zip(embeddings)
        .map(|((p, polarity), embedding)| {
            if embedding.dim() != dim {
                return Err(Error::config(format!(
                    "text embedding has dimension {}, backend reports {dim}",
                    embedding.dim()
                )));
            }
            Ok(CompiledPrompt { text: p.text.clone(), weight: p.weight, polarity, embedding })
        })
        .collect::<Result<_>>()?;
    Ok(CompiledPrompts { prompts, negative_scale: set.negative_scale })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptScore {
    pub text: String,
    pub polarity: Polarity,
    pub weight: f64,
    /// Cosine to the prompt averaged over the batch copies.
    pub mean_cosine: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    /// Loss summed over copies; this is what gets differentiated.
    pub loss: f64,
    pub loss_mean: f64,
    pub copies: usize,
    pub prompts: Vec<PromptScore>,
}

impl ScoreReport {
    /// The loss rebuilt from the per-prompt mean cosines.
    pub fn recomposed_loss(&self, negative_scale: f64) -> f64 {
        self.prompts
            .iter()
            .map(|p| {
                let coef = match p.polarity {
                    Polarity::Positive => -p.weight,
                    Polarity::Negative => negative_scale * p.weight,
                };
                coef * p.mean_cosine * self.copies as f64
            })
            .sum()
    }
}

/// Loss and per-copy `dL/dembedding` for image embeddings against prompts.
pub fn score_embeddings(images: &[Embedding], prompts: &CompiledPrompts) -> (ScoreReport, Vec<Vec<f64>>) {
    let d = images.len();
    let dim = prompts.dim();
    let mut loss = 0.0;
    let mut scores: Vec<PromptScore> = prompts
        .prompts
        .iter()
        .map(|p| PromptScore { text: p.text.clone(), polarity: p.polarity, weight: p.weight, mean_cosine: 0.0 })
        .collect();
    let mut grads = Vec::with_capacity(d);
    for e in images {
        let mut g = vec![0.0; dim];
        for (p, score) in prompts.prompts.iter().zip(scores.iter_mut()) {
            let coef = prompts.coefficient(p);
            let cos = e.dot(p.embedding.as_slice());
            loss += coef * cos;
            score.mean_cosine += cos;
            for (gi, ti) in g.iter_mut().zip(p.embedding.as_slice()) {
                *gi += coef * ti;
            }
        }
        grads.push(g);
    }
    for s in &mut scores {
        s.mean_cosine /= d.max(1) as f64;
    }
    let report = ScoreReport { loss, loss_mean: loss / d.max(1) as f64, copies: d, prompts: scores };
    (report, grads)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendInfo {
    pub dim: usize,
    pub model: String,
}

/// Image/text encoder seen through its embedding and pixel-gradient surface.
pub trait ScoringBackend: Send {
    fn info(&self) -> BackendInfo;

    /// One unit-norm embedding per text.
    fn encode_text(&mut self, texts: &[String]) -> Result<Vec<Embedding>>;

    /// Image embeddings without gradients.
    fn encode_images(&mut self, images: &[ImageTensor]) -> Result<Vec<Embedding>>;

    /// Summed prompt loss over the batch and its gradient with respect to
    /// every pixel of every copy.
    fn score_images(
        &mut self,
        batch: &[ImageTensor],
        prompts: &CompiledPrompts,
    ) -> Result<(ScoreReport, Vec<ImageTensor>)>;
}

/// Slack for values that leave [0, 1] only through interpolation rounding.
const RANGE_SLACK: f64 = 1e-9;

/// Checks that a batch is non-empty, uniformly shaped, and within [0, 1].
pub fn validate_batch(batch: &[ImageTensor]) -> Result<()> {
    let first = batch.first().ok_or_else(|| Error::contract("empty image batch"))?;
    for (i, img) in batch.iter().enumerate() {
        img.check_shape(first.height, first.width, &format!("batch image {i}"))?;
        if img.data.iter().any(|v| !(-RANGE_SLACK..=1.0 + RANGE_SLACK).contains(v)) {
            return Err(Error::contract(format!("batch image {i} has values outside [0, 1]")));
        }
    }
    Ok(())
}

/// Something the optimization loop can minimize over a batch of images.
pub trait Objective {
    fn evaluate(&mut self, batch: &[ImageTensor]) -> Result<(ScoreReport, Vec<ImageTensor>)>;
}

/// The prompt loss of a backend against fixed compiled prompts.
pub struct PromptObjective<'a> {
    backend: &'a mut dyn ScoringBackend,
    prompts: CompiledPrompts,
}

impl<'a> PromptObjective<'a> {
    pub fn new(backend: &'a mut dyn ScoringBackend, prompts: CompiledPrompts) -> Self {
        Self { backend, prompts }
    }

    pub fn compile(backend: &'a mut dyn ScoringBackend, set: &PromptSet) -> Result<Self> {
        let prompts = compile_prompts(backend, set)?;
        Ok(Self { backend, prompts })
    }

    pub fn prompts(&self) -> &CompiledPrompts {
        &self.prompts
    }

    pub fn backend(&mut self) -> &mut dyn ScoringBackend {
        self.backend
    }
}

impl Objective for PromptObjective<'_> {
    fn evaluate(&mut self, batch: &[ImageTensor]) -> Result<(ScoreReport, Vec<ImageTensor>)> {
        self.backend.score_images(batch, &self.prompts)
    }
}

/// Mean squared error to a fixed target, averaged over the batch.
#[derive(Debug, Clone)]
pub struct PixelTargetObjective {
    target: ImageTensor,
}

impl PixelTargetObjective {
    pub fn new(target: ImageTensor) -> Self {
        Self { target }
    }

    pub fn target(&self) -> &ImageTensor {
        &self.target
    }
}

impl Objective for PixelTargetObjective {
    fn evaluate(&mut self, batch: &[ImageTensor]) -> Result<(ScoreReport, Vec<ImageTensor>)> {
        if batch.is_empty() {
            return Err(Error::contract("empty image batch"));
        }
        let m = self.target.data.len() as f64;
        let d = batch.len() as f64;
        let mut loss = 0.0;
        let mut grads = Vec::with_capacity(batch.len());
        for (i, img) in batch.iter().enumerate() {
            img.check_shape(self.target.height, self.target.width, &format!("batch image {i}"))?;
            let mut g = ImageTensor::zeros(img.height, img.width);
            let mut sq = 0.0;
            for ((gi, a), b) in g.data.iter_mut().zip(&img.data).zip(&self.target.data) {
                let diff = a - b;
                sq += diff * diff;
                *gi = 2.0 * diff / (m * d);
            }
            loss += sq / m;
            grads.push(g);
        }
        let loss = loss / d;
        Ok((ScoreReport { loss, loss_mean: loss, copies: batch.len(), prompts: Vec::new() }, grads))
    }
}

/// Pooling window `[start, end)` of output cell `i` when `len` inputs are
/// pooled into `cells` outputs (windows overlap when `len` is not a
/// multiple of `cells`).
fn pool_window(i: usize, len: usize, cells: usize) -> (usize, usize) {
    let start = i * len / cells;
    let end = ((i + 1) * len).div_ceil(cells);
    (start, end.max(start + 1).min(len))
}

/// Deterministic stand-in for a neural encoder.
///
/// Images are average-pooled to a 16×16×3 grid, flattened, projected by a
/// fixed Gaussian 512×768 matrix and normalized. Texts map to normalized
/// Gaussian vectors seeded by the backend seed and a SHA-256 of the text.
#[derive(Debug, Clone)]
pub struct MockBackend {
    seed: u64,
    /// Row-major `dim x features`.
    projection: Vec<f64>,
}

impl MockBackend {
    pub const DIM: usize = 512;
    pub const GRID: usize = 16;
    pub const FEATURES: usize = Self::GRID * Self::GRID * 3;

    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (Self::FEATURES as f64).sqrt();
        let projection = (0..Self::DIM * Self::FEATURES)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                scale * z
            })
            .collect();
        Self { seed, projection }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn text_vector(&self, text: &str) -> Result<Embedding> {
        let digest = Sha256::digest(text.as_bytes());
        let mut bytes = [0u8; 8];
        bytes.copy_from_slice(&digest[..8]);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ u64::from_le_bytes(bytes));
        let v: Vec<f64> = (0..Self::DIM).map(|_| StandardNormal.sample(&mut rng)).collect();
        Embedding::normalized(v)
    }

    fn pool(img: &ImageTensor) -> Vec<f64> {
        let g = Self::GRID;
        let mut out = vec![0.0; Self::FEATURES];
        for gy in 0..g {
            let (y0, y1) = pool_window(gy, img.height, g);
            for gx in 0..g {
                let (x0, x1) = pool_window(gx, img.width, g);
                let count = ((y1 - y0) * (x1 - x0)) as f64;
                let cell = &mut out[(gy * g + gx) * 3..(gy * g + gx) * 3 + 3];
                for y in y0..y1 {
                    for x in x0..x1 {
                        let p = img.pixel(x, y);
                        for ch in 0..3 {
                            cell[ch] += p[ch];
                        }
                    }
                }
                for c in cell.iter_mut() {
                    *c /= count;
                }
            }
        }
        out
    }

    fn pool_pullback(height: usize, width: usize, grad: &[f64]) -> ImageTensor {
        let g = Self::GRID;
        let mut out = ImageTensor::zeros(height, width);
        for gy in 0..g {
            let (y0, y1) = pool_window(gy, height, g);
            for gx in 0..g {
                let (x0, x1) = pool_window(gx, width, g);
                let count = ((y1 - y0) * (x1 - x0)) as f64;
                let cell = &grad[(gy * g + gx) * 3..(gy * g + gx) * 3 + 3];
                for y in y0..y1 {
                    for x in x0..x1 {
                        let o = out.offset(x, y);
                        for (d, c) in out.data[o..o + 3].iter_mut().zip(cell) {
                            *d += c / count;
                        }
                    }
                }
            }
        }
        out
    }

    /// Unnormalized projection of the pooled image.
    fn project(&self, features: &[f64]) -> Vec<f64> {
        self.projection
            .chunks_exact(Self::FEATURES)
            .map(|row| row.iter().zip(features).map(|(a, b)| a * b).sum())
            .collect()
    }

    fn project_transpose(&self, grad: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; Self::FEATURES];
        for (row, g) in self.projection.chunks_exact(Self::FEATURES).zip(grad) {
            for (o, r) in out.iter_mut().zip(row) {
                *o += r * g;
            }
        }
        out
    }

    fn embed(&self, img: &ImageTensor) -> Result<(Embedding, Vec<f64>)> {
        let z = self.project(&Self::pool(img));
        let e = Embedding::normalized(z.clone())?;
        Ok((e, z))
    }
}

impl ScoringBackend for MockBackend {
    fn info(&self) -> BackendInfo {
        BackendInfo { dim: Self::DIM, model: format!("mock-pool16-proj512/seed={}", self.seed) }
    }

    fn encode_text(&mut self, texts: &[String]) -> Result<Vec<Embedding>> {
        texts
            .iter()
            .map(|t| {
                if t.is_empty() {
                    return Err(Error::contract("cannot encode an empty string"));
                }
                self.text_vector(t)
            })
            .collect()
    }

    fn encode_images(&mut self, images: &[ImageTensor]) -> Result<Vec<Embedding>> {
        validate_batch(images)?;
        images.iter().map(|img| self.embed(img).map(|(e, _)| e)).collect()
    }

    fn score_images(
        &mut self,
        batch: &[ImageTensor],
        prompts: &CompiledPrompts,
    ) -> Result<(ScoreReport, Vec<ImageTensor>)> {
        validate_batch(batch)?;
        if prompts.dim() != Self::DIM {
            return Err(Error::contract(format!("prompt embeddings have dimension {}", prompts.dim())));
        }
        let embedded: Vec<(Embedding, Vec<f64>)> = batch.iter().map(|img| self.embed(img)).collect::<Result<_>>()?;
        let embeddings: Vec<Embedding> = embedded.iter().map(|(e, _)| e.clone()).collect();
        let (report, d_emb) = score_embeddings(&embeddings, prompts);
        let grads = batch
            .iter()
            .zip(&embedded)
            .zip(&d_emb)
            .map(|((img, (e, z)), q)| {
                // d(z/|z|)/dz applied to q: (q - (q·e) e) / |z|
                let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
                let qe = e.dot(q);
                let dz: Vec<f64> = q.iter().zip(e.as_slice()).map(|(qi, ei)| (qi - qe * ei) / norm).collect();
                Self::pool_pullback(img.height, img.width, &self.project_transpose(&dz))
            })
            .collect();
        Ok((report, grads))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};
    use proptest::prelude::*;
    use rand::Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> ImageTensor {
        let mut rng = stream_rng(seed, Stream::Init);
        ImageTensor::new(h, w, (0..h * w * 3).map(|_| rng.random_range(0.05..0.95)).collect()).unwrap()
    }

    fn texts(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn cosine_examples() {
        let v = [0.3, -1.2, 2.0];
        assert!((cosine_similarity(&v, &v).unwrap() - 1.0).abs() < 1e-15);
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        assert!((cosine_similarity(&v, &neg).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!(matches!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::Domain(_))));
    }

    proptest! {
        #[test]
        fn cosine_is_scale_invariant(
            a in prop::collection::vec(-10.0f64..10.0, 8),
            b in prop::collection::vec(-10.0f64..10.0, 8),
            k in 0.001f64..1000.0,
        ) {
            prop_assume!(a.iter().any(|x| x.abs() > 1e-3) && b.iter().any(|x| x.abs() > 1e-3));
            let scaled: Vec<f64> = a.iter().map(|x| k * x).collect();
            let c1 = cosine_similarity(&a, &b).unwrap();
            let c2 = cosine_similarity(&scaled, &b).unwrap();
            prop_assert!((c1 - c2).abs() < 1e-9);
        }
    }

    #[test]
    fn prompt_parsing() {
        assert_eq!(Prompt::parse("a cat"), Prompt::new("a cat", 1.0));
        assert_eq!(Prompt::parse("a cat:0.5"), Prompt::new("a cat", 0.5));
        assert_eq!(Prompt::parse("time: noon"), Prompt::new("time: noon", 1.0));
    }

    #[test]
    fn prompt_set_validation() {
        assert!(PromptSet::default().validate().is_err());
        assert!(PromptSet::single("x").validate().is_ok());
        assert!(PromptSet::single("x").with_negative("y", -1.0).validate().is_err());
        assert!(PromptSet::single("").validate().is_err());
    }

    #[test]
    fn text_encoding_contract() {
        let mut m = MockBackend::new(1);
        let a = m.encode_text(&texts(&["a", "b", "a"])).unwrap();
        assert_eq!(a[0], a[2]);
        for e in &a {
            assert_eq!(e.dim(), 512);
            assert!((e.norm() - 1.0).abs() < 1e-6);
        }
        assert!(cosine_similarity(a[0].as_slice(), a[1].as_slice()).unwrap() < 0.99);
        assert!(m.encode_text(&texts(&[""])).is_err());
        // a second instance with the same seed agrees
        let b = MockBackend::new(1).encode_text(&texts(&["a"])).unwrap();
        assert_eq!(a[0], b[0]);
    }

    #[test]
    fn image_embeddings() {
        let mut m = MockBackend::new(2);
        let img = random_image(32, 32, 1);
        let e = m.encode_images(&[img.clone(), img.clone(), random_image(32, 32, 2)]).unwrap();
        assert_eq!(e[0], e[1]);
        assert_ne!(e[0], e[2]);
        assert!((e[0].norm() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn single_prompt_loss_is_negative_cosine() {
        let mut m = MockBackend::new(3);
        let prompts = compile_prompts(&mut m, &PromptSet::single("a lighthouse")).unwrap();
        let img = random_image(224, 224, 3);
        let (report, grads) = m.score_images(std::slice::from_ref(&img), &prompts).unwrap();
        let e = m.encode_images(std::slice::from_ref(&img)).unwrap();
        let cos = cosine_similarity(e[0].as_slice(), prompts.prompts[0].embedding.as_slice()).unwrap();
        assert!((report.loss + cos).abs() < 1e-12);
        assert_eq!(grads.len(), 1);
        assert!(grads[0].same_shape(&img));
    }

    #[test]
    fn negative_prompt_adds_scaled_cosine() {
        let mut m = MockBackend::new(4);
        let batch = vec![random_image(64, 64, 4), random_image(64, 64, 5)];
        let pos = compile_prompts(&mut m, &PromptSet::single("a boat")).unwrap();
        let both = compile_prompts(&mut m, &PromptSet::single("a boat").with_negative("many boats", 1.0)).unwrap();
        let (r_pos, _) = m.score_images(&batch, &pos).unwrap();
        let (r_both, _) = m.score_images(&batch, &both).unwrap();
        let embs = m.encode_images(&batch).unwrap();
        let neg = &both.prompts[1].embedding;
        let c_sum: f64 = embs.iter().map(|e| cosine_similarity(e.as_slice(), neg.as_slice()).unwrap()).sum();
        assert!((r_both.loss - r_pos.loss - 0.3 * c_sum).abs() < 1e-12);
        assert!((r_both.recomposed_loss(0.3) - r_both.loss).abs() < 1e-12);
        assert!(r_both.prompts.iter().all(|p| (-1.0..=1.0).contains(&p.mean_cosine)));
    }

    #[test]
    fn zero_negative_scale_reduces_to_positive_only() {
        let mut m = MockBackend::new(4);
        let batch = vec![random_image(32, 32, 4)];
        let pos = compile_prompts(&mut m, &PromptSet::single("a boat")).unwrap();
        let mut set = PromptSet::single("a boat").with_negative("sea", 2.0);
        set.negative_scale = 0.0;
        let both = compile_prompts(&mut m, &set).unwrap();
        assert_eq!(m.score_images(&batch, &pos).unwrap().0.loss, m.score_images(&batch, &both).unwrap().0.loss);
    }

    #[test]
    fn mock_gradient_matches_finite_differences() {
        let mut m = MockBackend::new(5);
        let prompts = compile_prompts(&mut m, &PromptSet::single("x").with_negative("y", 0.7)).unwrap();
        let img = random_image(8, 8, 6);
        let (_, grads) = m.score_images(std::slice::from_ref(&img), &prompts).unwrap();
        let eps = 1e-5;
        for i in 0..img.data.len() {
            let mut up = img.clone();
            up.data[i] += eps;
            let mut down = img.clone();
            down.data[i] -= eps;
            let fd = (m.score_images(&[up], &prompts).unwrap().0.loss
                - m.score_images(&[down], &prompts).unwrap().0.loss)
                / (2.0 * eps);
            let an = grads[0].data[i];
            assert!((fd - an).abs() / fd.abs().max(1e-8) < 1e-3, "{i}: fd {fd} vs {an}");
        }
    }

    #[test]
    fn mock_gradient_dot_product_probe() {
        // directional derivative along a random direction vs <grad, direction>
        let mut m = MockBackend::new(6);
        let prompts = compile_prompts(&mut m, &PromptSet::single("probe")).unwrap();
        let img = random_image(40, 40, 7);
        let mut rng = stream_rng(8, Stream::Augment);
        let dir: Vec<f64> = (0..img.data.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (_, grads) = m.score_images(std::slice::from_ref(&img), &prompts).unwrap();
        let analytic: f64 = grads[0].data.iter().zip(&dir).map(|(g, d)| g * d).sum();
        let eps = 1e-6;
        let shifted = |s: f64| {
            let mut x = img.clone();
            for (v, d) in x.data.iter_mut().zip(&dir) {
                *v += s * d;
            }
            m.clone().score_images(&[x], &prompts).unwrap().0.loss
        };
        let fd = (shifted(eps) - shifted(-eps)) / (2.0 * eps);
        assert!((fd - analytic).abs() / analytic.abs() < 1e-5, "{fd} vs {analytic}");
    }

    #[test]
    fn pooling_handles_uneven_sizes() {
        for (h, w) in [(8, 8), (16, 16), (20, 37), (224, 224)] {
            let img = ImageTensor::filled(h, w, [0.2, 0.4, 0.6]);
            let pooled = MockBackend::pool(&img);
            assert!(pooled.chunks(3).all(|c| (c[0] - 0.2).abs() < 1e-12 && (c[2] - 0.6).abs() < 1e-12));
        }
    }

    #[test]
    fn batch_validation() {
        let mut m = MockBackend::new(0);
        let prompts = compile_prompts(&mut m, &PromptSet::single("x")).unwrap();
        let mut bad = random_image(16, 16, 0);
        bad.data[0] = 1.5;
        assert!(matches!(m.score_images(&[bad], &prompts), Err(Error::Contract(_))));
        assert!(matches!(m.score_images(&[], &prompts), Err(Error::Contract(_))));
        let mixed = vec![random_image(16, 16, 0), random_image(8, 8, 0)];
        assert!(matches!(m.score_images(&mixed, &prompts), Err(Error::Contract(_))));
    }

    #[test]
    fn gradient_ascent_on_free_pixels_raises_cosine() {
        let mut m = MockBackend::new(9);
        let prompts = compile_prompts(&mut m, &PromptSet::single("a red barn")).unwrap();
        let mut img = random_image(224, 224, 9);
        let mut last = f64::NEG_INFINITY;
        let mut first = None;
        for _ in 0..100 {
            let (report, grads) = m.score_images(std::slice::from_ref(&img), &prompts).unwrap();
            let cos = report.prompts[0].mean_cosine;
            first.get_or_insert(cos);
            assert!(cos > last, "{cos} <= {last}");
            last = cos;
            for (v, g) in img.data.iter_mut().zip(&grads[0].data) {
                *v = (*v - 20.0 * g).clamp(0.0, 1.0);
            }
        }
        assert!(last > first.unwrap() + 0.05, "{first:?} -> {last}");
    }

    #[test]
    fn pixel_target_examples() {
        let target = random_image(12, 12, 1);
        let mut obj = PixelTargetObjective::new(target.clone());
        let (r, g) = obj.evaluate(std::slice::from_ref(&target)).unwrap();
        assert_eq!(r.loss, 0.0);
        assert!(g[0].data.iter().all(|&v| v == 0.0));

        let mut obj = PixelTargetObjective::new(ImageTensor::filled(12, 12, [1.0; 3]));
        let black = ImageTensor::zeros(12, 12);
        let (r, g) = obj.evaluate(std::slice::from_ref(&black)).unwrap();
        assert_eq!(r.loss, 1.0);
        // descending the gradient moves toward the target
        assert!(g[0].data.iter().all(|&v| v < 0.0));
        assert!((g[0].data[0] + 2.0 / (12.0 * 12.0 * 3.0)).abs() < 1e-15);

        assert!(matches!(obj.evaluate(&[ImageTensor::zeros(4, 4)]), Err(Error::Contract(_))));
    }
}
