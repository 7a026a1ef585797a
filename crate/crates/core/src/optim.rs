//! Adam and the optimization loops.
//!
//! One iteration of [`run_synthesis`]: render the current strokes, draw fresh
//! augmentation homographies and warp `D` copies, score the copies, pull the
//! copy gradients back through the warps and the rasterizer, take an Adam
//! step with per-group learning rates, and project widths and colors back
//! into range.

use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_batch, augment_pullback, sample_augmentations, AugmentConfig, Homography};
use crate::error::{Error, Result};
use crate::objective::{Objective, PixelTargetObjective, PromptObjective, PromptSet, ScoreReport, ScoringBackend};
use crate::raster::{render, render_pullback, ImageTensor, RasterConfig};
use crate::rng::{stream_rng, Stream};
use crate::scene::{
    clamp_params, init_scene, params_to_scene, scene_to_params, CanvasConfig, ParamGroup, ParamLayout, Scene,
    WidthBounds,
};

/// Attempts per scoring call when the backend reports a transport error.
pub const SCORE_ATTEMPTS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Per-group step sizes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearningRates {
    /// Control points, in canvas pixels per step.
    pub points: f64,
    /// Stroke width, in pixels per step.
    pub width: f64,
    pub color: f64,
    /// Raw pixel values in pixel-optimization mode.
    pub pixels: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self { points: 1.0, width: 0.1, color: 0.05, pixels: 0.02 }
    }
}

impl LearningRates {
    /// Per-scalar step sizes for a stroke layout. Point rates are converted
    /// from pixels to normalized units separately per axis.
    pub fn for_layout(&self, layout: &ParamLayout, canvas: &CanvasConfig) -> Vec<f64> {
        let mut lr: Vec<f64> = layout
            .groups
            .iter()
            .map(|g| match g {
                ParamGroup::Points => self.points,
                ParamGroup::Width => self.width,
                ParamGroup::Color => self.color,
            })
            .collect();
        for slot in &layout.slots {
            for j in 0..slot.n_points {
                lr[slot.point_x(j)] /= canvas.width as f64;
                lr[slot.point_y(j)] /= canvas.height as f64;
            }
        }
        lr
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    /// Step size for each scalar.
    pub lr: Vec<f64>,
}

impl AdamState {
    pub fn new(lr: Vec<f64>) -> Self {
        let n = lr.len();
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0, lr }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, config: &AdamConfig) -> Result<()> {
    let n = params.len();
    if grads.len() != n || state.m.len() != n || state.v.len() != n || state.lr.len() != n {
        return Err(Error::contract(format!(
            "adam lengths disagree: params {n}, grads {}, state {}",
            grads.len(),
            state.m.len()
        )));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numeric(format!("non-finite gradient {} at parameter {i}", grads[i])));
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - config.beta1.powi(t);
    let c2 = 1.0 - config.beta2.powi(t);
    for i in 0..n {
        let g = grads[i];
        state.m[i] = config.beta1 * state.m[i] + (1.0 - config.beta1) * g;
        state.v[i] = config.beta2 * state.v[i] + (1.0 - config.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= state.lr[i] * m_hat / (v_hat.sqrt() + config.eps);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Strokes,
    /// Optimize the raw pixel matrix instead of strokes.
    Pixels,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub iterations: usize,
    pub strokes: usize,
    pub seed: u64,
    pub mode: Mode,
    pub augment_enabled: bool,
    /// Copy count `D` lives in `augment.n_copies`.
    pub augment: AugmentConfig,
    pub raster: RasterConfig,
    pub canvas: CanvasConfig,
    pub prompts: PromptSet,
    pub learning_rates: LearningRates,
    pub adam: AdamConfig,
    pub width_bounds: WidthBounds,
    /// Keep the state every `k` iterations; 0 keeps none.
    pub snapshot_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            iterations: 250,
            strokes: 256,
            seed: 0,
            mode: Mode::Strokes,
            augment_enabled: true,
            augment: AugmentConfig::default(),
            raster: RasterConfig::default(),
            canvas: CanvasConfig::default(),
            prompts: PromptSet::default(),
            learning_rates: LearningRates::default(),
            adam: AdamConfig::default(),
            width_bounds: WidthBounds::default(),
            snapshot_every: 0,
        }
    }
}

impl RunConfig {
    pub fn copies(&self) -> usize {
        self.augment.n_copies
    }

    /// Checks everything except the prompts, which only prompt-driven runs
    /// need.
    pub fn validate(&self) -> Result<()> {
        if self.strokes == 0 {
            return Err(Error::config("stroke count must be at least 1"));
        }
        self.augment.validate()?;
        self.raster.validate()?;
        self.canvas.validate()?;
        if self.width_bounds.min > self.width_bounds.max {
            return Err(Error::config("width bounds inverted"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SnapshotState {
    Scene(Scene),
    #[serde(skip)]
    Pixels(ImageTensor),
}

/// Optimization state at the start of `iteration` (or the final state when
/// `iteration == iterations`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub iteration: usize,
    pub state: SnapshotState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub loss: f64,
    pub loss_mean: f64,
    /// Mean cosine per prompt, in prompt order.
    pub cosines: Vec<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunArtifacts {
    pub mode: Mode,
    /// `text` of each prompt whose cosine is tracked.
    pub prompt_labels: Vec<String>,
    pub records: Vec<IterationRecord>,
    pub snapshots: Vec<Snapshot>,
    pub initial_scene: Option<Scene>,
    pub final_scene: Option<Scene>,
    pub final_image: ImageTensor,
    pub param_count: usize,
}

impl RunArtifacts {
    pub fn loss_curve(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }

    pub fn cosine_curve(&self, prompt: usize) -> Vec<f64> {
        self.records.iter().map(|r| r.cosines[prompt]).collect()
    }
}

/// An aborted run together with everything recorded before the abort.
#[derive(Debug)]
pub struct RunFailure {
    pub error: Error,
    pub partial: Box<RunArtifacts>,
}

impl std::fmt::Display for RunFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "run aborted after {} iterations: {}", self.partial.records.len(), self.error)
    }
}

impl std::error::Error for RunFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

impl From<Error> for RunFailure {
    fn from(error: Error) -> Self {
        RunFailure {
            error,
            partial: Box::new(RunArtifacts {
                mode: Mode::Strokes,
                prompt_labels: Vec::new(),
                records: Vec::new(),
                snapshots: Vec::new(),
                initial_scene: None,
                final_scene: None,
                final_image: ImageTensor::zeros(0, 0),
                param_count: 0,
            }),
        }
    }
}

/// What is being optimized: strokes through the rasterizer, or raw pixels.
enum Model {
    Strokes { layout: ParamLayout, canvas: CanvasConfig, raster: RasterConfig, bounds: WidthBounds },
    Pixels { height: usize, width: usize },
}

impl Model {
    fn image(&self, params: &[f64]) -> Result<ImageTensor> {
        match self {
            Model::Strokes { layout, canvas, raster, .. } => {
                Ok(render(&params_to_scene(params, layout, canvas)?, raster))
            }
            Model::Pixels { height, width } => ImageTensor::new(*height, *width, params.to_vec()),
        }
    }

    fn pullback(&self, params: &[f64], grad: &ImageTensor) -> Result<Vec<f64>> {
        match self {
            Model::Strokes { layout, canvas, raster, .. } => {
                render_pullback(&params_to_scene(params, layout, canvas)?, raster, grad)
            }
            Model::Pixels { height, width } => {
                grad.check_shape(*height, *width, "pixel gradient")?;
                Ok(grad.data.clone())
            }
        }
    }

    fn project(&self, params: &mut [f64]) -> Result<()> {
        match self {
            Model::Strokes { layout, bounds, .. } => clamp_params(params, layout, *bounds),
            Model::Pixels { .. } => {
                for p in params.iter_mut() {
                    *p = p.clamp(0.0, 1.0);
                }
                Ok(())
            }
        }
    }

    fn scene(&self, params: &[f64]) -> Option<Scene> {
        match self {
            Model::Strokes { layout, canvas, .. } => params_to_scene(params, layout, canvas).ok(),
            Model::Pixels { .. } => None,
        }
    }

    fn snapshot(&self, params: &[f64], iteration: usize) -> Result<Snapshot> {
        let state = match self {
            Model::Strokes { layout, canvas, .. } => SnapshotState::Scene(params_to_scene(params, layout, canvas)?),
            Model::Pixels { height, width } => {
                SnapshotState::Pixels(ImageTensor::new(*height, *width, params.to_vec())?)
            }
        };
        Ok(Snapshot { iteration, state })
    }
}

fn evaluate_with_retry(
    objective: &mut dyn Objective,
    batch: &[ImageTensor],
) -> Result<(ScoreReport, Vec<ImageTensor>)> {
    let mut attempt = 1;
    loop {
        match objective.evaluate(batch) {
            Err(e) if e.is_transient() && attempt < SCORE_ATTEMPTS => attempt += 1,
            other => return other,
        }
    }
}

struct Driver<'a> {
    config: &'a RunConfig,
    model: Model,
    params: Vec<f64>,
    adam: AdamState,
    artifacts: RunArtifacts,
}

impl Driver<'_> {
    fn run(mut self, objective: &mut dyn Objective) -> Result<RunArtifacts, RunFailure> {
        let mut aug_rng = stream_rng(self.config.seed, Stream::Augment);
        for it in 0..self.config.iterations {
            if let Err(error) = self.step(it, objective, &mut aug_rng) {
                return Err(self.abort(error));
            }
        }
        self.finish().map_err(RunFailure::from)
    }

    fn step<R: Rng>(&mut self, it: usize, objective: &mut dyn Objective, aug_rng: &mut R) -> Result<()> {
        let started = Instant::now();
        let config = self.config;
        if config.snapshot_every > 0 && it.is_multiple_of(config.snapshot_every) {
            self.artifacts.snapshots.push(self.model.snapshot(&self.params, it)?);
        }
        let image = self.model.image(&self.params)?;
        let homographies: Option<Vec<Homography>> = if config.augment_enabled {
            Some(sample_augmentations(&config.augment, image.width, image.height, aug_rng)?)
        } else {
            None
        };
        let batch = match &homographies {
            Some(hs) => augment_batch(&image, hs, &config.augment)?,
            None => vec![image.clone()],
        };
        let (report, copy_grads) = evaluate_with_retry(objective, &batch)?;
        if !report.loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {} at iteration {it}", report.loss)));
        }
        if copy_grads.len() != batch.len() {
            return Err(Error::contract(format!(
                "objective returned {} gradients for {} copies",
                copy_grads.len(),
                batch.len()
            )));
        }
        let image_grad = match &homographies {
            Some(hs) => augment_pullback(image.height, image.width, hs, &config.augment, &copy_grads)?,
            None => copy_grads.into_iter().next().expect("one copy"),
        };
        let grads = self.model.pullback(&self.params, &image_grad)?;
        adam_step(&mut self.params, &grads, &mut self.adam, &config.adam)?;
        self.model.project(&mut self.params)?;
        self.artifacts.records.push(IterationRecord {
            loss: report.loss,
            loss_mean: report.loss_mean,
            cosines: report.prompts.iter().map(|p| p.mean_cosine).collect(),
            seconds: started.elapsed().as_secs_f64(),
        });
        Ok(())
    }

    fn finish(mut self) -> Result<RunArtifacts> {
        let iterations = self.artifacts.records.len();
        if self.config.snapshot_every > 0 {
            self.artifacts.snapshots.push(self.model.snapshot(&self.params, iterations)?);
        }
        self.artifacts.final_image = self.model.image(&self.params)?;
        self.artifacts.final_scene = self.model.scene(&self.params);
        Ok(self.artifacts)
    }

    fn abort(mut self, error: Error) -> RunFailure {
        self.artifacts.final_scene = self.model.scene(&self.params);
        if let Ok(img) = self.model.image(&self.params) {
            self.artifacts.final_image = img;
        }
        RunFailure { error, partial: Box::new(self.artifacts) }
    }
}

/// Optimizes `initial` strokes against any objective.
pub fn optimize_scene(
    config: &RunConfig,
    initial: Scene,
    objective: &mut dyn Objective,
    prompt_labels: Vec<String>,
) -> Result<RunArtifacts, RunFailure> {
    config.validate()?;
    initial.validate()?;
    let (mut params, layout) = scene_to_params(&initial);
    let lr = config.learning_rates.for_layout(&layout, &initial.canvas);
    let model =
        Model::Strokes { layout, canvas: initial.canvas.clone(), raster: config.raster, bounds: config.width_bounds };
    model.project(&mut params)?;
    let param_count = params.len();
    let driver = Driver {
        config,
        params,
        adam: AdamState::new(lr),
        artifacts: RunArtifacts {
            mode: Mode::Strokes,
            prompt_labels,
            records: Vec::with_capacity(config.iterations),
            snapshots: Vec::new(),
            initial_scene: Some(initial.clone()),
            final_scene: None,
            final_image: ImageTensor::zeros(0, 0),
            param_count,
        },
        model,
    };
    driver.run(objective)
}

/// Optimizes a raw pixel matrix of the canvas size against any objective.
pub fn optimize_pixels(
    config: &RunConfig,
    objective: &mut dyn Objective,
    prompt_labels: Vec<String>,
) -> Result<RunArtifacts, RunFailure> {
    config.validate()?;
    let (h, w) = (config.canvas.height, config.canvas.width);
    let mut rng = stream_rng(config.seed, Stream::Init);
    let params: Vec<f64> = (0..h * w * 3).map(|_| rng.random::<f64>()).collect();
    let param_count = params.len();
    let driver = Driver {
        config,
        model: Model::Pixels { height: h, width: w },
        adam: AdamState::new(vec![config.learning_rates.pixels; param_count]),
        params,
        artifacts: RunArtifacts {
            mode: Mode::Pixels,
            prompt_labels,
            records: Vec::with_capacity(config.iterations),
            snapshots: Vec::new(),
            initial_scene: None,
            final_scene: None,
            final_image: ImageTensor::zeros(0, 0),
            param_count,
        },
    };
    driver.run(objective)
}

fn prompt_labels(objective: &PromptObjective<'_>) -> Vec<String> {
    objective.prompts().prompts.iter().map(|p| p.text.clone()).collect()
}

/// The random initial scene of a run.
pub fn initial_scene(config: &RunConfig) -> Result<Scene> {
    init_scene(config.strokes, config.canvas.clone(), &mut stream_rng(config.seed, Stream::Init))
}

/// Text-guided synthesis in the configured mode.
pub fn run_synthesis(config: &RunConfig, backend: &mut dyn ScoringBackend) -> Result<RunArtifacts, RunFailure> {
    if config.mode == Mode::Pixels {
        return run_pixel_optimization(config, backend);
    }
    config.validate()?;
    let initial = initial_scene(config)?;
    let mut objective = PromptObjective::compile(backend, &config.prompts)?;
    let labels = prompt_labels(&objective);
    optimize_scene(config, initial, &mut objective, labels)
}

/// The pixel-matrix baseline: same loop, no rasterizer.
pub fn run_pixel_optimization(
    config: &RunConfig,
    backend: &mut dyn ScoringBackend,
) -> Result<RunArtifacts, RunFailure> {
    let mut objective = PromptObjective::compile(backend, &config.prompts)?;
    let labels = prompt_labels(&objective);
    optimize_pixels(config, &mut objective, labels)
}

/// Fits fresh random strokes to `target` under the pixel MSE objective with
/// augmentation disabled.
pub fn reconstruct_scene(target: &ImageTensor, config: &RunConfig) -> Result<RunArtifacts, RunFailure> {
    target.check_shape(config.canvas.height, config.canvas.width, "reconstruction target")?;
    let config = RunConfig { augment_enabled: false, mode: Mode::Strokes, ..config.clone() };
    let initial = initial_scene(&config)?;
    let mut objective = PixelTargetObjective::new(target.clone());
    optimize_scene(&config, initial, &mut objective, Vec::new())
}
