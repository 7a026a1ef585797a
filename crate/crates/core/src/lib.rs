//! Text-guided drawing synthesis over differentiable Bézier strokes.
//!
//! A drawing is a [`Scene`] of RGBA Bézier strokes. Each optimization step
//! renders the scene with a distance-field rasterizer, produces randomly
//! perspective-warped copies of the image, scores the copies against text
//! prompt embeddings through a [`ScoringBackend`], and pulls the pixel
//! gradient back through the warps and the rasterizer onto the stroke
//! parameters, which are then updated with Adam.
//!
//! Every stage exposes its forward map and its exact adjoint separately:
//!
//! - [`scene`]: strokes, canvas, and the flat parameter layout.
//! - [`raster`]: [`render`], [`render_pullback`], and a supersampled
//!   [`reference_render`] used as a ground-truth oracle.
//! - [`augment`]: homography sampling, bilinear warps, and their pullbacks.
//! - [`objective`]: prompts, the scoring-backend contract, the
//!   deterministic [`MockBackend`], and a pixel-MSE objective.
//! - [`optim`]: Adam and the synthesis / pixel / reconstruction loops.
//! - [`protocol`]: the newline-delimited JSON wire protocol used to talk to
//!   an out-of-process encoder service.

pub mod augment;
pub mod error;
pub mod objective;
pub mod optim;
pub mod protocol;
pub mod raster;
pub mod rng;
pub mod scene;

pub use augment::{AugmentConfig, Homography};
pub use error::{Error, Result};
pub use objective::{
    CompiledPrompts, Embedding, MockBackend, Objective, PixelTargetObjective, PromptSet, ScoreReport, ScoringBackend,
};
pub use optim::{
    reconstruct_scene, run_pixel_optimization, run_synthesis, LearningRates, Mode, RunArtifacts, RunConfig, RunFailure,
};
pub use raster::{reference_render, render, render_pullback, ImageTensor, RasterConfig};
pub use scene::{CanvasConfig, ParamLayout, Point, Scene, Stroke};
