//! Run directory contents.
//!
//! ```text
//! final.png        final.svg (stroke runs)   loss.csv
//! metadata.json    run.toml                  snapshots/iter_NNNNN.png
//! filmstrip.png    (when snapshots exist)
//! ```

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use image::{Rgb, RgbImage};
use serde::Serialize;
use vecsketch_core::objective::BackendInfo;
use vecsketch_core::optim::SnapshotState;
use vecsketch_core::{render, ImageTensor, RunArtifacts};

use crate::error::CliError;
use crate::settings::{FileConfig, Settings};
use crate::sheet::filmstrip;
use crate::svg::export_svg;

/// Quantizes to 8 bits per channel; values are already sRGB-encoded.
pub fn to_rgb8(img: &ImageTensor) -> RgbImage {
    let byte = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    RgbImage::from_fn(img.width as u32, img.height as u32, |x, y| {
        let [r, g, b] = img.pixel(x as usize, y as usize);
        Rgb([byte(r), byte(g), byte(b)])
    })
}

pub fn write_png(path: &Path, img: &RgbImage) -> Result<(), CliError> {
    img.save_with_format(path, image::ImageFormat::Png).map_err(|e| match e {
        image::ImageError::IoError(io) => CliError::io(path, io),
        other => CliError::Input { path: path.to_owned(), message: other.to_string() },
    })
}

/// Loads a PNG as an image tensor, resampled to `width × height` if needed.
pub fn read_target(path: &Path, width: usize, height: usize) -> Result<ImageTensor, CliError> {
    let decoded = image::ImageReader::open(path)
        .map_err(|e| CliError::io(path, e))?
        .with_guessed_format()
        .map_err(|e| CliError::io(path, e))?
        .decode()
        .map_err(|e| CliError::Input { path: path.to_owned(), message: e.to_string() })?
        .to_rgb8();
    let rgb = if decoded.dimensions() == (width as u32, height as u32) {
        decoded
    } else {
        image::imageops::resize(&decoded, width as u32, height as u32, image::imageops::FilterType::Triangle)
    };
    let data = rgb.pixels().flat_map(|p| p.0.map(|c| c as f64 / 255.0)).collect();
    Ok(ImageTensor::new(height, width, data)?)
}

fn io_at(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::io(path, e)
}

pub fn write_loss_csv(path: &Path, art: &RunArtifacts) -> Result<(), CliError> {
    let csv_err = |e: csv::Error| CliError::io(path, e.into());
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header = vec!["iteration".to_string(), "loss".into(), "loss_mean".into()];
    header.extend(art.prompt_labels.iter().map(|l| format!("cos:{l}")));
    w.write_record(&header).map_err(csv_err)?;
    for (i, r) in art.records.iter().enumerate() {
        let mut row = vec![i.to_string(), r.loss.to_string(), r.loss_mean.to_string()];
        row.extend(r.cosines.iter().map(f64::to_string));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(io_at(path))
}

#[derive(Debug, Clone, Serialize)]
pub struct Timing {
    pub total_s: f64,
    pub mean_iteration_s: f64,
    pub iteration_s: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Metadata {
    pub tool: &'static str,
    pub version: &'static str,
    pub task: &'static str,
    pub seed: u64,
    pub backend: BackendInfo,
    pub config: FileConfig,
    pub param_count: usize,
    pub iterations_completed: usize,
    pub final_loss: Option<f64>,
    pub final_loss_mean: Option<f64>,
    pub svg_max_fit_error_px: Option<f64>,
    pub timing: Timing,
    pub error: Option<String>,
}

/// What was written for one run.
#[derive(Debug, Clone)]
pub struct BundleSummary {
    pub dir: PathBuf,
    pub final_image: RgbImage,
    pub final_loss: Option<f64>,
}

pub struct BundleInput<'a> {
    pub dir: &'a Path,
    pub settings: &'a Settings,
    pub task: &'static str,
    pub backend: BackendInfo,
    pub artifacts: &'a RunArtifacts,
    pub elapsed: Duration,
    pub error: Option<String>,
}

pub fn write_bundle(input: BundleInput<'_>) -> Result<BundleSummary, CliError> {
    let BundleInput { dir, settings, task, backend, artifacts: art, elapsed, error } = input;
    fs::create_dir_all(dir).map_err(io_at(dir))?;

    let final_image = to_rgb8(&art.final_image);
    write_png(&dir.join("final.png"), &final_image)?;

    let mut fit_error = None;
    if let Some(scene) = &art.final_scene {
        let svg = export_svg(scene);
        fit_error = Some(svg.max_fit_error_px);
        let path = dir.join("final.svg");
        fs::write(&path, svg.document).map_err(io_at(&path))?;
    }

    write_loss_csv(&dir.join("loss.csv"), art)?;

    if !art.snapshots.is_empty() {
        let snap_dir = dir.join("snapshots");
        fs::create_dir_all(&snap_dir).map_err(io_at(&snap_dir))?;
        let mut frames = Vec::with_capacity(art.snapshots.len());
        for snap in &art.snapshots {
            let tensor = match &snap.state {
                SnapshotState::Scene(scene) => render(scene, &settings.run.raster),
                SnapshotState::Pixels(img) => img.clone(),
            };
            let frame = to_rgb8(&tensor);
            write_png(&snap_dir.join(format!("iter_{:05}.png", snap.iteration)), &frame)?;
            frames.push(frame);
        }
        write_png(&dir.join("filmstrip.png"), &filmstrip(&frames))?;
    }

    let config = settings.to_file_config();
    let toml_path = dir.join("run.toml");
    fs::write(&toml_path, config.to_toml()).map_err(io_at(&toml_path))?;

    let iteration_s: Vec<f64> = art.records.iter().map(|r| r.seconds).collect();
    let last = art.records.last();
    let meta = Metadata {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        task,
        seed: settings.run.seed,
        backend,
        config,
        param_count: art.param_count,
        iterations_completed: art.records.len(),
        final_loss: last.map(|r| r.loss),
        final_loss_mean: last.map(|r| r.loss_mean),
        svg_max_fit_error_px: fit_error,
        timing: Timing {
            total_s: elapsed.as_secs_f64(),
            mean_iteration_s: iteration_s.iter().sum::<f64>() / iteration_s.len().max(1) as f64,
            iteration_s,
        },
        error,
    };
    let meta_path = dir.join("metadata.json");
    let json = serde_json::to_string_pretty(&meta).expect("metadata serializes");
    fs::write(&meta_path, json + "\n").map_err(io_at(&meta_path))?;

    Ok(BundleSummary { dir: dir.to_owned(), final_image, final_loss: last.map(|r| r.loss) })
}
