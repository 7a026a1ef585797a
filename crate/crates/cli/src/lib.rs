//! Command-line driver: flag and config resolution, runs, sweeps, and the
//! exported run directories (PNG, SVG, loss CSV, metadata).

pub mod app;
pub mod error;
pub mod export;
pub mod settings;
pub mod sheet;
pub mod svg;

pub use app::{execute, run_cli};
pub use error::CliError;
pub use settings::{resolve, Settings};
pub use svg::{export_svg, import_svg, SvgExport};
