use std::ffi::OsString;
use std::io::{BufReader, Write};
use std::net::TcpListener;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use clap::Parser;
use rayon::prelude::*;
use vecsketch_core::objective::{BackendInfo, MockBackend, ScoringBackend};
use vecsketch_core::protocol::{serve, ConnectOptions, Endpoint, ServiceBackend, SERVICE_ADDR_ENV};
use vecsketch_core::rng::backend_seed;
use vecsketch_core::{reconstruct_scene, run_synthesis, Mode, RunArtifacts, RunFailure};

use crate::error::{exit, CliError};
use crate::export::{read_target, write_bundle, write_png, BundleInput, BundleSummary};
use crate::settings::{resolve, BackendKind, Cli, Command, FileConfig, ServeMockArgs, Settings};
use crate::sheet::{tile, GUTTER};

/// Contact sheets wrap after this many runs.
const SHEET_COLUMNS: usize = 5;

/// The backend a run scores against. Mock runs derive the mock's seed from
/// the run seed, so one seed pins the whole run.
pub fn open_backend(settings: &Settings) -> Result<Box<dyn ScoringBackend>, CliError> {
    match settings.backend {
        BackendKind::Mock => Ok(Box::new(MockBackend::new(backend_seed(settings.run.seed)))),
        BackendKind::Service => {
            let addr = settings.service_addr.as_deref().ok_or_else(|| CliError::Usage("no service address".into()))?;
            let options = ConnectOptions {
                timeout: Duration::from_secs_f64(settings.timeout_s),
                expected_dim: Some(settings.embedding_dim),
            };
            Ok(Box::new(ServiceBackend::connect(&Endpoint::parse(addr)?, options)?))
        }
    }
}

fn task_name(settings: &Settings) -> &'static str {
    match (settings.reconstruct.is_some(), settings.run.mode) {
        (true, _) => "reconstruction",
        (false, Mode::Strokes) => "synthesis",
        (false, Mode::Pixels) => "pixels",
    }
}

/// Runs one configuration and writes its bundle into `settings.out`. A
/// failed run still writes what it recorded before failing.
pub fn run_single(settings: &Settings) -> Result<BundleSummary, CliError> {
    let started = Instant::now();
    let (backend_info, outcome): (BackendInfo, Result<RunArtifacts, RunFailure>) = match &settings.reconstruct {
        Some(path) => {
            let canvas = &settings.run.canvas;
            let target = read_target(path, canvas.width, canvas.height)?;
            let info = BackendInfo { dim: 0, model: "pixel-mse".into() };
            (info, reconstruct_scene(&target, &settings.run))
        }
        None => {
            let mut backend = open_backend(settings)?;
            (backend.info(), run_synthesis(&settings.run, backend.as_mut()))
        }
    };
    let (artifacts, error) = match outcome {
        Ok(art) => (art, None),
        Err(failure) => (*failure.partial, Some(failure.error)),
    };
    let summary = write_bundle(BundleInput {
        dir: &settings.out,
        settings,
        task: task_name(settings),
        backend: backend_info,
        artifacts: &artifacts,
        elapsed: started.elapsed(),
        error: error.as_ref().map(ToString::to_string),
    });
    match error {
        Some(e) => Err(e.into()),
        None => summary,
    }
}

/// One run per stroke count in `settings.sweep_strokes`, each in its own
/// subdirectory, plus a contact sheet of the final images in sweep order.
pub fn run_sweep(settings: &Settings) -> Result<Vec<BundleSummary>, CliError> {
    let jobs: Vec<Settings> = settings
        .sweep_strokes
        .iter()
        .map(|&n| {
            let mut s = settings.clone();
            s.run.strokes = n;
            s.sweep_strokes.clear();
            s.out = sweep_dir(&settings.out, n);
            s
        })
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(settings.workers)
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start {} workers: {e}", settings.workers)))?;
    let results: Vec<Result<BundleSummary, CliError>> = pool.install(|| jobs.par_iter().map(run_single).collect());
    let summaries = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let finals: Vec<_> = summaries.iter().map(|s| s.final_image.clone()).collect();
    std::fs::create_dir_all(&settings.out).map_err(|e| CliError::io(&settings.out, e))?;
    write_png(&settings.out.join("contact_sheet.png"), &tile(&finals, SHEET_COLUMNS, GUTTER))?;
    Ok(summaries)
}

pub fn execute(settings: &Settings) -> Result<Vec<BundleSummary>, CliError> {
    if settings.sweep_strokes.is_empty() {
        Ok(vec![run_single(settings)?])
    } else {
        run_sweep(settings)
    }
}

pub fn serve_mock(args: &ServeMockArgs) -> Result<(), CliError> {
    let mut backend = MockBackend::new(args.seed);
    match &args.listen {
        None => {
            let stdin = std::io::stdin().lock();
            serve(&mut backend, stdin, std::io::stdout().lock()).map_err(|e| CliError::io("<stdio>", e))
        }
        Some(addr) => {
            let listener = TcpListener::bind(addr).map_err(|e| CliError::io(addr, e))?;
            let local = listener.local_addr().map_err(|e| CliError::io(addr, e))?;
            eprintln!("serving mock backend on {local}");
            for stream in listener.incoming() {
                let stream = stream.map_err(|e| CliError::io(addr, e))?;
                let reader = stream.try_clone().map_err(|e| CliError::io(addr, e))?;
                if let Err(e) = serve(&mut backend, BufReader::new(reader), stream) {
                    eprintln!("session ended: {e}");
                }
            }
            Ok(())
        }
    }
}

fn report(summaries: &[BundleSummary]) {
    let mut out = std::io::stdout().lock();
    for s in summaries {
        let loss = s.final_loss.map_or_else(|| "n/a".to_string(), |l| format!("{l:.6}"));
        let _ = writeln!(out, "{}  final loss {loss}", s.dir.display());
    }
}

/// Parses `args`, runs, and returns the process exit code.
pub fn run_cli(args: impl IntoIterator<Item = impl Into<OsString> + Clone>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let result = match &cli.command {
        Some(Command::ServeMock(a)) => serve_mock(a),
        None => (|| {
            let file = cli.run.config.as_deref().map(FileConfig::load).transpose()?;
            let settings = resolve(&cli.run, file, std::env::var(SERVICE_ADDR_ENV).ok())?;
            report(&execute(&settings)?);
            Ok(())
        })(),
    };
    match result {
        Ok(()) => exit::OK,
        Err(e) => {
            eprintln!("vecsketch: {e}");
            e.exit_code()
        }
    }
}

/// Directory of one sweep entry, as laid out by [`run_sweep`].
pub fn sweep_dir(out: &std::path::Path, strokes: usize) -> PathBuf {
    out.join(format!("strokes_{strokes:04}"))
}
