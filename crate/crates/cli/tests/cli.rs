use std::path::Path;
use std::process::{Command, Output};

use vecsketch::export::to_rgb8;
use vecsketch::settings::FileConfig;
use vecsketch::{export_svg, import_svg};
use vecsketch_core::rng::{stream_rng, Stream};
use vecsketch_core::scene::init_scene;
use vecsketch_core::{render, CanvasConfig, RasterConfig, Scene};

const BIN: &str = env!("CARGO_BIN_EXE_vecsketch");

fn vecsketch(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env_remove("VECSKETCH_SERVICE_ADDR").output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = vecsketch(args);
    assert!(out.status.success(), "{args:?}\n{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn small<'a>(out: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec![
        "--prompt",
        "a small boat",
        "--strokes",
        "6",
        "--iters",
        "4",
        "--augments",
        "2",
        "--canvas",
        "32",
        "--seed",
        "1",
        "--out",
        out,
    ];
    v.extend_from_slice(extra);
    v
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn bundle_contents() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    ok(&small(path_str(&out), &["--snapshot-every", "2"]));
    for f in ["final.png", "final.svg", "loss.csv", "metadata.json", "run.toml", "filmstrip.png"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let snaps: Vec<_> = std::fs::read_dir(out.join("snapshots")).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(snaps.len(), 3);
    let png = image::open(out.join("final.png")).unwrap();
    assert_eq!((png.width(), png.height()), (32, 32));
    let csv = std::fs::read_to_string(out.join("loss.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "iteration,loss,loss_mean,cos:a small boat");
    assert_eq!(lines.count(), 4);
    let meta: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("metadata.json")).unwrap()).unwrap();
    assert_eq!(meta["task"], "synthesis");
    assert_eq!(meta["iterations_completed"], 4);
    assert_eq!(meta["backend"]["dim"], 512);
    let run_toml: FileConfig = toml::from_str(&std::fs::read_to_string(out.join("run.toml")).unwrap()).unwrap();
    assert_eq!(serde_json::to_value(&run_toml).unwrap(), meta["config"]);
}

#[test]
fn equal_seeds_give_identical_loss_csv() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&small(path_str(&a), &[]));
    ok(&small(path_str(&b), &[]));
    assert_eq!(std::fs::read(a.join("loss.csv")).unwrap(), std::fs::read(b.join("loss.csv")).unwrap());
    let c = dir.path().join("c");
    let mut args = small(path_str(&c), &[]);
    let seed = args.iter().position(|a| *a == "--seed").unwrap();
    args[seed + 1] = "2";
    ok(&args);
    assert_ne!(std::fs::read(a.join("loss.csv")).unwrap(), std::fs::read(c.join("loss.csv")).unwrap());
}

#[test]
fn rerun_from_recorded_config_reproduces_final_png() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("first");
    let second = dir.path().join("second");
    ok(&small(path_str(&first), &["--negative", "water:0.5"]));
    ok(&["--config", path_str(&first.join("run.toml")), "--out", path_str(&second)]);
    assert_eq!(std::fs::read(first.join("final.png")).unwrap(), std::fs::read(second.join("final.png")).unwrap());
    assert_eq!(std::fs::read(first.join("loss.csv")).unwrap(), std::fs::read(second.join("loss.csv")).unwrap());
}

#[test]
fn stroke_sweep_writes_runs_and_one_contact_sheet() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sweep");
    ok(&[
        "--prompt",
        "The Eiffel Tower",
        "--sweep-strokes",
        "16,32,64,128,256",
        "--iters",
        "2",
        "--augments",
        "1",
        "--canvas",
        "24",
        "--workers",
        "2",
        "--out",
        path_str(&out),
    ]);
    for n in [16, 32, 64, 128, 256] {
        let run = out.join(format!("strokes_{n:04}"));
        assert!(run.join("final.png").is_file(), "{n}");
        let meta: serde_json::Value =
            serde_json::from_slice(&std::fs::read(run.join("metadata.json")).unwrap()).unwrap();
        assert_eq!(meta["config"]["strokes"], n);
    }
    let sheets: Vec<_> = std::fs::read_dir(&out)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().extension().is_some_and(|x| x == "png"))
        .collect();
    assert_eq!(sheets.len(), 1);
    let sheet = image::open(out.join("contact_sheet.png")).unwrap();
    assert_eq!(sheet.width(), 5 * 24 + 6 * 4);
}

#[test]
fn pixel_baseline_without_augmentation() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("px");
    ok(&["--prompt", "noise", "--mode", "pixels", "--no-augment", "--iters", "2", "--out", path_str(&out)]);
    let meta: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("metadata.json")).unwrap()).unwrap();
    assert_eq!(meta["task"], "pixels");
    assert_eq!(meta["param_count"], 224 * 224 * 3);
    assert_eq!(meta["config"]["augment"], false);
    assert!(!out.join("final.svg").exists());
}

#[test]
fn missing_prompt_is_a_usage_error() {
    let out = vecsketch(&["--iters", "3"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--prompt"));
}

#[test]
fn bad_flag_is_a_usage_error() {
    assert_eq!(vecsketch(&["--strokes", "many"]).status.code(), Some(2));
}

#[test]
fn unwritable_out_dir_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, b"x").unwrap();
    let out = vecsketch(&small(path_str(&blocker.join("run")), &[]));
    assert_eq!(out.status.code(), Some(5), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn unreachable_service_is_a_transport_error() {
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let addr = format!("127.0.0.1:{port}");
    let dir = tempfile::tempdir().unwrap();
    let out = vecsketch(&small(path_str(&dir.path().join("r")), &["--backend", "service", "--service-addr", &addr]));
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn subprocess_service_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("svc");
    let addr = format!("stdio:{BIN} serve-mock --seed 3");
    ok(&small(path_str(&out), &["--backend", "service", "--service-addr", &addr]));
    let meta: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("metadata.json")).unwrap()).unwrap();
    assert_eq!(meta["backend"]["model"], "mock-pool16-proj512/seed=3");
    assert_eq!(meta["iterations_completed"], 4);
}

#[test]
fn service_address_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("env");
    let run = Command::new(BIN)
        .args(small(path_str(&out), &["--backend", "service"]))
        .env("VECSKETCH_SERVICE_ADDR", format!("stdio:{BIN} serve-mock"))
        .output()
        .unwrap();
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
}

#[test]
fn reconstruction_from_png() {
    let dir = tempfile::tempdir().unwrap();
    let canvas = CanvasConfig::square(32).unwrap();
    let hidden = init_scene(12, canvas, &mut stream_rng(77, Stream::Init)).unwrap();
    let target = dir.path().join("target.png");
    to_rgb8(&render(&hidden, &RasterConfig::default())).save(&target).unwrap();
    let out = dir.path().join("rec");
    ok(&[
        "--reconstruct",
        path_str(&target),
        "--strokes",
        "12",
        "--iters",
        "60",
        "--canvas",
        "32",
        "--out",
        path_str(&out),
    ]);
    let csv = std::fs::read_to_string(out.join("loss.csv")).unwrap();
    let losses: Vec<f64> = csv.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(losses.len(), 60);
    assert!(losses[59] < losses[0], "{} -> {}", losses[0], losses[59]);
    let meta: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("metadata.json")).unwrap()).unwrap();
    assert_eq!(meta["task"], "reconstruction");
}

#[test]
fn missing_reconstruction_target_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = vecsketch(&["--reconstruct", path_str(&dir.path().join("nope.png")), "--out", path_str(dir.path())]);
    assert_eq!(out.status.code(), Some(5));
}

#[test]
fn svg_round_trip_for_random_low_degree_scenes() {
    for seed in 0..20 {
        let canvas = CanvasConfig::new(96, 64, [1.0, 0.9, 0.8]).unwrap();
        let mut scene = init_scene(12, canvas, &mut stream_rng(seed, Stream::Init)).unwrap();
        scene.strokes.retain(|s| s.points.len() <= 4);
        let back: Scene = import_svg(&export_svg(&scene).document).unwrap();
        assert_eq!(back.canvas, scene.canvas);
        assert_eq!(back.strokes.len(), scene.strokes.len());
        for (a, b) in back.strokes.iter().zip(&scene.strokes) {
            assert_eq!(a.points.len(), b.points.len());
            for (p, q) in a.points.iter().zip(&b.points) {
                assert!((p.x - q.x).abs() < 1e-6 && (p.y - q.y).abs() < 1e-6);
            }
            for (c, d) in a.color.iter().zip(&b.color) {
                assert!((c - d).abs() < 1e-6);
            }
            assert!((a.width - b.width).abs() < 1e-6);
        }
    }
}
