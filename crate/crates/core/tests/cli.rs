use std::path::Path;
use std::process::{Command, Output};

use multibarf::datastore::{load_checkpoint, load_dataset, load_depth};
use multibarf::evaluation::{MetricReport, PoseReport};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_multibarf"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY_CONFIG: &str = r#"
iterations = 8
batch_pixels = 32
samples_per_ray = 8
log_every = 2

[field]
trunk_layers = 2
trunk_width = 8
skip_layer = 0
head_layers = 1
head_width = 4

[encoding]
position_bands = 2
direction_bands = 1

[refine]
steps = 2
batch_pixels = 16
"#;

#[test]
fn generate_train_render_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run_dir = dir.path().join("run");
    ok(&[
        "generate-scene", "--preset", "textured-shapes", "--seed", "2", "--views-a", "8",
        "--views-b", "8", "--pose-noise-deg", "5", "--pose-noise-trans", "0.02", "--width",
        "16", "--height", "16", "--out", p(&data),
    ]);
    let ds = load_dataset(&data).unwrap();
    assert_eq!(ds.sensors[0].images.len(), 8);
    assert_eq!(ds.sensors[1].images.len(), 8);

    let config = dir.path().join("tiny.toml");
    std::fs::write(&config, TINY_CONFIG).unwrap();
    ok(&[
        "train", "--dataset", p(&data), "--config", p(&config), "--schedule",
        "sequential-frozen", "--out", p(&run_dir),
    ]);
    let ckpt = run_dir.join("checkpoint.bin");
    let state = load_checkpoint(&ckpt).unwrap();
    assert_eq!(state.iteration, 16, "sequential schedules run two phases");
    let log = std::fs::read_to_string(run_dir.join("train_log.jsonl")).unwrap();
    assert!(log.lines().count() >= 8);
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v.get("kind").is_some());
    }

    let render_dir = dir.path().join("render");
    ok(&["render", "--checkpoint", p(&ckpt), "--pose", "1", "--out", p(&render_dir)]);
    let mut names: Vec<_> = std::fs::read_dir(&render_dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names, ["depth.depth", "image_A.png", "image_B.png"]);
    let depth = load_depth(&render_dir.join("depth.depth")).unwrap();
    assert_eq!((depth.width, depth.height), (16, 16));

    // a pose given as a file
    let pose_file = dir.path().join("pose.txt");
    std::fs::write(&pose_file, "1 0 0 0\n0 1 0 0\n0 0 1 3.6\n").unwrap();
    let second = dir.path().join("render2");
    ok(&["render", "--checkpoint", p(&ckpt), "--pose", p(&pose_file), "--out", p(&second)]);
    assert_eq!(std::fs::read_dir(&second).unwrap().count(), 3);

    let eval_dir = dir.path().join("eval");
    let summary = ok(&[
        "evaluate", "--checkpoint", p(&ckpt), "--dataset", p(&data), "--split", "train", "--out",
        p(&eval_dir),
    ]);
    assert_eq!(summary.lines().count(), 2);
    let report: MetricReport =
        serde_json::from_str(&std::fs::read_to_string(eval_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report.scene, "textured-shapes");
    for m in report.sensors.iter() {
        let m = m.as_ref().unwrap();
        assert!(m.psnr.is_finite() && m.ssim.is_finite());
        assert!(m.depth_rmse.is_some() && m.pose.is_some());
    }
    let csv = std::fs::read_to_string(eval_dir.join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);

    ok(&[
        "evaluate", "--checkpoint", p(&ckpt), "--dataset", p(&data), "--split", "val", "--out",
        p(&eval_dir),
    ]);

    let pose_dir = dir.path().join("poses");
    ok(&["pose-report", "--checkpoint", p(&ckpt), "--dataset", p(&data), "--out", p(&pose_dir)]);
    let poses: PoseReport =
        serde_json::from_str(&std::fs::read_to_string(pose_dir.join("pose_report.json")).unwrap()).unwrap();
    assert_eq!(poses.cameras.len(), state.twists[0].len() + state.twists[1].len());
}

#[test]
fn invalid_schedule_exits_with_usage() {
    let out = run(&["train", "--dataset", "x", "--out", "y", "--schedule", "round-robin"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("Usage"), "{err}");
    let out = run(&["render", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn failures_print_one_machine_readable_line() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["generate-scene", "--preset", "teapot", "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error kind=unknown-preset message="), "{err}");

    let out = run(&[
        "evaluate", "--checkpoint", p(&dir.path().join("none.bin")), "--dataset", p(dir.path()),
        "--out", p(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(String::from_utf8(out.stderr).unwrap().lines().count(), 1);
}

#[test]
fn dump_config_prints_every_field() {
    let text = ok(&["train", "--dump-config", "--schedule", "sequential"]);
    let cfg: multibarf::training::TrainConfig = toml::from_str(&text).unwrap();
    assert_eq!(cfg.schedule, multibarf::training::ModeSchedule::Sequential);
    for key in ["iterations", "batch_pixels", "lr_pose_start", "[field]", "[encoding]", "[refine]"] {
        assert!(text.contains(key), "missing {key}");
    }
}
