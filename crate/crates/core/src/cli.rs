//! Command-line surface: dataset generation, training, rendering,
//! evaluation and pose reports.
//!
//! Failures print one line `error kind=<tag> message=<json string>` to
//! stderr and exit with status 1; usage errors exit with status 2.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{CommandFactory, Parser, Subcommand, ValueEnum};

use crate::datastore::{
    dump_config, load_checkpoint, load_config, load_dataset, load_manifest, render_artifacts,
    save_checkpoint, save_depth, save_png, save_synthetic,
};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, pose_report, MetricReport, SplitTag};
use crate::field::SensorChannel;
use crate::geometry::RigidTransform;
use crate::renderer::{render_pair, SamplingConfig};
use crate::synthetic::{generate_scene, make_dataset, DatasetOptions, PoseNoise};
use crate::training::{init_state, run_until, LogRecord, ModeSchedule, TrainConfig};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Debug, Parser)]
#[command(name = "multibarf", version, about = "Two-sensor radiance fields with pose refinement")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScheduleArg {
    Alternating,
    Sequential,
    SequentialFrozen,
}

impl From<ScheduleArg> for ModeSchedule {
    fn from(s: ScheduleArg) -> Self {
        match s {
            ScheduleArg::Alternating => ModeSchedule::Alternating,
            ScheduleArg::Sequential => ModeSchedule::Sequential,
            ScheduleArg::SequentialFrozen => ModeSchedule::SequentialFrozen,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SensorArg {
    A,
    B,
}

impl From<SensorArg> for SensorChannel {
    fn from(s: SensorArg) -> Self {
        match s {
            SensorArg::A => SensorChannel::A,
            SensorArg::B => SensorChannel::B,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic two-sensor dataset with perturbed initial poses.
    GenerateScene {
        #[arg(long, default_value = "textured-shapes")]
        preset: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 16)]
        views_a: usize,
        #[arg(long, default_value_t = 16)]
        views_b: usize,
        #[arg(long, default_value_t = 5.0)]
        pose_noise_deg: f64,
        /// Translation noise as a fraction of the scene radius.
        #[arg(long, default_value_t = 0.02)]
        pose_noise_trans: f64,
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long, default_value_t = 64)]
        height: usize,
        /// Exclude a corner rectangle of every sensor-B image.
        #[arg(long)]
        logo_mask: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a field and the training-camera poses.
    Train {
        #[arg(long, required_unless_present = "dump_config")]
        dataset: Option<PathBuf>,
        /// TOML file; missing keys take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        schedule: Option<ScheduleArg>,
        #[arg(long)]
        iterations: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Train on one sensor only (single-sensor baseline).
        #[arg(long, value_enum)]
        only: Option<SensorArg>,
        /// Print the full effective configuration and exit.
        #[arg(long)]
        dump_config: bool,
        #[arg(long, required_unless_present = "dump_config")]
        out: Option<PathBuf>,
    },
    /// Render both sensors and depth from one viewpoint.
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Training-camera index, or a file holding a 3x4 row-major
        /// camera-to-world matrix.
        #[arg(long)]
        pose: String,
        /// Sensor whose cameras and intrinsics an index refers to.
        #[arg(long, value_enum, default_value = "a")]
        sensor: SensorArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on the training or held-out images.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum, default_value = "val")]
        split: SplitArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Registration error of every training camera.
    PoseReport {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parses `argv` (including the program name) and runs it; returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let argv: Vec<std::ffi::OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            if e.use_stderr() {
                eprintln!("\n{}", usage_for(argv.get(1)));
            }
            return e.exit_code();
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            1
        }
    }
}

/// Usage text of the named subcommand, or of the whole program.
fn usage_for(sub: Option<&std::ffi::OsString>) -> String {
    let mut cmd = Cli::command();
    let name = sub.and_then(|s| s.to_str()).unwrap_or_default();
    match cmd.find_subcommand_mut(name) {
        Some(sub) => sub.clone().bin_name(format!("multibarf {name}")).render_usage().to_string(),
        None => cmd.render_usage().to_string(),
    }
}

pub fn error_line(e: &Error) -> String {
    let msg = serde_json::to_string(&e.to_string()).expect("string serializes");
    format!("error kind={} message={msg}", e.kind())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenerateScene {
            preset,
            seed,
            views_a,
            views_b,
            pose_noise_deg,
            pose_noise_trans,
            width,
            height,
            logo_mask,
            out,
        } => {
            let spec = generate_scene(&preset, seed)?;
            let opts = DatasetOptions {
                views: [views_a, views_b],
                pose_noise: PoseNoise {
                    rotation_deg: pose_noise_deg,
                    translation_fraction: pose_noise_trans,
                },
                width,
                height,
                logo_mask,
                ..Default::default()
            };
            let syn = make_dataset(&spec, &opts, seed)?;
            save_synthetic(&syn, &out)?;
            println!(
                "wrote {} + {} views of `{preset}` to {}",
                views_a,
                views_b,
                out.display()
            );
            Ok(())
        }
        Command::Train {
            dataset,
            config,
            schedule,
            iterations,
            seed,
            only,
            dump_config: dump,
            out,
        } => {
            let mut cfg = match &config {
                Some(path) => load_config(path)?,
                None => TrainConfig::default(),
            };
            if let Some(s) = schedule {
                cfg.schedule = s.into();
            }
            if let Some(n) = iterations {
                cfg.iterations = n;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(s) = only {
                cfg.sensors = vec![s.into()];
            }
            cfg.validate()?;
            if dump {
                print!("{}", dump_config(&cfg));
                return Ok(());
            }
            let (Some(dataset), Some(out)) = (dataset, out) else {
                return Err(Error::invalid("--dataset and --out are required"));
            };
            train_command(&dataset, &cfg, &out)
        }
        Command::Render {
            checkpoint,
            pose,
            sensor,
            out,
        } => {
            let state = load_checkpoint(&checkpoint)?;
            let sensor = SensorChannel::from(sensor);
            let pose = resolve_pose(&state, sensor, &pose)?;
            let k = state.cameras[sensor.index()].intrinsics;
            let sampling = SamplingConfig {
                stratified: false,
                ..state.sampling.clone()
            };
            let (a, b, depth) = render_pair(
                &state.params,
                &pose,
                &k,
                &state.config.encoding,
                state.alpha(),
                &sampling,
                state.config.seed,
            )?;
            let [pa, pb, pd] = render_artifacts(&out);
            save_png(&a, &pa)?;
            save_png(&b, &pb)?;
            save_depth(&depth, &pd)?;
            for p in [pa, pb, pd] {
                println!("{}", p.display());
            }
            Ok(())
        }
        Command::Evaluate {
            checkpoint,
            dataset,
            split,
            out,
        } => {
            let state = load_checkpoint(&checkpoint)?;
            let ds = load_dataset(&dataset)?;
            let split = match split {
                SplitArg::Train => SplitTag::Training,
                SplitArg::Val => SplitTag::Validation,
            };
            let mut report = evaluate(&state, &ds, split)?;
            report.scene = scene_name(&dataset);
            write_report(&report, &out)?;
            for line in report.summary_lines() {
                println!("{line}");
            }
            Ok(())
        }
        Command::PoseReport {
            checkpoint,
            dataset,
            out,
        } => {
            let state = load_checkpoint(&checkpoint)?;
            let ds = load_dataset(&dataset)?;
            let report = pose_report(&state, &ds)?;
            let text = serde_json::to_string_pretty(&report).expect("report serializes");
            write_text(&out.join("pose_report.json"), &text)?;
            for s in SensorChannel::ALL {
                if let Some(e) = report.sensors[s.index()] {
                    println!(
                        "{} [{s}] rotation {:.3} deg, translation {:.4}",
                        report.method, e.rotation_deg, e.translation
                    );
                }
            }
            Ok(())
        }
    }
}

fn scene_name(dataset: &Path) -> String {
    load_manifest(dataset)
        .ok()
        .and_then(|m| m.generator)
        .map(|g| g.scene.name)
        .unwrap_or_default()
}

/// Writes `report.json` and `report.csv` into `dir`.
pub fn write_report(report: &MetricReport, dir: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(report).expect("report serializes");
    write_text(&dir.join("report.json"), &json)?;
    let csv = format!("{}\n{}", MetricReport::CSV_HEADER, report.csv_rows());
    write_text(&dir.join("report.csv"), &csv)
}

fn train_command(dataset: &Path, cfg: &TrainConfig, out: &Path) -> Result<()> {
    let ds = load_dataset(dataset)?;
    let mut state = init_state(&ds, cfg)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_text(&out.join(CONFIG_FILE), &dump_config(cfg))?;
    let log_path = out.join(LOG_FILE);
    let mut log = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut io_error = None;
    let result = run_until(&mut state, &ds, u64::MAX, &mut |_, record: &LogRecord| {
        let line = serde_json::to_string(record).expect("log record serializes");
        if let Err(e) = writeln!(log, "{line}") {
            io_error.get_or_insert(e);
        }
        if let LogRecord::Step(s) = record {
            eprintln!(
                "iter {:>6} [{}] loss {:.5} alpha {:.2}",
                s.iteration, s.mode, s.loss, s.alpha
            );
        }
    });
    // a diverged run still leaves its last good state on disk
    save_checkpoint(&state, &out.join(CHECKPOINT_FILE))?;
    result?;
    if let Some(e) = io_error {
        return Err(Error::io(log_path, e));
    }
    println!("{}", out.join(CHECKPOINT_FILE).display());
    Ok(())
}

fn resolve_pose(
    state: &crate::training::TrainState,
    sensor: SensorChannel,
    spec: &str,
) -> Result<RigidTransform> {
    if let Ok(i) = spec.parse::<usize>() {
        let n = state.twists[sensor.index()].len();
        if i >= n {
            return Err(Error::invalid(format!(
                "pose index {i} out of range: sensor {sensor} has {n} training cameras"
            )));
        }
        return state.pose(sensor, i);
    }
    let path = Path::new(spec);
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_pose(&text).map_err(|reason| Error::load(spec, reason))
}

/// Twelve numbers, row-major `[R | t]`, separated by whitespace, commas or
/// JSON brackets.
pub fn parse_pose(text: &str) -> std::result::Result<RigidTransform, String> {
    let values: Vec<f64> = text
        .split(|c: char| c.is_whitespace() || matches!(c, ',' | '[' | ']'))
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<f64>().map_err(|_| format!("`{t}` is not a number")))
        .collect::<std::result::Result<_, _>>()?;
    if values.len() != 12 {
        return Err(format!("expected 12 numbers, found {}", values.len()));
    }
    let rows: [[f64; 4]; 3] = std::array::from_fn(|r| std::array::from_fn(|c| values[4 * r + c]));
    RigidTransform::from_rows(&rows, crate::datastore::POSE_TOLERANCE).map_err(|e| e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn invalid_schedule_is_a_usage_error() {
        let code = run(["multibarf", "train", "--dataset", "d", "--out", "o", "--schedule", "zigzag"]);
        assert_eq!(code, 2);
        assert_eq!(run(["multibarf", "frobnicate"]), 2);
        assert_eq!(run(["multibarf", "evaluate", "--bogus"]), 2);
    }

    #[test]
    fn runtime_errors_exit_one() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope.bin");
        let code = run([
            "multibarf",
            "render",
            "--checkpoint",
            missing.to_str().unwrap(),
            "--pose",
            "0",
            "--out",
            dir.path().to_str().unwrap(),
        ]);
        assert_eq!(code, 1);
    }

    #[test]
    fn error_line_is_single_line() {
        let line = error_line(&Error::invalid("two\nlines"));
        assert_eq!(line.lines().count(), 1);
        assert!(line.starts_with("error kind=invalid-argument message=\""));
    }

    #[test]
    fn pose_file_formats() {
        let p = parse_pose("1 0 0 0.5\n0 1 0 0\n0 0 1 3").unwrap();
        assert_eq!(p.translation.z, 3.0);
        let q = parse_pose("[[1,0,0,0.5],[0,1,0,0],[0,0,1,3]]").unwrap();
        assert_eq!(p, q);
        assert!(parse_pose("1 0 0").is_err());
        assert!(parse_pose("2 0 0 0 0 1 0 0 0 0 1 0").unwrap_err().contains("orthonormal"));
    }
}
