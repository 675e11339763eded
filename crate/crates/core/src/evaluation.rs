//! Image, depth, and pose metrics, and per-split reports.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::MultiSensorDataset;
use crate::encoding::{Alpha, EncodingConfig};
use crate::error::{Error, Result};
use crate::field::{FieldParams, SensorChannel, SENSOR_COUNT};
use crate::geometry::{
    align_similarity, alignment_residuals, Intrinsics, PoseError, RigidTransform, Twist,
};
use crate::raster::{Image, Mask};
use crate::renderer::{render_image, SamplingConfig};
use crate::training::{batch_gradients, lr_at, BatchEntry, CameraSet, PixelBatch, RefineConfig, TrainState};

pub const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn check_shapes(a: &Image, b: &Image, mask: Option<&Mask>) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::DimensionMismatch {
            context: "metric images",
            expected: a.data.len(),
            actual: b.data.len(),
        });
    }
    if let Some(m) = mask {
        if m.width != a.width || m.height != a.height {
            return Err(Error::invalid("mask size differs from image"));
        }
    }
    Ok(())
}

/// Peak signal-to-noise ratio for unit-range images over unmasked pixels.
/// Identical inputs give `f64::INFINITY`.
pub fn psnr(a: &Image, b: &Image, mask: Option<&Mask>) -> Result<f64> {
    check_shapes(a, b, mask)?;
    let c = a.channels;
    let mut sum = 0.0;
    let mut count = 0usize;
    for p in 0..a.pixel_count() {
        if mask.is_some_and(|m| m.excluded[p]) {
            continue;
        }
        for k in 0..c {
            let d = a.data[p * c + k] - b.data[p * c + k];
            sum += d * d;
        }
        count += c;
    }
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    let mse = sum / count as f64;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    })
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut w: [f64; SSIM_WINDOW] =
        std::array::from_fn(|i| (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp());
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    w
}

/// Mean structural similarity with an 11×11 Gaussian window (σ = 1.5) over
/// every window that fits inside the image, averaged over channels. With a
/// mask, windows whose center pixel is excluded are skipped.
pub fn ssim(a: &Image, b: &Image, mask: Option<&Mask>) -> Result<f64> {
    check_shapes(a, b, mask)?;
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(Error::ImageTooSmall {
            width: a.width,
            height: a.height,
            window: SSIM_WINDOW,
        });
    }
    let g = gaussian_window();
    let half = SSIM_WINDOW / 2;
    let c = a.channels;
    let mut total = 0.0;
    let mut windows = 0usize;
    for row in half..a.height - half {
        for col in half..a.width - half {
            if mask.is_some_and(|m| m.is_excluded(col, row)) {
                continue;
            }
            for k in 0..c {
                let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for (i, gi) in g.iter().enumerate() {
                    for (j, gj) in g.iter().enumerate() {
                        let w = gi * gj;
                        let x = a.get(col + j - half, row + i - half, k);
                        let y = b.get(col + j - half, row + i - half, k);
                        mx += w * x;
                        my += w * y;
                        xx += w * x * x;
                        yy += w * y * y;
                        xy += w * x * y;
                    }
                }
                let vx = xx - mx * mx;
                let vy = yy - my * my;
                let cov = xy - mx * my;
                total += ((2.0 * mx * my + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
            }
            windows += c;
        }
    }
    if windows == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(total / windows as f64)
}

/// Root mean squared difference over pixels where `valid` is set.
pub fn depth_rmse(pred: &Image, truth: &Image, valid: &[bool]) -> Result<f64> {
    if !pred.same_shape(truth) || pred.channels != 1 || valid.len() != pred.pixel_count() {
        return Err(Error::DimensionMismatch {
            context: "depth maps",
            expected: truth.data.len(),
            actual: pred.data.len(),
        });
    }
    let (sum, n) = accumulate_depth(pred, truth, valid);
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    Ok((sum / n as f64).sqrt())
}

fn accumulate_depth(pred: &Image, truth: &Image, valid: &[bool]) -> (f64, usize) {
    let mut sum = 0.0;
    let mut n = 0;
    for ((p, t), v) in pred.data.iter().zip(&truth.data).zip(valid) {
        if *v {
            sum += (p - t) * (p - t);
            n += 1;
        }
    }
    (sum, n)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplitTag {
    #[serde(rename = "train")]
    Training,
    #[serde(rename = "val")]
    Validation,
}

impl SplitTag {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" | "training" => Some(Self::Training),
            "val" | "validation" => Some(Self::Validation),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Training => "train",
            Self::Validation => "val",
        }
    }
}

/// Writes non-finite floats as strings so an infinite PSNR survives JSON.
mod lenient_f64 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else if *v < 0.0 {
            s.serialize_str("-inf")
        } else {
            s.serialize_str("nan")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub sensor: SensorChannel,
    pub name: String,
    #[serde(with = "lenient_f64")]
    pub psnr: f64,
    pub ssim: f64,
    pub depth_rmse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorMetrics {
    pub images: usize,
    /// Mean over images.
    #[serde(with = "lenient_f64")]
    pub psnr: f64,
    pub ssim: f64,
    /// Pooled over every pixel of the split whose truth ray hits geometry.
    pub depth_rmse: Option<f64>,
    /// Residuals after one similarity fitted to all trained cameras; only
    /// for the training split.
    pub pose: Option<PoseError>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub scene: String,
    pub method: String,
    pub split: SplitTag,
    pub sensors: [Option<SensorMetrics>; SENSOR_COUNT],
    /// Perceptual metric column kept for table shape; never computed.
    pub lpips: Option<f64>,
    /// Held-out poses were refined against their targets before scoring.
    pub pose_refinement: bool,
    pub images: Vec<ImageMetrics>,
}

fn fmt_metric(v: Option<f64>, digits: usize) -> String {
    match v {
        Some(x) if x.is_infinite() && x > 0.0 => "inf".into(),
        Some(x) => format!("{x:.digits$}"),
        None => "n/a".into(),
    }
}

impl MetricReport {
    pub fn sensor(&self, s: SensorChannel) -> Option<&SensorMetrics> {
        self.sensors[s.index()].as_ref()
    }

    /// Human-readable summary lines, one per evaluated sensor.
    pub fn summary_lines(&self) -> Vec<String> {
        SensorChannel::ALL
            .iter()
            .filter_map(|&s| {
                self.sensor(s).map(|m| {
                    format!(
                        "{} / {} [{} {}] → PSNR {}, SSIM {}, LPIPS n/a",
                        self.scene,
                        self.method,
                        s,
                        self.split.name(),
                        fmt_metric(Some(m.psnr), 2),
                        fmt_metric(Some(m.ssim), 2)
                    )
                })
            })
            .collect()
    }

    pub const CSV_HEADER: &'static str =
        "scene,method,split,sensor,images,psnr,ssim,lpips,depth_rmse,rotation_deg,translation";

    /// One CSV row per evaluated sensor, without the header.
    pub fn csv_rows(&self) -> String {
        let mut out = String::new();
        for s in SensorChannel::ALL {
            if let Some(m) = self.sensor(s) {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{},{},{},{},{}",
                    self.scene,
                    self.method,
                    self.split.name(),
                    s,
                    m.images,
                    fmt_metric(Some(m.psnr), 4),
                    fmt_metric(Some(m.ssim), 4),
                    fmt_metric(self.lpips, 4),
                    fmt_metric(m.depth_rmse, 5),
                    fmt_metric(m.pose.map(|p| p.rotation_deg), 4),
                    fmt_metric(m.pose.map(|p| p.translation), 5),
                );
            }
        }
        out
    }
}

/// `multibarf-<schedule>` for two-sensor runs, `barf-<sensor>` otherwise.
pub fn method_name(state: &TrainState) -> String {
    match state.config.sensors.as_slice() {
        [s] => format!("barf-{s}"),
        _ => format!("multibarf-{}", state.config.schedule.name()),
    }
}

/// Optimizes only the twist of a single camera against `target`, with the
/// field frozen, and returns the refined pose.
#[allow(clippy::too_many_arguments)]
pub fn refine_pose(
    params: &FieldParams,
    k: &Intrinsics,
    initial: &RigidTransform,
    target: &Image,
    mask: Option<&Mask>,
    sensor: SensorChannel,
    encoding: &EncodingConfig,
    alpha: Alpha,
    sampling: &SamplingConfig,
    cfg: &RefineConfig,
    seed: u64,
) -> Result<RigidTransform> {
    let pixels: Vec<usize> = (0..target.pixel_count())
        .filter(|&p| !mask.is_some_and(|m| m.excluded[p]))
        .collect();
    if pixels.is_empty() {
        return Err(Error::EmptyMask);
    }
    let camera = CameraSet {
        intrinsics: *k,
        names: vec![String::new()],
        initial: vec![*initial],
    };
    let mut twist = [Twist::zero()];
    let (mut m, mut v) = ([0.0; 6], [0.0; 6]);
    let hyper = crate::training::AdamHyper::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for step in 0..cfg.steps {
        let mut entries = Vec::with_capacity(cfg.batch_pixels);
        let mut targets = Vec::with_capacity(cfg.batch_pixels * target.channels);
        for _ in 0..cfg.batch_pixels {
            let p = pixels[rng.random_range(0..pixels.len())];
            let (col, row) = (p % target.width, p / target.width);
            entries.push(BatchEntry { image: 0, col, row });
            targets.extend_from_slice(target.pixel(col, row));
        }
        let batch = PixelBatch {
            sensor,
            entries,
            targets,
        };
        let g = batch_gradients(params, &camera, &twist, &batch, encoding, alpha, sampling, &mut rng)?;
        let lr = lr_at(step as u64, cfg.steps as u64, cfg.lr_start, cfg.lr_end);
        let mut x = twist[0].to_array();
        if let Some((_, grad)) = g.twists.first() {
            for j in 0..6 {
                hyper.update(&mut x[j], &mut m[j], &mut v[j], grad[j], lr, step as u64 + 1);
            }
        }
        twist[0] = Twist::from_array(x);
    }
    Ok(crate::geometry::se3_exp(&twist[0])?.compose(initial))
}

/// Scores every image of `split` for each trained sensor.
///
/// Training images are rendered at their optimized poses. Held-out images
/// start from their initial pose and get a short pose-only refinement
/// against their own target first, since a pose-free model has no other
/// way to place them.
pub fn evaluate(state: &TrainState, ds: &MultiSensorDataset, split: SplitTag) -> Result<MetricReport> {
    let cfg = &state.config;
    let alpha = state.alpha();
    let sampling = SamplingConfig {
        stratified: false,
        ..state.sampling.clone()
    };
    let trained: Vec<SensorChannel> =
        SensorChannel::ALL.into_iter().filter(|s| cfg.trains(*s)).collect();

    let pose_errors = match split {
        SplitTag::Training => joint_pose_errors(state, ds, &trained)?,
        SplitTag::Validation => [None, None],
    };

    let mut sensors: [Option<SensorMetrics>; SENSOR_COUNT] = [None, None];
    let mut images = Vec::new();
    for &s in &trained {
        let set = ds.sensor(s);
        let k = &set.intrinsics;
        let indices = match split {
            SplitTag::Training => &state.splits[s.index()].train,
            SplitTag::Validation => &state.splits[s.index()].validation,
        };
        if indices.is_empty() {
            continue;
        }
        let (mut psnr_sum, mut ssim_sum) = (0.0, 0.0);
        let (mut depth_sum, mut depth_n) = (0.0, 0usize);
        for (local, &idx) in indices.iter().enumerate() {
            let img = &set.images[idx];
            let pose = match split {
                SplitTag::Training => state.pose(s, local)?,
                SplitTag::Validation => refine_pose(
                    &state.params,
                    k,
                    &img.initial_pose,
                    &img.color,
                    img.mask.as_ref(),
                    s,
                    &cfg.encoding,
                    alpha,
                    &sampling,
                    &cfg.refine,
                    cfg.seed ^ (idx as u64 + 1) << 8 ^ s.index() as u64,
                )?,
            };
            let rendered =
                render_image(&state.params, &pose, k, s, &cfg.encoding, alpha, &sampling, cfg.seed)?;
            let p = psnr(&rendered.color, &img.color, img.mask.as_ref())?;
            let q = ssim(&rendered.color, &img.color, img.mask.as_ref())?;
            let d = img.truth_depth.as_ref().map(|truth| {
                let valid: Vec<bool> = truth
                    .data
                    .iter()
                    .enumerate()
                    .map(|(i, t)| *t < ds.far && !img.mask.as_ref().is_some_and(|m| m.excluded[i]))
                    .collect();
                let (sum, n) = accumulate_depth(&rendered.depth, truth, &valid);
                depth_sum += sum;
                depth_n += n;
                (n > 0).then(|| (sum / n as f64).sqrt())
            });
            psnr_sum += p;
            ssim_sum += q;
            images.push(ImageMetrics {
                sensor: s,
                name: img.name.clone(),
                psnr: p,
                ssim: q,
                depth_rmse: d.flatten(),
            });
        }
        let n = indices.len() as f64;
        sensors[s.index()] = Some(SensorMetrics {
            images: indices.len(),
            psnr: psnr_sum / n,
            ssim: ssim_sum / n,
            depth_rmse: (depth_n > 0).then(|| (depth_sum / depth_n as f64).sqrt()),
            pose: pose_errors[s.index()],
        });
    }
    Ok(MetricReport {
        scene: String::new(),
        method: method_name(state),
        split,
        sensors,
        lpips: None,
        pose_refinement: split == SplitTag::Validation,
        images,
    })
}

/// Fits one similarity over the training cameras of every trained sensor
/// that has ground truth, then reports residuals per sensor. Cross-sensor
/// misregistration therefore shows up in the numbers.
fn joint_pose_errors(
    state: &TrainState,
    ds: &MultiSensorDataset,
    trained: &[SensorChannel],
) -> Result<[Option<PoseError>; SENSOR_COUNT]> {
    let mut est = Vec::new();
    let mut truth = Vec::new();
    let mut ranges = [0..0, 0..0];
    for &s in trained {
        let set = ds.sensor(s);
        let start = est.len();
        for (local, &idx) in state.splits[s.index()].train.iter().enumerate() {
            if let Some(t) = set.images[idx].truth_pose {
                est.push(state.pose(s, local)?);
                truth.push(t);
            }
        }
        ranges[s.index()] = start..est.len();
    }
    if est.len() < 3 {
        return Ok([None, None]);
    }
    let centers = |v: &[RigidTransform]| v.iter().map(|p| p.center()).collect::<Vec<_>>();
    let sim = align_similarity(&centers(&est), &centers(&truth))?;
    Ok(std::array::from_fn(|s| {
        let r = ranges[s].clone();
        (!r.is_empty()).then(|| alignment_residuals(&sim, &est[r.clone()], &truth[r]))
    }))
}

/// Per-camera registration residuals of one training camera.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraResidual {
    pub sensor: SensorChannel,
    pub name: String,
    pub rotation_deg: f64,
    pub translation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseReport {
    pub method: String,
    pub sensors: [Option<PoseError>; SENSOR_COUNT],
    pub cameras: Vec<CameraResidual>,
}

/// Registration of every trained camera, aligned jointly as in
/// [`evaluate`].
pub fn pose_report(state: &TrainState, ds: &MultiSensorDataset) -> Result<PoseReport> {
    let trained: Vec<SensorChannel> =
        SensorChannel::ALL.into_iter().filter(|s| state.config.trains(*s)).collect();
    let sensors = joint_pose_errors(state, ds, &trained)?;
    let (mut est, mut truth, mut tags) = (Vec::new(), Vec::new(), Vec::new());
    for &s in &trained {
        for (local, &idx) in state.splits[s.index()].train.iter().enumerate() {
            let img = &ds.sensor(s).images[idx];
            if let Some(t) = img.truth_pose {
                est.push(state.pose(s, local)?);
                truth.push(t);
                tags.push((s, img.name.clone()));
            }
        }
    }
    let mut cameras = Vec::new();
    if est.len() >= 3 {
        let centers = |v: &[RigidTransform]| v.iter().map(|p| p.center()).collect::<Vec<_>>();
        let sim = align_similarity(&centers(&est), &centers(&truth))?;
        for (i, (sensor, name)) in tags.into_iter().enumerate() {
            let r = alignment_residuals(&sim, &est[i..=i], &truth[i..=i]);
            cameras.push(CameraResidual {
                sensor,
                name,
                rotation_deg: r.rotation_deg,
                translation: r.translation,
            });
        }
    }
    Ok(PoseReport {
        method: method_name(state),
        sensors,
        cameras,
    })
}
