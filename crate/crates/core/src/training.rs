//! Joint optimization of the field and every training camera's pose.
//!
//! Each step picks a sensor mode, samples a pixel batch from that sensor's
//! training images, renders it through the current poses, and takes one
//! Adam step on the mode's parameter groups and on the twists of the images
//! that appeared in the batch. Everything else is left bit-identical.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::MultiSensorDataset;
use crate::encoding::{Alpha, EncodingConfig};
use crate::error::{Error, Result};
use crate::field::{
    init_params, select_trainable, Dense, FieldConfig, FieldParams, ParamGroup, SensorChannel,
    TrainableSet, SENSOR_COUNT,
};
use crate::geometry::{se3_exp, se3_exp_with_derivatives, Intrinsics, Ray, RigidTransform, Twist};
use crate::renderer::{render_rays, SamplingConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModeSchedule {
    /// One step per sensor, interleaved A, B, A, ...
    Alternating,
    /// All of A's iterations, then all of B's.
    Sequential,
    /// As `Sequential`, with everything A depends on frozen in phase two.
    SequentialFrozen,
}

impl ModeSchedule {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "alternating" => Some(Self::Alternating),
            "sequential" => Some(Self::Sequential),
            "sequential-frozen" | "sequential_frozen" => Some(Self::SequentialFrozen),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Alternating => "alternating",
            Self::Sequential => "sequential",
            Self::SequentialFrozen => "sequential-frozen",
        }
    }
}

/// Test-time pose refinement used when scoring held-out views.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineConfig {
    pub steps: usize,
    pub batch_pixels: usize,
    pub lr_start: f64,
    pub lr_end: f64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            batch_pixels: 512,
            lr_start: 3e-3,
            lr_end: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Iterations per phase; sequential schedules run two phases.
    pub iterations: u64,
    pub batch_pixels: usize,
    pub lr_field_start: f64,
    pub lr_field_end: f64,
    pub lr_pose_start: f64,
    pub lr_pose_end: f64,
    /// Fractions of a phase over which alpha ramps from 0 to the band count.
    pub alpha_ramp: (f64, f64),
    pub schedule: ModeSchedule,
    pub validation_fraction: f64,
    pub seed: u64,
    /// Sensors whose images drive training. A single entry gives the
    /// one-sensor baseline.
    pub sensors: Vec<SensorChannel>,
    pub samples_per_ray: usize,
    pub stratified: bool,
    /// Step log interval; 0 disables step records.
    pub log_every: u64,
    /// Held-out evaluation interval; 0 disables it.
    pub validate_every: u64,
    pub field: FieldConfig,
    pub encoding: EncodingConfig,
    pub refine: RefineConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 10_000,
            batch_pixels: 4096,
            lr_field_start: 1e-3,
            lr_field_end: 1e-4,
            lr_pose_start: 3e-3,
            lr_pose_end: 1e-5,
            alpha_ramp: (0.2, 0.7),
            schedule: ModeSchedule::Alternating,
            validation_fraction: 0.13,
            seed: 0,
            sensors: SensorChannel::ALL.to_vec(),
            samples_per_ray: 128,
            stratified: true,
            log_every: 100,
            validate_every: 0,
            field: FieldConfig::default(),
            encoding: EncodingConfig::default(),
            refine: RefineConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let (s, e) = self.alpha_ramp;
        if !(0.0 <= s && s < e && e <= 1.0) {
            return Err(Error::invalid("alpha_ramp needs 0 <= start < end <= 1"));
        }
        if self.batch_pixels == 0 {
            return Err(Error::invalid("batch_pixels must be >= 1"));
        }
        let lrs = [self.lr_field_start, self.lr_field_end, self.lr_pose_start, self.lr_pose_end];
        if lrs.iter().any(|lr| !(lr.is_finite() && *lr > 0.0)) {
            return Err(Error::invalid("learning rates must be positive and finite"));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::invalid("validation_fraction must lie in [0, 1)"));
        }
        if self.sensors.is_empty()
            || (self.sensors.len() == 2 && self.sensors[0] == self.sensors[1])
            || self.sensors.len() > SENSOR_COUNT
        {
            return Err(Error::invalid("sensors must list one or two distinct channels"));
        }
        if self.samples_per_ray < 2 {
            return Err(Error::invalid("samples_per_ray must be >= 2"));
        }
        self.field.validate()?;
        self.encoding.validate()
    }

    pub fn trains(&self, sensor: SensorChannel) -> bool {
        self.sensors.contains(&sensor)
    }

    fn single_sensor(&self) -> Option<SensorChannel> {
        (self.sensors.len() == 1).then(|| self.sensors[0])
    }

    fn phases(&self) -> u64 {
        match (self.schedule, self.single_sensor()) {
            (_, Some(_)) | (ModeSchedule::Alternating, None) => 1,
            _ => 2,
        }
    }

    /// Total step count of a full run.
    pub fn total_iterations(&self) -> u64 {
        self.iterations * self.phases()
    }
}

/// Sensor and trainable groups for one step, plus its position within the
/// phase that owns the learning-rate and alpha schedules.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Mode {
    pub sensor: SensorChannel,
    pub trainable: TrainableSet,
    pub phase: u64,
    pub phase_iteration: u64,
}

pub fn mode_for_iteration(cfg: &TrainConfig, iteration: u64) -> Mode {
    let len = cfg.iterations.max(1);
    let phase = if cfg.phases() == 2 { (iteration / len).min(1) } else { 0 };
    let phase_iteration = iteration - phase * len;
    let sensor = match (cfg.single_sensor(), cfg.schedule) {
        (Some(s), _) => s,
        (None, ModeSchedule::Alternating) => SensorChannel::ALL[(iteration % 2) as usize],
        (None, _) => SensorChannel::ALL[phase as usize],
    };
    let frozen: &[ParamGroup] = if cfg.schedule == ModeSchedule::SequentialFrozen && phase == 1 {
        &[ParamGroup::Trunk, ParamGroup::DensityHead, ParamGroup::ColorHead(SensorChannel::A)]
    } else {
        &[]
    };
    Mode {
        sensor,
        trainable: select_trainable(sensor, frozen),
        phase,
        phase_iteration,
    }
}

/// Geometric interpolation from `start` at 0 to `end` at `total`.
pub fn lr_at(iteration: u64, total: u64, start: f64, end: f64) -> f64 {
    if total == 0 {
        return start;
    }
    let f = (iteration.min(total) as f64) / total as f64;
    start * (end / start).powf(f)
}

/// Linear ramp of the coarse-to-fine band count over `ramp` fractions of
/// `total`.
pub fn alpha_at(iteration: u64, total: u64, ramp: (f64, f64), bands: usize) -> Alpha {
    let l = bands as f64;
    if total == 0 {
        return Alpha(l);
    }
    let f = iteration as f64 / total as f64;
    let (s, e) = ramp;
    Alpha(if f < s {
        0.0
    } else if f >= e {
        l
    } else {
        l * (f - s) / (e - s)
    })
}

/// Shuffles `0..n` and holds out `floor(fraction * n)` indices. Both halves
/// come back sorted.
pub fn split_dataset(n: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n == 0 {
        return Err(Error::EmptyDomain("cannot split an empty image list".into()));
    }
    // the epsilon keeps exact products such as 0.13 * 100 from flooring low
    let held = ((fraction * n as f64) + 1e-9).floor() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut val = order[..held].to_vec();
    let mut train = order[held..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    Ok((train, val))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    /// Dataset indices of training images; twist `i` belongs to `train[i]`.
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchEntry {
    /// Index into the sensor's training list.
    pub image: usize,
    pub col: usize,
    pub row: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PixelBatch {
    pub sensor: SensorChannel,
    pub entries: Vec<BatchEntry>,
    /// `entries × channels` targets, row-major.
    pub targets: Vec<f64>,
}

/// Every unmasked pixel of one sensor's training images.
#[derive(Debug, Clone)]
pub struct PixelPool {
    sensor: SensorChannel,
    pixels: Vec<(u32, u32)>,
}

impl PixelPool {
    pub fn new(ds: &MultiSensorDataset, sensor: SensorChannel, train: &[usize]) -> Result<Self> {
        let set = ds.sensor(sensor);
        let mut pixels = Vec::new();
        for (local, &idx) in train.iter().enumerate() {
            let img = set.images.get(idx).ok_or_else(|| {
                Error::invalid(format!("training index {idx} out of range for sensor {sensor}"))
            })?;
            for p in 0..img.color.pixel_count() {
                if !img.is_excluded(p % img.color.width, p / img.color.width) {
                    pixels.push((local as u32, p as u32));
                }
            }
        }
        if pixels.is_empty() {
            return Err(Error::EmptyDomain(format!(
                "sensor {sensor} has no unmasked training pixels"
            )));
        }
        Ok(Self { sensor, pixels })
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    /// Uniform draws with replacement.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        ds: &MultiSensorDataset,
        train: &[usize],
        count: usize,
        rng: &mut R,
    ) -> PixelBatch {
        let set = ds.sensor(self.sensor);
        let channels = ds.channels(self.sensor);
        let mut entries = Vec::with_capacity(count);
        let mut targets = Vec::with_capacity(count * channels);
        for _ in 0..count {
            let (local, p) = self.pixels[rng.random_range(0..self.pixels.len())];
            let img = &set.images[train[local as usize]].color;
            let (col, row) = (p as usize % img.width, p as usize / img.width);
            entries.push(BatchEntry {
                image: local as usize,
                col,
                row,
            });
            targets.extend_from_slice(img.pixel(col, row));
        }
        PixelBatch {
            sensor: self.sensor,
            entries,
            targets,
        }
    }
}

/// Draws `count` pixels uniformly from the unmasked pixels of the listed
/// training images of `sensor`.
pub fn sample_batch<R: Rng + ?Sized>(
    ds: &MultiSensorDataset,
    sensor: SensorChannel,
    train: &[usize],
    count: usize,
    rng: &mut R,
) -> Result<PixelBatch> {
    Ok(PixelPool::new(ds, sensor, train)?.sample(ds, train, count, rng))
}

/// Mean squared error over all entries and channels.
pub fn photometric_loss(predicted: &[f64], target: &[f64]) -> Result<f64> {
    if predicted.len() != target.len() {
        return Err(Error::DimensionMismatch {
            context: "photometric loss",
            expected: target.len(),
            actual: predicted.len(),
        });
    }
    if target.is_empty() {
        return Err(Error::EmptyDomain("empty batch".into()));
    }
    let sum: f64 = predicted.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(sum / target.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamHyper {
    /// One bias-corrected update; `step` counts this update (starts at 1).
    #[inline]
    pub fn update(&self, value: &mut f64, m: &mut f64, v: &mut f64, g: f64, lr: f64, step: u64) {
        *m = self.beta1 * *m + (1.0 - self.beta1) * g;
        *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
        let m_hat = *m / (1.0 - self.beta1.powi(step as i32));
        let v_hat = *v / (1.0 - self.beta2.powi(step as i32));
        *value -= lr * m_hat / (v_hat.sqrt() + self.eps);
    }
}

/// Adam moments for the field (one step counter per group) and for every
/// twist (one counter per image).
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub hyper: AdamHyper,
    pub field_m: FieldParams,
    pub field_v: FieldParams,
    pub field_steps: [u64; 4],
    pub twist_m: [Vec<[f64; 6]>; SENSOR_COUNT],
    pub twist_v: [Vec<[f64; 6]>; SENSOR_COUNT],
    pub twist_steps: [Vec<u64>; SENSOR_COUNT],
}

impl AdamState {
    fn new(params: &FieldParams, twists: &[Vec<Twist>; SENSOR_COUNT]) -> Self {
        let zeros = |s: usize| vec![[0.0; 6]; twists[s].len()];
        Self {
            hyper: AdamHyper::default(),
            field_m: params.zeros_like(),
            field_v: params.zeros_like(),
            field_steps: [0; 4],
            twist_m: [zeros(0), zeros(1)],
            twist_v: [zeros(0), zeros(1)],
            twist_steps: [vec![0; twists[0].len()], vec![0; twists[1].len()]],
        }
    }
}

/// Intrinsics and initial poses of one sensor's training cameras.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraSet {
    pub intrinsics: Intrinsics,
    pub names: Vec<String>,
    pub initial: Vec<RigidTransform>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub sampling: SamplingConfig,
    pub params: FieldParams,
    pub splits: [Split; SENSOR_COUNT],
    pub cameras: [CameraSet; SENSOR_COUNT],
    /// One twist per training image, composed on the left of its initial
    /// pose.
    pub twists: [Vec<Twist>; SENSOR_COUNT],
    pub adam: AdamState,
    pub iteration: u64,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    /// Current estimate of training camera `i` of `sensor`.
    pub fn pose(&self, sensor: SensorChannel, i: usize) -> Result<RigidTransform> {
        let s = sensor.index();
        Ok(se3_exp(&self.twists[s][i])?.compose(&self.cameras[s].initial[i]))
    }

    pub fn poses(&self, sensor: SensorChannel) -> Result<Vec<RigidTransform>> {
        (0..self.twists[sensor.index()].len()).map(|i| self.pose(sensor, i)).collect()
    }

    pub fn is_complete(&self) -> bool {
        self.iteration >= self.config.total_iterations()
    }

    /// Alpha the field was last trained with, used for rendering: that of
    /// the most recent step (so a phase boundary still renders with the
    /// finished phase's alpha), fully open once training is complete.
    pub fn alpha(&self) -> Alpha {
        let cfg = &self.config;
        if self.is_complete() {
            return Alpha::full(cfg.encoding.position_bands);
        }
        let mode = mode_for_iteration(cfg, self.iteration.saturating_sub(1));
        alpha_at(mode.phase_iteration, cfg.iterations, cfg.alpha_ramp, cfg.encoding.position_bands)
    }
}

pub fn init_state(ds: &MultiSensorDataset, cfg: &TrainConfig) -> Result<TrainState> {
    cfg.validate()?;
    ds.validate()?;
    let params = init_params(&cfg.field, &cfg.encoding, cfg.seed)?;
    let mut splits = Vec::with_capacity(SENSOR_COUNT);
    let mut cameras = Vec::with_capacity(SENSOR_COUNT);
    for s in SensorChannel::ALL {
        let set = ds.sensor(s);
        if ds.channels(s) != cfg.field.channels_per_sensor {
            return Err(Error::DimensionMismatch {
                context: "sensor channels",
                expected: cfg.field.channels_per_sensor,
                actual: ds.channels(s),
            });
        }
        let split = if set.images.is_empty() {
            if cfg.trains(s) {
                return Err(Error::EmptyDomain(format!("sensor {s} has no images")));
            }
            Split {
                train: vec![],
                validation: vec![],
            }
        } else {
            let (train, validation) = split_dataset(
                set.images.len(),
                cfg.validation_fraction,
                cfg.seed.wrapping_add(s.index() as u64 + 1),
            )?;
            Split { train, validation }
        };
        if cfg.trains(s) && split.train.is_empty() {
            return Err(Error::EmptyDomain(format!("sensor {s} has no training images")));
        }
        cameras.push(CameraSet {
            intrinsics: set.intrinsics,
            names: split.train.iter().map(|&i| set.images[i].name.clone()).collect(),
            initial: split.train.iter().map(|&i| set.images[i].initial_pose).collect(),
        });
        splits.push(split);
    }
    let splits: [Split; 2] = splits.try_into().expect("two sensors");
    let cameras: [CameraSet; 2] = cameras.try_into().expect("two sensors");
    let twists = [
        vec![Twist::zero(); splits[0].train.len()],
        vec![Twist::zero(); splits[1].train.len()],
    ];
    let sampling = SamplingConfig {
        samples_per_ray: cfg.samples_per_ray,
        stratified: cfg.stratified,
        near: ds.near,
        far: ds.far,
        background: ds.background.clone(),
    };
    sampling.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    Ok(TrainState {
        config: cfg.clone(),
        sampling,
        adam: AdamState::new(&params, &twists),
        params,
        splits,
        cameras,
        twists,
        iteration: 0,
        rng,
    })
}

/// Loss of one batch with gradients for the field and for the twists of
/// the images it touches.
#[derive(Debug, Clone)]
pub struct BatchGradients {
    pub loss: f64,
    pub predicted: Vec<f64>,
    pub field: FieldParams,
    /// `(training image, d loss / d twist)` in ascending image order.
    pub twists: Vec<(usize, [f64; 6])>,
}

/// Renders `batch` through `exp(twist_i) ∘ initial_i` and backpropagates
/// the mean squared error.
#[allow(clippy::too_many_arguments)]
pub fn batch_gradients<R: Rng + ?Sized>(
    params: &FieldParams,
    cameras: &CameraSet,
    twists: &[Twist],
    batch: &PixelBatch,
    encoding: &EncodingConfig,
    alpha: Alpha,
    sampling: &SamplingConfig,
    rng: &mut R,
) -> Result<BatchGradients> {
    let k = &cameras.intrinsics;
    let mut warps = BTreeMap::new();
    for e in &batch.entries {
        if let std::collections::btree_map::Entry::Vacant(slot) = warps.entry(e.image) {
            let twist = twists.get(e.image).ok_or_else(|| {
                Error::invalid(format!("batch references unknown image {}", e.image))
            })?;
            slot.insert(se3_exp_with_derivatives(twist)?);
        }
    }
    let mut rays = Vec::with_capacity(batch.entries.len());
    let mut bases = Vec::with_capacity(batch.entries.len());
    for e in &batch.entries {
        let init = &cameras.initial[e.image];
        let (x, y) = Intrinsics::pixel_center(e.col, e.row);
        let o0 = init.translation;
        let d0 = init.rotation * k.camera_direction(x, y);
        let (warp, _) = &warps[&e.image];
        rays.push(Ray {
            origin: warp.rotation * o0 + warp.translation,
            direction: warp.rotation * d0,
            near: sampling.near,
            far: sampling.far,
        });
        bases.push((o0, d0));
    }
    let rendered = render_rays(params, &rays, batch.sensor, encoding, alpha, sampling, rng)?;
    let channels = params.config.channels_per_sensor;
    let mut predicted = Vec::with_capacity(rays.len() * channels);
    for r in 0..rays.len() {
        predicted.extend_from_slice(&rendered.result(r).color);
    }
    let loss = photometric_loss(&predicted, &batch.targets)?;
    let scale = 2.0 / predicted.len() as f64;
    let d_color: Vec<f64> = predicted
        .iter()
        .zip(&batch.targets)
        .map(|(p, t)| scale * (p - t))
        .collect();
    let mut field = params.zeros_like();
    let ray_grads =
        rendered.backward(params, &d_color, sampling.background(batch.sensor), &mut field)?;

    // o = R o0 + t and d = R d0, so only the outer products with the
    // initial-pose ray are needed per image.
    let mut outer: BTreeMap<usize, (Matrix3<f64>, Vector3<f64>)> = BTreeMap::new();
    for ((e, g), (o0, d0)) in batch.entries.iter().zip(&ray_grads).zip(&bases) {
        let acc = outer.entry(e.image).or_insert((Matrix3::zeros(), Vector3::zeros()));
        acc.0 += g.origin * o0.transpose() + g.direction * d0.transpose();
        acc.1 += g.origin;
    }
    let twist_grads = outer
        .into_iter()
        .map(|(image, (m, gsum))| {
            let (_, derivs) = &warps[&image];
            let g = std::array::from_fn(|j| {
                derivs[j].rotation.component_mul(&m).sum() + derivs[j].translation.dot(&gsum)
            });
            (image, g)
        })
        .collect();
    Ok(BatchGradients {
        loss,
        predicted,
        field,
        twists: twist_grads,
    })
}

fn adam_dense(h: &AdamHyper, p: &mut Dense, m: &mut Dense, v: &mut Dense, g: &Dense, lr: f64, step: u64) {
    ndarray::Zip::from(&mut p.weight)
        .and(&mut m.weight)
        .and(&mut v.weight)
        .and(&g.weight)
        .for_each(|p, m, v, g| h.update(p, m, v, *g, lr, step));
    ndarray::Zip::from(&mut p.bias)
        .and(&mut m.bias)
        .and(&mut v.bias)
        .and(&g.bias)
        .for_each(|p, m, v, g| h.update(p, m, v, *g, lr, step));
}

/// Applies one Adam update to the field groups in `trainable`.
pub fn apply_field_update(
    params: &mut FieldParams,
    adam: &mut AdamState,
    grad: &FieldParams,
    trainable: TrainableSet,
    lr: f64,
) {
    let h = adam.hyper;
    for g in trainable.groups() {
        adam.field_steps[g.index()] += 1;
        let step = adam.field_steps[g.index()];
        let layers = params.group_mut(g);
        let ms = adam.field_m.group_mut(g);
        let vs = adam.field_v.group_mut(g);
        let gs = grad.group(g);
        for (((p, m), v), gr) in layers.into_iter().zip(ms).zip(vs).zip(gs) {
            adam_dense(&h, p, m, v, gr, lr, step);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub iteration: u64,
    pub mode: SensorChannel,
    pub loss: f64,
    pub lr_field: f64,
    pub lr_pose: f64,
    pub alpha: f64,
}

/// Takes one optimization step. On error the state is left untouched, so a
/// diverged run still holds its last good parameters.
pub fn train_step(state: &mut TrainState, ds: &MultiSensorDataset, pool: &PixelPool) -> Result<StepLog> {
    let cfg = &state.config;
    let mode = mode_for_iteration(cfg, state.iteration);
    if pool.sensor != mode.sensor {
        return Err(Error::invalid(format!(
            "pixel pool is for sensor {}, step needs {}",
            pool.sensor, mode.sensor
        )));
    }
    let s = mode.sensor.index();
    let lr_field = lr_at(mode.phase_iteration, cfg.iterations, cfg.lr_field_start, cfg.lr_field_end);
    let lr_pose = lr_at(mode.phase_iteration, cfg.iterations, cfg.lr_pose_start, cfg.lr_pose_end);
    let alpha = alpha_at(
        mode.phase_iteration,
        cfg.iterations,
        cfg.alpha_ramp,
        cfg.encoding.position_bands,
    );
    let mut rng = state.rng.clone();
    let batch = pool.sample(ds, &state.splits[s].train, cfg.batch_pixels, &mut rng);
    let grads = batch_gradients(
        &state.params,
        &state.cameras[s],
        &state.twists[s],
        &batch,
        &cfg.encoding,
        alpha,
        &state.sampling,
        &mut rng,
    )?;
    if !grads.loss.is_finite() {
        return Err(Error::Diverged {
            iteration: state.iteration,
            loss: grads.loss,
        });
    }

    apply_field_update(&mut state.params, &mut state.adam, &grads.field, mode.trainable, lr_field);
    let h = state.adam.hyper;
    for (image, g) in &grads.twists {
        state.adam.twist_steps[s][*image] += 1;
        let step = state.adam.twist_steps[s][*image];
        let mut x = state.twists[s][*image].to_array();
        for j in 0..6 {
            h.update(
                &mut x[j],
                &mut state.adam.twist_m[s][*image][j],
                &mut state.adam.twist_v[s][*image][j],
                g[j],
                lr_pose,
                step,
            );
        }
        state.twists[s][*image] = Twist::from_array(x);
    }
    state.rng = rng;
    let log = StepLog {
        iteration: state.iteration,
        mode: mode.sensor,
        loss: grads.loss,
        lr_field,
        lr_pose,
        alpha: alpha.0,
    };
    state.iteration += 1;
    Ok(log)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationLog {
    pub iteration: u64,
    /// Held-out PSNR per sensor; `None` where the sensor has no held-out
    /// images or is not trained.
    pub psnr: [Option<f64>; SENSOR_COUNT],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Step(StepLog),
    Validation(ValidationLog),
}

/// Pixel pools for every trained sensor.
pub fn pixel_pools(state: &TrainState, ds: &MultiSensorDataset) -> Result<[Option<PixelPool>; SENSOR_COUNT]> {
    let mut pools = [None, None];
    for s in SensorChannel::ALL {
        if state.config.trains(s) {
            pools[s.index()] = Some(PixelPool::new(ds, s, &state.splits[s.index()].train)?);
        }
    }
    Ok(pools)
}

/// Runs steps until iteration `until` (capped at the schedule's total),
/// reporting every log record to `observer`.
pub fn run_until(
    state: &mut TrainState,
    ds: &MultiSensorDataset,
    until: u64,
    observer: &mut dyn FnMut(&TrainState, &LogRecord),
) -> Result<()> {
    let pools = pixel_pools(state, ds)?;
    let end = until.min(state.config.total_iterations());
    while state.iteration < end {
        let mode = mode_for_iteration(&state.config, state.iteration);
        let pool = pools[mode.sensor.index()]
            .as_ref()
            .expect("pool exists for every trained sensor");
        let log = train_step(state, ds, pool)?;
        let every = state.config.log_every;
        if every > 0 && (log.iteration % every == 0 || state.iteration == end) {
            observer(state, &LogRecord::Step(log));
        }
        let every = state.config.validate_every;
        if every > 0 && state.iteration % every == 0 {
            let record = validation_record(state, ds)?;
            observer(state, &LogRecord::Validation(record));
        }
    }
    Ok(())
}

fn validation_record(state: &TrainState, ds: &MultiSensorDataset) -> Result<ValidationLog> {
    let report = crate::evaluation::evaluate(state, ds, crate::evaluation::SplitTag::Validation)?;
    Ok(ValidationLog {
        iteration: state.iteration,
        psnr: std::array::from_fn(|s| report.sensors[s].as_ref().map(|m| m.psnr)),
    })
}

/// Result of a full run.
#[derive(Debug, Clone)]
pub struct TrainRun {
    pub state: TrainState,
    pub logs: Vec<LogRecord>,
}

/// Initializes and trains for the configured number of iterations.
pub fn train(ds: &MultiSensorDataset, cfg: &TrainConfig) -> Result<TrainRun> {
    let mut state = init_state(ds, cfg)?;
    let mut logs = Vec::new();
    run_until(&mut state, ds, cfg.total_iterations(), &mut |_, r| logs.push(r.clone()))?;
    Ok(TrainRun { state, logs })
}
