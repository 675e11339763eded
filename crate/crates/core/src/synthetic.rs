//! Procedural two-sensor scenes with an exact ray-traced oracle.
//!
//! Both sensors see the same opaque geometry. Sensor A shades every surface
//! with a high-frequency procedural texture; sensor B shows one flat
//! emission value per primitive, so its only edges are where emission
//! changes.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{MultiSensorDataset, Perturbation, SensorImage, SensorSet};
use crate::error::{Error, Result};
use crate::field::{SensorChannel, SENSOR_COUNT};
use crate::geometry::{axis_angle, Intrinsics, RigidTransform};
use crate::raster::{Image, Mask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Shape {
    /// Radius `size[0]`.
    Sphere,
    /// Half extents `size`.
    Box,
    /// Two-sided square in the local `y = 0` plane, half extents
    /// `size[0]` along x and `size[2]` along z.
    Plane,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pattern {
    Checker,
    Stripes,
    Rings,
}

/// Sensor-A surface texture evaluated in primitive-local coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Texture {
    pub pattern: Pattern,
    pub base: [f64; 3],
    pub accent: [f64; 3],
    /// Cycles per scene unit.
    pub frequency: f64,
}

impl Texture {
    pub fn shade(&self, p: &Vector3<f64>) -> [f64; 3] {
        let f = self.frequency;
        let t = match self.pattern {
            Pattern::Checker => {
                let cell = (p.x * f).floor() + (p.y * f).floor() + (p.z * f).floor();
                if cell.rem_euclid(2.0) < 1.0 {
                    0.15
                } else {
                    0.85
                }
            }
            Pattern::Stripes => 0.5 + 0.5 * (std::f64::consts::TAU * f * (p.x + 0.5 * p.y)).sin(),
            Pattern::Rings => {
                let r = (p.x * p.x + p.z * p.z).sqrt() + 0.3 * p.y;
                0.5 + 0.5 * (std::f64::consts::TAU * f * r).cos()
            }
        };
        std::array::from_fn(|k| self.base[k] + (self.accent[k] - self.base[k]) * t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    /// Primitive-to-world transform.
    pub pose: RigidTransform,
    pub size: [f64; 3],
    pub texture: Texture,
    /// Sensor-B emission in `[0, 1]`.
    pub emission: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub name: String,
    pub primitives: Vec<Primitive>,
    pub background: [[f64; 3]; SENSOR_COUNT],
    pub scene_radius: f64,
}

/// Maps a scalar emission to a false-color triple in `[0, 1]`.
pub fn thermal_palette(e: f64) -> [f64; 3] {
    let e = e.clamp(0.0, 1.0);
    [e.sqrt(), e * e, 0.6 * e * (1.0 - e) + 0.4 * e.powi(4)]
}

impl Primitive {
    /// Sensor appearance at a world-space surface point.
    pub fn appearance(&self, sensor: SensorChannel, world: &Vector3<f64>) -> [f64; 3] {
        match sensor {
            SensorChannel::A => {
                let local = self.pose.inverse().transform_point(world);
                self.texture.shade(&local)
            }
            SensorChannel::B => thermal_palette(self.emission),
        }
    }

    /// Nearest positive ray parameter of intersection, if any.
    pub fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        let inv = self.pose.inverse();
        let o = inv.transform_point(origin);
        let d = inv.transform_vector(dir);
        let eps = 1e-9;
        match self.shape {
            Shape::Sphere => {
                let r = self.size[0];
                let b = o.dot(&d);
                let c = o.norm_squared() - r * r;
                let disc = b * b - c;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                [-b - sq, -b + sq].into_iter().find(|t| *t > eps)
            }
            Shape::Box => {
                let mut t_min = f64::NEG_INFINITY;
                let mut t_max = f64::INFINITY;
                for a in 0..3 {
                    let h = self.size[a];
                    if d[a].abs() < 1e-15 {
                        if o[a].abs() > h {
                            return None;
                        }
                        continue;
                    }
                    let t1 = (-h - o[a]) / d[a];
                    let t2 = (h - o[a]) / d[a];
                    t_min = t_min.max(t1.min(t2));
                    t_max = t_max.min(t1.max(t2));
                }
                if t_max < t_min || t_max <= eps {
                    None
                } else if t_min > eps {
                    Some(t_min)
                } else {
                    Some(t_max)
                }
            }
            Shape::Plane => {
                if d.y.abs() < 1e-15 {
                    return None;
                }
                let t = -o.y / d.y;
                if t <= eps {
                    return None;
                }
                let p = o + d * t;
                (p.x.abs() <= self.size[0] && p.z.abs() <= self.size[2]).then_some(t)
            }
        }
    }

    pub fn contains(&self, world: &Vector3<f64>) -> bool {
        let p = self.pose.inverse().transform_point(world);
        match self.shape {
            Shape::Sphere => p.norm() < self.size[0],
            Shape::Box => (0..3).all(|a| p[a].abs() < self.size[a]),
            Shape::Plane => false,
        }
    }

    fn bounding_radius(&self) -> f64 {
        let c = self.pose.translation.norm();
        match self.shape {
            Shape::Sphere => c + self.size[0],
            Shape::Box => c + Vector3::from(self.size).norm(),
            Shape::Plane => c + (self.size[0].powi(2) + self.size[2].powi(2)).sqrt(),
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        for (i, p) in self.primitives.iter().enumerate() {
            if p.bounding_radius() > self.scene_radius + 1e-9 {
                return Err(Error::invalid(format!(
                    "primitive {i} extends beyond scene radius {}",
                    self.scene_radius
                )));
            }
            let ok = (0.0..=1.0).contains(&p.emission)
                && p.texture.base.iter().chain(&p.texture.accent).all(|v| (0.0..=1.0).contains(v));
            if !ok {
                return Err(Error::invalid(format!("primitive {i} appearance outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// Nearest hit `(primitive index, ray parameter)` along a ray.
    pub fn trace(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(usize, f64)> {
        self.primitives
            .iter()
            .enumerate()
            .filter_map(|(i, p)| p.intersect(origin, dir).map(|t| (i, t)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
    }
}

pub const PRESETS: [&str; 2] = ["textured-shapes", "shared-boundary-subset"];

fn random_color(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> [f64; 3] {
    std::array::from_fn(|_| rng.random_range(lo..hi))
}

fn yaw(angle: f64) -> nalgebra::Matrix3<f64> {
    axis_angle(&Vector3::y(), angle)
}

fn floor(texture: Texture, emission: f64) -> Primitive {
    Primitive {
        shape: Shape::Plane,
        pose: RigidTransform::from_translation(Vector3::new(0.0, -0.5, 0.0)),
        size: [1.1, 0.0, 1.1],
        texture,
        emission,
    }
}

/// Builds a named scene preset. Same `(kind, seed)` gives the same scene.
pub fn generate_scene(kind: &str, seed: u64) -> Result<SceneSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = match kind {
        "textured-shapes" => textured_shapes(&mut rng),
        "shared-boundary-subset" => shared_boundary_subset(&mut rng),
        other => return Err(Error::UnknownPreset(other.to_string())),
    };
    spec.validate()?;
    Ok(spec)
}

/// A textured floor that sensor B sees as a dim, uniform plane, plus two or
/// three distinctly emitting objects.
fn textured_shapes(rng: &mut ChaCha8Rng) -> SceneSpec {
    let floor_texture = Texture {
        pattern: Pattern::Checker,
        base: random_color(rng, 0.05, 0.3),
        accent: random_color(rng, 0.7, 0.95),
        frequency: rng.random_range(1.5..2.0),
    };
    let mut primitives = vec![floor(floor_texture, 0.3)];

    let objects = rng.random_range(2..=3usize);
    let slots = [(-0.45, -0.1), (0.4, -0.25), (0.05, 0.45)];
    let emissions = [0.55, 0.45, 0.4];
    for (i, &(x, z)) in slots.iter().take(objects).enumerate() {
        let pattern = [Pattern::Stripes, Pattern::Checker, Pattern::Rings][i];
        let texture = Texture {
            pattern,
            base: random_color(rng, 0.0, 0.35),
            accent: random_color(rng, 0.6, 1.0),
            frequency: rng.random_range(1.5..2.5),
        };
        let jitter = Vector3::new(rng.random_range(-0.05..0.05), 0.0, rng.random_range(-0.05..0.05));
        let prim = if i == 0 {
            let r = rng.random_range(0.3..0.36);
            Primitive {
                shape: Shape::Sphere,
                pose: RigidTransform::from_translation(Vector3::new(x, -0.5 + r, z) + jitter),
                size: [r, r, r],
                texture,
                emission: emissions[i],
            }
        } else {
            let h = [rng.random_range(0.18..0.26), rng.random_range(0.25..0.4), rng.random_range(0.18..0.26)];
            Primitive {
                shape: Shape::Box,
                pose: RigidTransform::new(
                    yaw(rng.random_range(-0.6..0.6)),
                    Vector3::new(x, -0.5 + h[1], z) + jitter,
                ),
                size: h,
                texture,
                emission: emissions[i],
            }
        };
        primitives.push(prim);
    }
    SceneSpec {
        name: "textured-shapes".into(),
        primitives,
        background: [[0.0; 3]; SENSOR_COUNT],
        scene_radius: 2.1,
    }
}

/// A low box standing in front of a taller one. Both share one B emission,
/// so the occlusion edge between them exists in depth and in sensor A only.
fn shared_boundary_subset(rng: &mut ChaCha8Rng) -> SceneSpec {
    let floor_texture = Texture {
        pattern: Pattern::Checker,
        base: random_color(rng, 0.05, 0.25),
        accent: random_color(rng, 0.6, 0.8),
        frequency: 3.0,
    };
    let emission = rng.random_range(0.75..0.9);
    let back = Primitive {
        shape: Shape::Box,
        pose: RigidTransform::new(yaw(rng.random_range(-0.1..0.1)), Vector3::new(0.0, 0.05, -0.45)),
        size: [0.6, 0.55, 0.2],
        texture: Texture {
            pattern: Pattern::Stripes,
            base: [0.05, 0.1, 0.45],
            accent: [0.3, 0.6, 0.95],
            frequency: 4.0,
        },
        emission,
    };
    let front = Primitive {
        shape: Shape::Box,
        pose: RigidTransform::new(yaw(rng.random_range(-0.1..0.1)), Vector3::new(0.0, -0.25, 0.3)),
        size: [0.5, 0.25, 0.25],
        texture: Texture {
            pattern: Pattern::Checker,
            base: [0.9, 0.55, 0.1],
            accent: [1.0, 0.95, 0.6],
            frequency: 5.0,
        },
        emission,
    };
    SceneSpec {
        name: "shared-boundary-subset".into(),
        primitives: vec![floor(floor_texture, 0.3), back, front],
        background: [[0.0; 3]; SENSOR_COUNT],
        scene_radius: 2.1,
    }
}

/// Oracle frame: appearance, camera-axis depth, and hit primitive per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleFrame {
    pub image: Image,
    pub depth: Image,
    pub hits: Vec<Option<usize>>,
}

/// Exact ray-traced rendering of `spec` seen by `sensor` from `pose`.
/// Pixels that hit nothing get the sensor background and depth `far`.
pub fn oracle_render(
    spec: &SceneSpec,
    pose: &RigidTransform,
    k: &Intrinsics,
    sensor: SensorChannel,
    far: f64,
) -> Result<OracleFrame> {
    k.validate()?;
    let eye = pose.center();
    if let Some(i) = spec.primitives.iter().position(|p| p.contains(&eye)) {
        return Err(Error::CameraInsidePrimitive {
            primitive: i,
            position: [eye.x, eye.y, eye.z],
        });
    }
    let mut image = Image::new(k.width, k.height, 3);
    let mut depth = Image::new(k.width, k.height, 1);
    let mut hits = Vec::with_capacity(k.pixel_count());
    for row in 0..k.height {
        for col in 0..k.width {
            let (x, y) = Intrinsics::pixel_center(col, row);
            let cam = k.camera_direction(x, y);
            let dir = pose.transform_vector(&cam);
            let p = row * k.width + col;
            match spec.trace(&eye, &dir) {
                Some((i, t)) => {
                    let hit = eye + dir * t;
                    image.pixel_mut(col, row).copy_from_slice(&spec.primitives[i].appearance(sensor, &hit));
                    depth.data[p] = t * -cam.z;
                    hits.push(Some(i));
                }
                None => {
                    image.pixel_mut(col, row).copy_from_slice(&spec.background[sensor.index()]);
                    depth.data[p] = far;
                    hits.push(None);
                }
            }
        }
    }
    Ok(OracleFrame { image, depth, hits })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseNoise {
    /// Mean rotation perturbation, degrees.
    pub rotation_deg: f64,
    /// Mean translation perturbation as a fraction of the scene radius.
    pub translation_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetOptions {
    pub views: [usize; SENSOR_COUNT],
    pub pose_noise: PoseNoise,
    pub width: usize,
    pub height: usize,
    pub fov_deg: f64,
    pub camera_distance: f64,
    /// Half-width of the azimuth arc the cameras are drawn from, degrees.
    pub arc_deg: f64,
    pub elevation_deg: (f64, f64),
    /// Exclude a corner rectangle from every sensor-B image.
    pub logo_mask: bool,
}

impl Default for DatasetOptions {
    fn default() -> Self {
        Self {
            views: [16, 16],
            pose_noise: PoseNoise {
                rotation_deg: 5.0,
                translation_fraction: 0.02,
            },
            width: 64,
            height: 64,
            fov_deg: 50.0,
            camera_distance: 3.6,
            arc_deg: 180.0,
            elevation_deg: (15.0, 40.0),
            logo_mask: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub dataset: MultiSensorDataset,
    pub scene: SceneSpec,
    pub seed: u64,
    pub perturbations: [Vec<Perturbation>; SENSOR_COUNT],
}

fn random_unit(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}

/// Rectangle in the bottom-right corner, about a sixth of the width.
pub fn logo_rectangle(width: usize, height: usize) -> Mask {
    let w = (width / 6).max(1);
    let h = (height / 10).max(1);
    Mask::rectangle(width, height, width - w - 1..width - 1, height - h - 1..height - 1)
}

/// Renders a dataset with independently drawn camera sets per sensor and
/// perturbed initial poses.
pub fn make_dataset(spec: &SceneSpec, opts: &DatasetOptions, seed: u64) -> Result<SyntheticDataset> {
    if opts.views.iter().any(|v| *v < 2) {
        return Err(Error::invalid("each sensor needs at least two views"));
    }
    spec.validate()?;
    let k = Intrinsics::from_fov(opts.width, opts.height, opts.fov_deg)?;
    let near = (opts.camera_distance - spec.scene_radius).max(0.05);
    let far = opts.camera_distance + spec.scene_radius;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sets = Vec::with_capacity(SENSOR_COUNT);
    let mut perturbations: [Vec<Perturbation>; SENSOR_COUNT] = Default::default();
    for sensor in SensorChannel::ALL {
        let n = opts.views[sensor.index()];
        let mut images = Vec::with_capacity(n);
        for i in 0..n {
            // stratify azimuth so views cover the arc
            let u = (i as f64 + rng.random_range(0.1..0.9)) / n as f64;
            let azimuth = (2.0 * u - 1.0) * opts.arc_deg.to_radians();
            let elevation = rng
                .random_range(opts.elevation_deg.0..=opts.elevation_deg.1)
                .to_radians();
            let eye = Vector3::new(
                azimuth.sin() * elevation.cos(),
                elevation.sin(),
                azimuth.cos() * elevation.cos(),
            ) * opts.camera_distance;
            let target = Vector3::new(
                rng.random_range(-0.1..0.1),
                rng.random_range(-0.25..-0.05),
                rng.random_range(-0.1..0.1),
            );
            let truth = RigidTransform::look_at(eye, target, Vector3::y())?;

            let angle = opts.pose_noise.rotation_deg * rng.random_range(0.5..1.5);
            let shift = opts.pose_noise.translation_fraction
                * spec.scene_radius
                * rng.random_range(0.5..1.5);
            let delta = RigidTransform::new(
                axis_angle(&random_unit(&mut rng), angle.to_radians()),
                random_unit(&mut rng) * shift,
            );
            let initial = truth.compose(&delta);
            perturbations[sensor.index()].push(Perturbation {
                rotation_deg: angle,
                translation: shift,
            });

            let frame = oracle_render(spec, &truth, &k, sensor, far)?;
            let mask = (opts.logo_mask && sensor == SensorChannel::B)
                .then(|| logo_rectangle(k.width, k.height));
            images.push(SensorImage {
                name: format!("{}_{i:03}", sensor.tag()),
                color: frame.image,
                initial_pose: initial,
                mask,
                truth_pose: Some(truth),
                truth_depth: Some(frame.depth),
            });
        }
        sets.push(SensorSet {
            intrinsics: k,
            images,
        });
    }
    let [a, b]: [SensorSet; 2] = sets.try_into().expect("two sensors");
    Ok(SyntheticDataset {
        dataset: MultiSensorDataset {
            sensors: [a, b],
            near,
            far,
            background: spec.background.map(|c| c.to_vec()),
        },
        scene: spec.clone(),
        seed,
        perturbations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn presets_are_deterministic() {
        for kind in PRESETS {
            assert_eq!(generate_scene(kind, 3).unwrap(), generate_scene(kind, 3).unwrap());
        }
        assert_ne!(
            generate_scene("textured-shapes", 1).unwrap(),
            generate_scene("textured-shapes", 2).unwrap()
        );
        assert!(matches!(generate_scene("teapot", 0), Err(Error::UnknownPreset(_))));
    }

    #[test]
    fn textured_shapes_primitive_count() {
        for seed in 0..20 {
            let n = generate_scene("textured-shapes", seed).unwrap().primitives.len();
            assert!((3..=4).contains(&n));
        }
    }

    #[test]
    fn shared_boundary_has_equal_emission_pair() {
        let s = generate_scene("shared-boundary-subset", 4).unwrap();
        let found = s.primitives.iter().enumerate().any(|(i, a)| {
            s.primitives[i + 1..]
                .iter()
                .any(|b| a.emission == b.emission && a.texture != b.texture)
        });
        assert!(found);
    }

    #[test]
    fn appearance_bounded_for_many_seeds() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for seed in 0..100 {
            for kind in PRESETS {
                let s = generate_scene(kind, seed).unwrap();
                for p in &s.primitives {
                    for _ in 0..20 {
                        let x = Vector3::new(
                            rng.random_range(-2.0..2.0),
                            rng.random_range(-2.0..2.0),
                            rng.random_range(-2.0..2.0),
                        );
                        for sensor in SensorChannel::ALL {
                            assert!(p.appearance(sensor, &x).iter().all(|v| (0.0..=1.0).contains(v)));
                        }
                    }
                }
            }
        }
    }

    fn single(shape: Shape, pose: RigidTransform, size: [f64; 3]) -> SceneSpec {
        SceneSpec {
            name: "test".into(),
            primitives: vec![Primitive {
                shape,
                pose,
                size,
                texture: Texture {
                    pattern: Pattern::Checker,
                    base: [0.2; 3],
                    accent: [0.8; 3],
                    frequency: 2.0,
                },
                emission: 0.5,
            }],
            background: [[0.0; 3], [0.1; 3]],
            scene_radius: 10.0,
        }
    }

    #[test]
    fn sphere_center_depth() {
        let spec = single(Shape::Sphere, RigidTransform::identity(), [0.7; 3]);
        let k = Intrinsics::new(30.0, 30.0, 16.5, 16.5, 33, 33).unwrap();
        let pose = RigidTransform::from_translation(Vector3::new(0.0, 0.0, 4.0));
        let f = oracle_render(&spec, &pose, &k, SensorChannel::A, 10.0).unwrap();
        assert_abs_diff_eq!(f.depth.data[16 * 33 + 16], 4.0 - 0.7, epsilon = 1e-12);
        assert_eq!(f.depth.data[0], 10.0);
        assert_eq!(f.image.pixel(0, 0), &[0.0; 3]);
        let fb = oracle_render(&spec, &pose, &k, SensorChannel::B, 10.0).unwrap();
        assert_eq!(fb.image.pixel(0, 0), &[0.1; 3]);
        assert_eq!(fb.depth, f.depth);
    }

    /// Fine ray marcher with bisection refinement over `contains`/planes.
    fn march(spec: &SceneSpec, origin: &Vector3<f64>, dir: &Vector3<f64>, far: f64) -> Option<f64> {
        let step = 1e-3;
        let mut t = step;
        let mut prev_inside = spec.primitives.iter().any(|p| p.contains(origin));
        while t < far {
            let inside = spec.primitives.iter().any(|p| p.contains(&(origin + dir * t)));
            if inside != prev_inside {
                let (mut lo, mut hi) = (t - step, t);
                for _ in 0..60 {
                    let mid = 0.5 * (lo + hi);
                    let m_inside = spec.primitives.iter().any(|p| p.contains(&(origin + dir * mid)));
                    if m_inside == prev_inside {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                return Some(0.5 * (lo + hi));
            }
            prev_inside = inside;
            t += step;
        }
        None
    }

    #[test]
    fn fronto_parallel_box_face_depth() {
        // front face at z = -3
        let spec = single(
            Shape::Box,
            RigidTransform::from_translation(Vector3::new(0.0, 0.0, -3.5)),
            [0.8, 0.6, 0.5],
        );
        let k = Intrinsics::from_fov(24, 20, 50.0).unwrap();
        let f = oracle_render(&spec, &RigidTransform::identity(), &k, SensorChannel::A, 20.0).unwrap();
        let mut covered = 0;
        for row in 0..k.height {
            for col in 0..k.width {
                let p = row * k.width + col;
                let (x, y) = Intrinsics::pixel_center(col, row);
                let dir = k.camera_direction(x, y);
                let marched = march(&spec, &Vector3::zeros(), &dir, 20.0);
                match f.hits[p] {
                    Some(_) => {
                        covered += 1;
                        assert_abs_diff_eq!(f.depth.data[p], 3.0, epsilon = 1e-6);
                        let t = marched.expect("marcher finds the face");
                        assert_abs_diff_eq!(t * -dir.z, f.depth.data[p], epsilon = 1e-6);
                    }
                    None => assert!(marched.is_none()),
                }
            }
        }
        assert!(covered > 50);
    }

    #[test]
    fn camera_inside_primitive_rejected() {
        let spec = single(Shape::Sphere, RigidTransform::identity(), [1.0; 3]);
        let k = Intrinsics::from_fov(8, 8, 50.0).unwrap();
        let err = oracle_render(&spec, &RigidTransform::identity(), &k, SensorChannel::A, 5.0);
        assert!(matches!(err, Err(Error::CameraInsidePrimitive { primitive: 0, .. })));
    }

    #[test]
    fn zero_noise_keeps_truth_poses() {
        let spec = generate_scene("textured-shapes", 1).unwrap();
        let opts = DatasetOptions {
            views: [3, 2],
            pose_noise: PoseNoise {
                rotation_deg: 0.0,
                translation_fraction: 0.0,
            },
            width: 16,
            height: 12,
            ..DatasetOptions::default()
        };
        let ds = make_dataset(&spec, &opts, 5).unwrap();
        for s in SensorChannel::ALL {
            for img in &ds.dataset.sensor(s).images {
                let truth = img.truth_pose.unwrap();
                assert!((img.initial_pose.rotation - truth.rotation).amax() < 1e-15);
                assert!((img.initial_pose.translation - truth.translation).amax() < 1e-15);
            }
        }
    }

    #[test]
    fn dataset_sizes_and_determinism() {
        let spec = generate_scene("textured-shapes", 2).unwrap();
        let opts = DatasetOptions {
            views: [16, 16],
            width: 12,
            height: 10,
            logo_mask: true,
            ..DatasetOptions::default()
        };
        let a = make_dataset(&spec, &opts, 8).unwrap();
        let b = make_dataset(&spec, &opts, 8).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dataset.sensor(SensorChannel::A).images.len(), 16);
        assert_eq!(a.dataset.sensor(SensorChannel::B).images.len(), 16);
        assert!(a.dataset.sensor(SensorChannel::A).images[0].mask.is_none());
        assert!(a.dataset.sensor(SensorChannel::B).images[0].mask.is_some());
        // the two sensors' cameras are drawn independently
        let ca = a.dataset.sensor(SensorChannel::A).images[0].truth_pose.unwrap().center();
        let cb = a.dataset.sensor(SensorChannel::B).images[0].truth_pose.unwrap().center();
        assert!((ca - cb).norm() > 1e-6);
        a.dataset.validate().unwrap();
    }

    #[test]
    fn injected_noise_statistics() {
        let spec = generate_scene("textured-shapes", 2).unwrap();
        let opts = DatasetOptions {
            views: [500, 500],
            width: 2,
            height: 2,
            ..DatasetOptions::default()
        };
        let ds = make_dataset(&spec, &opts, 13).unwrap();
        let mut angles = Vec::new();
        for s in SensorChannel::ALL {
            for (img, log) in ds.dataset.sensor(s).images.iter().zip(&ds.perturbations[s.index()]) {
                let truth = img.truth_pose.unwrap();
                let rel = truth.inverse().compose(&img.initial_pose);
                let measured = crate::geometry::rotation_angle(&rel.rotation).to_degrees();
                assert_abs_diff_eq!(measured, log.rotation_deg, epsilon = 1e-9);
                assert_abs_diff_eq!(rel.translation.norm(), log.translation, epsilon = 1e-12);
                angles.push(measured);
            }
        }
        let mean = angles.iter().sum::<f64>() / angles.len() as f64;
        assert!((mean - 5.0).abs() < 0.05 * 5.0, "mean {mean}");
    }

    #[test]
    fn depth_is_sensor_independent_and_pairs_register() {
        let spec = generate_scene("shared-boundary-subset", 0).unwrap();
        let k = Intrinsics::from_fov(32, 32, 50.0).unwrap();
        let pose = RigidTransform::look_at(
            Vector3::new(0.5, 1.5, 3.2),
            Vector3::new(0.0, -0.2, 0.0),
            Vector3::y(),
        )
        .unwrap();
        let a = oracle_render(&spec, &pose, &k, SensorChannel::A, 6.0).unwrap();
        let b = oracle_render(&spec, &pose, &k, SensorChannel::B, 6.0).unwrap();
        assert_eq!(a.depth, b.depth);
        assert_eq!(a.hits, b.hits);
    }
}
