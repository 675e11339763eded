//! Differentiable volume rendering.
//!
//! A ray is sampled at `N` depths, every sample is pushed through the field,
//! and the samples are composited front to back:
//!
//! ```text
//! delta_i = t_{i+1} - t_i            (last: far - t_N)
//! a_i     = 1 - exp(-sigma_i delta_i)
//! T_i     = prod_{j<i} (1 - a_j)
//! w_i     = T_i a_i
//! color   = sum w_i c_i + (1 - sum w_i) background
//! depth   = sum w_i t_i + (1 - sum w_i) far
//! ```
//!
//! Ray depths are distances along the unit ray direction. Depth *maps*
//! returned by [`render_image`] and [`render_pair`] are converted to
//! camera-axis depth so they compare directly with the oracle renderer.

use ndarray::{Array1, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoding::{Alpha, BandGate, EncodingConfig};
use crate::error::{Error, Result};
use crate::field::{FieldForward, FieldParams, SensorChannel, SENSOR_COUNT};
use crate::geometry::{pixel_to_ray, Intrinsics, Ray, RigidTransform};
use crate::raster::Image;

use nalgebra::Vector3;

/// Rays per field evaluation when rendering whole images.
const IMAGE_CHUNK: usize = 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingConfig {
    pub samples_per_ray: usize,
    pub stratified: bool,
    pub near: f64,
    pub far: f64,
    /// Color of fully transparent rays, per sensor.
    pub background: [Vec<f64>; SENSOR_COUNT],
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            samples_per_ray: 128,
            stratified: true,
            near: 2.0,
            far: 6.0,
            background: [vec![0.0; 3], vec![0.0; 3]],
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples_per_ray < 2 {
            return Err(Error::invalid("samples_per_ray must be >= 2"));
        }
        if !(self.near > 0.0 && self.near < self.far) {
            return Err(Error::invalid("need 0 < near < far"));
        }
        Ok(())
    }

    pub fn background(&self, sensor: SensorChannel) -> &[f64] {
        &self.background[sensor.index()]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderResult {
    pub color: Vec<f64>,
    pub depth: f64,
    pub opacity: f64,
}

/// `samples` increasing depths in `[near, far]`: bin midpoints, or one
/// uniform draw per bin when `stratified`.
pub fn sample_depths<R: Rng + ?Sized>(
    ray: &Ray,
    samples: usize,
    stratified: bool,
    rng: &mut R,
) -> Vec<f64> {
    let width = (ray.far - ray.near) / samples as f64;
    (0..samples)
        .map(|i| {
            let offset = if stratified { rng.random::<f64>() } else { 0.5 };
            ray.near + (i as f64 + offset) * width
        })
        .collect()
}

/// Forward compositing state kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Compositing {
    pub result: RenderResult,
    pub weights: Vec<f64>,
    /// `T_0 ..= T_N`; the last entry is the residual transmittance.
    pub transmittance: Vec<f64>,
    pub deltas: Vec<f64>,
}

/// Upstream gradients of a [`RenderResult`].
#[derive(Debug, Clone, PartialEq)]
pub struct CompositeUpstream {
    pub color: Vec<f64>,
    pub depth: f64,
    pub opacity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompositeGradients {
    pub sigmas: Vec<f64>,
    /// `N × C`, row-major.
    pub colors: Vec<f64>,
    pub depths: Vec<f64>,
}

fn check_composite_inputs(
    sigmas: &[f64],
    colors: &[f64],
    depths: &[f64],
    channels: usize,
) -> Result<()> {
    let n = sigmas.len();
    if depths.len() != n {
        return Err(Error::DimensionMismatch {
            context: "composite depths",
            expected: n,
            actual: depths.len(),
        });
    }
    if colors.len() != n * channels {
        return Err(Error::DimensionMismatch {
            context: "composite colors",
            expected: n * channels,
            actual: colors.len(),
        });
    }
    if let Some(s) = sigmas.iter().find(|s| !(**s >= 0.0)) {
        return Err(Error::invalid(format!("density must be non-negative, got {s}")));
    }
    Ok(())
}

/// Composites `N` samples (`colors` is `N × background.len()`, row-major).
pub fn composite_detailed(
    sigmas: &[f64],
    colors: &[f64],
    depths: &[f64],
    far: f64,
    background: &[f64],
) -> Result<Compositing> {
    let channels = background.len();
    check_composite_inputs(sigmas, colors, depths, channels)?;
    let n = sigmas.len();
    let mut deltas = Vec::with_capacity(n);
    for i in 0..n {
        let next = if i + 1 < n { depths[i + 1] } else { far };
        deltas.push(next - depths[i]);
    }
    let mut weights = Vec::with_capacity(n);
    let mut transmittance = Vec::with_capacity(n + 1);
    let mut t = 1.0;
    transmittance.push(t);
    let mut color = vec![0.0; channels];
    let mut depth = 0.0;
    let mut opacity = 0.0;
    for i in 0..n {
        let survive = (-sigmas[i] * deltas[i]).exp();
        let w = t * (1.0 - survive);
        weights.push(w);
        for (c, v) in color.iter_mut().zip(&colors[i * channels..(i + 1) * channels]) {
            *c += w * v;
        }
        depth += w * depths[i];
        opacity += w;
        t *= survive;
        transmittance.push(t);
    }
    let residual = 1.0 - opacity;
    for (c, b) in color.iter_mut().zip(background) {
        *c += residual * b;
    }
    depth += residual * far;
    Ok(Compositing {
        result: RenderResult {
            color,
            depth,
            opacity,
        },
        weights,
        transmittance,
        deltas,
    })
}

pub fn composite(
    sigmas: &[f64],
    colors: &[f64],
    depths: &[f64],
    far: f64,
    background: &[f64],
) -> Result<RenderResult> {
    Ok(composite_detailed(sigmas, colors, depths, far, background)?.result)
}

impl Compositing {
    /// Reverse-mode derivative of [`composite`] given its forward inputs.
    pub fn backward(
        &self,
        sigmas: &[f64],
        colors: &[f64],
        depths: &[f64],
        far: f64,
        background: &[f64],
        upstream: &CompositeUpstream,
    ) -> Result<CompositeGradients> {
        let channels = background.len();
        let n = self.weights.len();
        check_composite_inputs(sigmas, colors, depths, channels)?;
        if sigmas.len() != n || upstream.color.len() != channels {
            return Err(Error::DimensionMismatch {
                context: "composite backward",
                expected: n,
                actual: sigmas.len(),
            });
        }
        let mut d_colors = vec![0.0; n * channels];
        // dL/dw_i
        let mut d_weights = vec![0.0; n];
        for i in 0..n {
            let c = &colors[i * channels..(i + 1) * channels];
            let mut e = upstream.opacity + upstream.depth * (depths[i] - far);
            for k in 0..channels {
                e += upstream.color[k] * (c[k] - background[k]);
                d_colors[i * channels + k] = self.weights[i] * upstream.color[k];
            }
            d_weights[i] = e;
        }
        // dL/d(sigma_i delta_i) = e_i T_{i+1} - sum_{k>i} e_k w_k
        let mut d_optical = vec![0.0; n];
        let mut tail = 0.0;
        for i in (0..n).rev() {
            d_optical[i] = d_weights[i] * self.transmittance[i + 1] - tail;
            tail += d_weights[i] * self.weights[i];
        }
        let d_sigmas: Vec<f64> = (0..n).map(|i| d_optical[i] * self.deltas[i]).collect();
        let d_deltas: Vec<f64> = (0..n).map(|i| d_optical[i] * sigmas[i]).collect();
        let mut d_depths = vec![0.0; n];
        for i in 0..n {
            d_depths[i] += self.weights[i] * upstream.depth - d_deltas[i];
            if i > 0 {
                d_depths[i] += d_deltas[i - 1];
            }
        }
        Ok(CompositeGradients {
            sigmas: d_sigmas,
            colors: d_colors,
            depths: d_depths,
        })
    }
}

/// Everything needed to run the backward pass of a rendered ray batch.
pub struct RayBatch {
    pub rays: Vec<Ray>,
    pub samples: usize,
    /// `rays × samples` depths, row-major.
    pub depths: Vec<f64>,
    pub composites: Vec<Compositing>,
    field: FieldForward,
    position_gate: BandGate,
    direction_gate: BandGate,
    points: Vec<[f64; 3]>,
    sensor: SensorChannel,
}

/// Gradient of a ray batch loss with respect to each ray's origin and unit
/// direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayGradient {
    pub origin: Vector3<f64>,
    pub direction: Vector3<f64>,
}

fn encode_rays(
    rays: &[Ray],
    depths: &[f64],
    samples: usize,
    position_gate: &BandGate,
    direction_gate: &BandGate,
) -> (Vec<[f64; 3]>, Array2<f64>, Array2<f64>) {
    let rows = rays.len() * samples;
    let pos_dim = position_gate.output_dim(3);
    let dir_dim = direction_gate.output_dim(3);
    let mut points = Vec::with_capacity(rows);
    let mut enc_pos = Array2::zeros((rows, pos_dim));
    let mut enc_dir = Array2::zeros((rows, dir_dim));
    let mut dir_buf = vec![0.0; dir_dim];
    for (r, ray) in rays.iter().enumerate() {
        let d = [ray.direction.x, ray.direction.y, ray.direction.z];
        direction_gate.encode_into(&d, &mut dir_buf);
        for s in 0..samples {
            let row = r * samples + s;
            let p = ray.at(depths[row]);
            let p = [p.x, p.y, p.z];
            position_gate.encode_into(
                &p,
                enc_pos.row_mut(row).as_slice_mut().expect("contiguous row"),
            );
            enc_dir
                .row_mut(row)
                .as_slice_mut()
                .expect("contiguous row")
                .copy_from_slice(&dir_buf);
            points.push(p);
        }
    }
    (points, enc_pos, enc_dir)
}

/// Renders a batch of rays for one sensor, keeping what the backward pass
/// needs. Sample depths are drawn from `rng` ray by ray.
pub fn render_rays<R: Rng + ?Sized>(
    params: &FieldParams,
    rays: &[Ray],
    sensor: SensorChannel,
    encoding: &EncodingConfig,
    alpha: Alpha,
    cfg: &SamplingConfig,
    rng: &mut R,
) -> Result<RayBatch> {
    cfg.validate()?;
    let mut depths = Vec::with_capacity(rays.len() * cfg.samples_per_ray);
    for ray in rays {
        depths.extend(sample_depths(ray, cfg.samples_per_ray, cfg.stratified, rng));
    }
    render_rays_at_depths(params, rays, depths, sensor, encoding, alpha, cfg)
}

/// As [`render_rays`] with sample depths supplied by the caller
/// (`rays × samples_per_ray`, row-major).
pub fn render_rays_at_depths(
    params: &FieldParams,
    rays: &[Ray],
    depths: Vec<f64>,
    sensor: SensorChannel,
    encoding: &EncodingConfig,
    alpha: Alpha,
    cfg: &SamplingConfig,
) -> Result<RayBatch> {
    cfg.validate()?;
    let background = cfg.background(sensor);
    if background.len() != params.config.channels_per_sensor {
        return Err(Error::DimensionMismatch {
            context: "background channels",
            expected: params.config.channels_per_sensor,
            actual: background.len(),
        });
    }
    let samples = cfg.samples_per_ray;
    if depths.len() != rays.len() * samples {
        return Err(Error::DimensionMismatch {
            context: "sample depths",
            expected: rays.len() * samples,
            actual: depths.len(),
        });
    }
    let position_gate = BandGate::new(encoding.position_bands, encoding.include_raw, alpha);
    let direction_gate = BandGate::new(encoding.direction_bands, encoding.include_raw, alpha);
    let (points, enc_pos, enc_dir) =
        encode_rays(rays, &depths, samples, &position_gate, &direction_gate);
    let field = params.forward(enc_pos.view(), enc_dir.view(), sensor)?;
    let channels = params.config.channels_per_sensor;
    let mut composites = Vec::with_capacity(rays.len());
    for (r, ray) in rays.iter().enumerate() {
        let rows = r * samples..(r + 1) * samples;
        let sig = field.sigma.slice(ndarray::s![rows.clone()]);
        let col = field.color.slice(ndarray::s![rows.clone(), ..]);
        composites.push(composite_detailed(
            sig.as_slice().expect("contiguous"),
            col.as_slice().expect("contiguous"),
            &depths[rows],
            ray.far,
            background,
        )?);
        debug_assert_eq!(col.ncols(), channels);
    }
    Ok(RayBatch {
        rays: rays.to_vec(),
        samples,
        depths,
        composites,
        field,
        position_gate,
        direction_gate,
        points,
        sensor,
    })
}

impl RayBatch {
    pub fn result(&self, ray: usize) -> &RenderResult {
        &self.composites[ray].result
    }

    pub fn len(&self) -> usize {
        self.rays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rays.is_empty()
    }

    /// Backpropagates per-ray color gradients (`rays × C`, row-major) into
    /// the field parameters (accumulated into `grad`) and returns the
    /// gradient for each ray's origin and direction.
    pub fn backward(
        &self,
        params: &FieldParams,
        d_color: &[f64],
        background: &[f64],
        grad: &mut FieldParams,
    ) -> Result<Vec<RayGradient>> {
        let channels = params.config.channels_per_sensor;
        if d_color.len() != self.rays.len() * channels {
            return Err(Error::DimensionMismatch {
                context: "ray color gradients",
                expected: self.rays.len() * channels,
                actual: d_color.len(),
            });
        }
        let samples = self.samples;
        let rows = self.rays.len() * samples;
        let mut d_sigma = Array1::zeros(rows);
        let mut d_field_color = Array2::zeros((rows, channels));
        for (r, ray) in self.rays.iter().enumerate() {
            let range = r * samples..(r + 1) * samples;
            let upstream = CompositeUpstream {
                color: d_color[r * channels..(r + 1) * channels].to_vec(),
                depth: 0.0,
                opacity: 0.0,
            };
            let sig = self.field.sigma.slice(ndarray::s![range.clone()]);
            let col = self.field.color.slice(ndarray::s![range.clone(), ..]);
            let g = self.composites[r].backward(
                sig.as_slice().expect("contiguous"),
                col.as_slice().expect("contiguous"),
                &self.depths[range.clone()],
                ray.far,
                background,
                &upstream,
            )?;
            for (i, row) in range.enumerate() {
                d_sigma[row] = g.sigmas[i];
                for k in 0..channels {
                    d_field_color[(row, k)] = g.colors[i * channels + k];
                }
            }
        }
        let (d_pos, d_dir) = self.field.backward(params, &d_sigma, &d_field_color, grad)?;
        Ok(self.ray_gradients(&d_pos.view(), &d_dir.view()))
    }

    fn ray_gradients(&self, d_pos: &ArrayView2<f64>, d_dir: &ArrayView2<f64>) -> Vec<RayGradient> {
        let samples = self.samples;
        let dir_dim = d_dir.ncols();
        let mut summed_dir = vec![0.0; dir_dim];
        self.rays
            .iter()
            .enumerate()
            .map(|(r, ray)| {
                let mut origin = Vector3::zeros();
                let mut direction = Vector3::zeros();
                summed_dir.iter_mut().for_each(|v| *v = 0.0);
                for s in 0..samples {
                    let row = r * samples + s;
                    let mut gp = [0.0; 3];
                    self.position_gate.accumulate_backward(
                        &self.points[row],
                        d_pos.row(row).as_slice().expect("contiguous"),
                        &mut gp,
                    );
                    let gp = Vector3::from(gp);
                    origin += gp;
                    direction += gp * self.depths[row];
                    for (acc, v) in summed_dir.iter_mut().zip(d_dir.row(row)) {
                        *acc += v;
                    }
                }
                let d = [ray.direction.x, ray.direction.y, ray.direction.z];
                let mut gd = [0.0; 3];
                self.direction_gate.accumulate_backward(&d, &summed_dir, &mut gd);
                direction += Vector3::from(gd);
                RayGradient { origin, direction }
            })
            .collect()
    }

    pub fn sensor(&self) -> SensorChannel {
        self.sensor
    }
}

/// Renders one ray with the given sensor head.
pub fn render_ray<R: Rng + ?Sized>(
    params: &FieldParams,
    ray: &Ray,
    sensor: SensorChannel,
    encoding: &EncodingConfig,
    alpha: Alpha,
    cfg: &SamplingConfig,
    rng: &mut R,
) -> Result<RenderResult> {
    let batch = render_rays(
        params,
        std::slice::from_ref(ray),
        sensor,
        encoding,
        alpha,
        cfg,
        rng,
    )?;
    Ok(batch.composites.into_iter().next().expect("one ray").result)
}

/// Per-pixel generator: stream `pixel` of the ChaCha generator seeded with
/// `seed`, so results do not depend on traversal order.
pub fn pixel_rng(seed: u64, pixel: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(pixel as u64);
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedImage {
    pub color: Image,
    /// Camera-axis depth.
    pub depth: Image,
    pub opacity: Image,
}

struct PixelRays {
    rays: Vec<Ray>,
    /// `-z` component of each unit camera-frame direction.
    axis_cos: Vec<f64>,
}

fn image_rays(
    k: &Intrinsics,
    pose: &RigidTransform,
    cfg: &SamplingConfig,
    pixels: std::ops::Range<usize>,
) -> Result<PixelRays> {
    let mut rays = Vec::with_capacity(pixels.len());
    let mut axis_cos = Vec::with_capacity(pixels.len());
    for p in pixels {
        let (col, row) = (p % k.width, p / k.width);
        let (x, y) = Intrinsics::pixel_center(col, row);
        rays.push(pixel_to_ray(k, pose, (x, y), cfg.near, cfg.far)?);
        axis_cos.push(-k.camera_direction(x, y).z);
    }
    Ok(PixelRays { rays, axis_cos })
}

fn sample_pixel_depths(rays: &[Ray], first_pixel: usize, cfg: &SamplingConfig, seed: u64) -> Vec<f64> {
    let mut depths = Vec::with_capacity(rays.len() * cfg.samples_per_ray);
    for (i, ray) in rays.iter().enumerate() {
        let mut rng = pixel_rng(seed, first_pixel + i);
        depths.extend(sample_depths(ray, cfg.samples_per_ray, cfg.stratified, &mut rng));
    }
    depths
}

/// Renders a full image row by row with per-pixel generator streams.
#[allow(clippy::too_many_arguments)]
pub fn render_image(
    params: &FieldParams,
    pose: &RigidTransform,
    k: &Intrinsics,
    sensor: SensorChannel,
    encoding: &EncodingConfig,
    alpha: Alpha,
    cfg: &SamplingConfig,
    seed: u64,
) -> Result<RenderedImage> {
    cfg.validate()?;
    k.validate()?;
    let channels = params.config.channels_per_sensor;
    let mut color = Image::new(k.width, k.height, channels);
    let mut depth = Image::new(k.width, k.height, 1);
    let mut opacity = Image::new(k.width, k.height, 1);
    let total = k.pixel_count();
    let mut start = 0;
    while start < total {
        let end = (start + IMAGE_CHUNK).min(total);
        let chunk = image_rays(k, pose, cfg, start..end)?;
        let depths = sample_pixel_depths(&chunk.rays, start, cfg, seed);
        let batch =
            render_rays_at_depths(params, &chunk.rays, depths, sensor, encoding, alpha, cfg)?;
        for (i, c) in batch.composites.iter().enumerate() {
            let p = start + i;
            color.data[p * channels..(p + 1) * channels].copy_from_slice(&c.result.color);
            depth.data[p] = c.result.depth * chunk.axis_cos[i];
            opacity.data[p] = c.result.opacity;
        }
        start = end;
    }
    Ok(RenderedImage {
        color,
        depth,
        opacity,
    })
}

/// Renders both sensor images and the shared depth map at one pose from a
/// single set of density queries.
pub fn render_pair(
    params: &FieldParams,
    pose: &RigidTransform,
    k: &Intrinsics,
    encoding: &EncodingConfig,
    alpha: Alpha,
    cfg: &SamplingConfig,
    seed: u64,
) -> Result<(Image, Image, Image)> {
    cfg.validate()?;
    k.validate()?;
    let channels = params.config.channels_per_sensor;
    for s in SensorChannel::ALL {
        if cfg.background(s).len() != channels {
            return Err(Error::DimensionMismatch {
                context: "background channels",
                expected: channels,
                actual: cfg.background(s).len(),
            });
        }
    }
    let mut images = [
        Image::new(k.width, k.height, channels),
        Image::new(k.width, k.height, channels),
    ];
    let mut depth = Image::new(k.width, k.height, 1);
    let samples = cfg.samples_per_ray;
    let position_gate = BandGate::new(encoding.position_bands, encoding.include_raw, alpha);
    let direction_gate = BandGate::new(encoding.direction_bands, encoding.include_raw, alpha);
    let total = k.pixel_count();
    let mut start = 0;
    while start < total {
        let end = (start + IMAGE_CHUNK).min(total);
        let chunk = image_rays(k, pose, cfg, start..end)?;
        let depths = sample_pixel_depths(&chunk.rays, start, cfg, seed);
        let (_, enc_pos, enc_dir) =
            encode_rays(&chunk.rays, &depths, samples, &position_gate, &direction_gate);
        let (sigma, colors) = params.forward_pair(enc_pos.view(), enc_dir.view())?;
        for (i, ray) in chunk.rays.iter().enumerate() {
            let rows = i * samples..(i + 1) * samples;
            let sig = sigma.slice(ndarray::s![rows.clone()]);
            let sig = sig.as_slice().expect("contiguous");
            let p = start + i;
            for s in SensorChannel::ALL {
                let col = colors[s.index()].slice(ndarray::s![rows.clone(), ..]);
                let c = composite(
                    sig,
                    col.as_slice().expect("contiguous"),
                    &depths[rows.clone()],
                    ray.far,
                    cfg.background(s),
                )?;
                images[s.index()].data[p * channels..(p + 1) * channels]
                    .copy_from_slice(&c.color);
                if s == SensorChannel::A {
                    depth.data[p] = c.depth * chunk.axis_cos[i];
                }
            }
        }
        start = end;
    }
    let [a, b] = images;
    Ok((a, b, depth))
}
