//! The branched radiance field: a shared trunk feeding one density head and
//! one color head per sensor channel.
//!
//! Density is a function of the encoded position only. The color head for a
//! sensor sees the trunk feature concatenated with the encoded view
//! direction. Forward evaluation is batched over rows; the backward pass is
//! written out by hand and touches only the selected sensor's head.

use std::fmt;

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoding::EncodingConfig;
use crate::error::{Error, Result};

pub const SENSOR_COUNT: usize = 2;

/// Which imager an image, head, or batch belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SensorChannel {
    /// Texture-rich, visible-like.
    A,
    /// Texture-poor, thermal-like.
    B,
}

impl SensorChannel {
    pub const ALL: [SensorChannel; SENSOR_COUNT] = [SensorChannel::A, SensorChannel::B];

    pub fn index(self) -> usize {
        match self {
            SensorChannel::A => 0,
            SensorChannel::B => 1,
        }
    }

    pub fn other(self) -> SensorChannel {
        match self {
            SensorChannel::A => SensorChannel::B,
            SensorChannel::B => SensorChannel::A,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            SensorChannel::A => "A",
            SensorChannel::B => "B",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "A" | "a" => Some(SensorChannel::A),
            "B" | "b" => Some(SensorChannel::B),
            _ => None,
        }
    }
}

impl fmt::Display for SensorChannel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FieldConfig {
    pub trunk_layers: usize,
    pub trunk_width: usize,
    /// Trunk layer whose input gets the encoded position re-concatenated.
    /// Ignored unless `0 < skip_layer < trunk_layers`.
    pub skip_layer: usize,
    /// Hidden layers per color head; an output layer is always appended.
    pub head_layers: usize,
    pub head_width: usize,
    pub channels_per_sensor: usize,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            trunk_layers: 8,
            trunk_width: 256,
            skip_layer: 4,
            head_layers: 2,
            head_width: 128,
            channels_per_sensor: 3,
        }
    }
}

impl FieldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trunk_layers == 0 || self.trunk_width == 0 {
            return Err(Error::invalid("trunk needs at least one layer of nonzero width"));
        }
        if self.trunk_layers < self.head_layers {
            return Err(Error::invalid("trunk_layers must be >= head_layers"));
        }
        if self.head_layers > 0 && self.head_width == 0 {
            return Err(Error::invalid("head_width must be nonzero"));
        }
        if self.channels_per_sensor == 0 {
            return Err(Error::invalid("channels_per_sensor must be nonzero"));
        }
        Ok(())
    }

    fn has_skip(&self, layer: usize) -> bool {
        self.skip_layer > 0 && self.skip_layer < self.trunk_layers && layer == self.skip_layer
    }
}

/// Fully connected layer, `y = x Wᵀ + b` with `W` stored `out × in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Array2::zeros((outputs, inputs)),
            bias: Array1::zeros(outputs),
        }
    }

    fn uniform(inputs: usize, outputs: usize, bound: f64, rng: &mut ChaCha8Rng) -> Self {
        let weight = Array2::from_shape_simple_fn((outputs, inputs), || {
            rng.random_range(-bound..=bound)
        });
        Self {
            weight,
            bias: Array1::zeros(outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.nrows()
    }

    fn forward(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        let mut z = x.dot(&self.weight.t());
        if !z.is_standard_layout() {
            z = z.as_standard_layout().into_owned();
        }
        z += &self.bias;
        z
    }

    /// Accumulates parameter gradients and returns the input gradient.
    fn backward(&self, x: &ArrayView2<f64>, dz: &Array2<f64>, grad: &mut Dense) -> Array2<f64> {
        grad.weight += &dz.t().dot(x);
        grad.bias += &dz.sum_axis(Axis(0));
        dz.dot(&self.weight)
    }

    pub fn is_finite(&self) -> bool {
        self.weight.iter().chain(self.bias.iter()).all(|v| v.is_finite())
    }
}

/// Trainable parameter groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ParamGroup {
    Trunk,
    DensityHead,
    ColorHead(SensorChannel),
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] = [
        ParamGroup::Trunk,
        ParamGroup::DensityHead,
        ParamGroup::ColorHead(SensorChannel::A),
        ParamGroup::ColorHead(SensorChannel::B),
    ];

    pub fn index(self) -> usize {
        match self {
            ParamGroup::Trunk => 0,
            ParamGroup::DensityHead => 1,
            ParamGroup::ColorHead(s) => 2 + s.index(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Trunk => "trunk",
            ParamGroup::DensityHead => "density",
            ParamGroup::ColorHead(SensorChannel::A) => "head_a",
            ParamGroup::ColorHead(SensorChannel::B) => "head_b",
        }
    }
}

/// Set of parameter groups updated by an optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TrainableSet {
    mask: [bool; 4],
}

impl TrainableSet {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn from_groups(groups: &[ParamGroup]) -> Self {
        let mut set = Self::empty();
        for g in groups {
            set.mask[g.index()] = true;
        }
        set
    }

    pub fn contains(&self, g: ParamGroup) -> bool {
        self.mask[g.index()]
    }

    pub fn remove(&mut self, g: ParamGroup) {
        self.mask[g.index()] = false;
    }

    pub fn groups(&self) -> Vec<ParamGroup> {
        ParamGroup::ALL.into_iter().filter(|g| self.contains(*g)).collect()
    }

    pub fn is_empty(&self) -> bool {
        !self.mask.iter().any(|m| *m)
    }
}

/// Trainable groups for a step in `mode`, minus anything in `frozen`.
pub fn select_trainable(mode: SensorChannel, frozen: &[ParamGroup]) -> TrainableSet {
    let mut set = TrainableSet::from_groups(&[
        ParamGroup::Trunk,
        ParamGroup::DensityHead,
        ParamGroup::ColorHead(mode),
    ]);
    for g in frozen {
        set.remove(*g);
    }
    set
}

/// All weights of the branched network. The same layout doubles as the
/// gradient accumulator and the Adam moment buffers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldParams {
    pub config: FieldConfig,
    pub position_dim: usize,
    pub direction_dim: usize,
    pub trunk: Vec<Dense>,
    pub density: Dense,
    pub heads: [Vec<Dense>; SENSOR_COUNT],
}

/// Output of one field query.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldOutput {
    pub sigma: f64,
    pub color: Vec<f64>,
}

const DENSITY_BIAS_INIT: f64 = -1.0;

fn layer_shapes(
    cfg: &FieldConfig,
    position_dim: usize,
    direction_dim: usize,
) -> (Vec<(usize, usize)>, Vec<(usize, usize)>) {
    let trunk = (0..cfg.trunk_layers)
        .map(|l| {
            let inputs = if l == 0 {
                position_dim
            } else if cfg.has_skip(l) {
                cfg.trunk_width + position_dim
            } else {
                cfg.trunk_width
            };
            (inputs, cfg.trunk_width)
        })
        .collect();
    let mut head = Vec::with_capacity(cfg.head_layers + 1);
    let mut inputs = cfg.trunk_width + direction_dim;
    for _ in 0..cfg.head_layers {
        head.push((inputs, cfg.head_width));
        inputs = cfg.head_width;
    }
    head.push((inputs, cfg.channels_per_sensor));
    (trunk, head)
}

/// Deterministic fan-in scaled uniform initialization. Hidden ReLU layers use
/// `±sqrt(6 / fan_in)`, output layers `±sqrt(1 / fan_in)`; biases start at
/// zero except the density bias.
pub fn init_params(cfg: &FieldConfig, encoding: &EncodingConfig, seed: u64) -> Result<FieldParams> {
    cfg.validate()?;
    encoding.validate()?;
    let position_dim = encoding.position_dim();
    let direction_dim = encoding.direction_dim();
    let (trunk_shapes, head_shapes) = layer_shapes(cfg, position_dim, direction_dim);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hidden = |i: usize| (6.0 / i as f64).sqrt();
    let output = |i: usize| (1.0 / i as f64).sqrt();

    let trunk = trunk_shapes
        .iter()
        .map(|&(i, o)| Dense::uniform(i, o, hidden(i), &mut rng))
        .collect();
    let mut density = Dense::uniform(cfg.trunk_width, 1, output(cfg.trunk_width), &mut rng);
    density.bias.fill(DENSITY_BIAS_INIT);
    let mut make_head = || -> Vec<Dense> {
        let last = head_shapes.len() - 1;
        head_shapes
            .iter()
            .enumerate()
            .map(|(l, &(i, o))| {
                let bound = if l == last { output(i) } else { hidden(i) };
                Dense::uniform(i, o, bound, &mut rng)
            })
            .collect()
    };
    let head_a = make_head();
    let head_b = make_head();
    Ok(FieldParams {
        config: *cfg,
        position_dim,
        direction_dim,
        trunk,
        density,
        heads: [head_a, head_b],
    })
}

fn relu_inplace(z: &mut Array2<f64>) {
    z.mapv_inplace(|v| v.max(0.0));
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Activations kept from a batched forward pass.
#[derive(Debug, Clone)]
pub struct FieldForward {
    pub sensor: SensorChannel,
    /// `n` densities.
    pub sigma: Array1<f64>,
    /// `n × channels` colors in `[0, 1]`.
    pub color: Array2<f64>,
    position: Array2<f64>,
    /// Input of every trunk layer (after skip concatenation).
    trunk_inputs: Vec<Array2<f64>>,
    /// Post-ReLU output of every trunk layer.
    trunk_outputs: Vec<Array2<f64>>,
    density_logit: Array1<f64>,
    head_inputs: Vec<Array2<f64>>,
    head_outputs: Vec<Array2<f64>>,
}

impl FieldParams {
    pub fn zeros_like(&self) -> FieldParams {
        let zero = |d: &Dense| Dense::zeros(d.inputs(), d.outputs());
        FieldParams {
            config: self.config,
            position_dim: self.position_dim,
            direction_dim: self.direction_dim,
            trunk: self.trunk.iter().map(zero).collect(),
            density: zero(&self.density),
            heads: [
                self.heads[0].iter().map(zero).collect(),
                self.heads[1].iter().map(zero).collect(),
            ],
        }
    }

    pub fn group(&self, g: ParamGroup) -> Vec<&Dense> {
        match g {
            ParamGroup::Trunk => self.trunk.iter().collect(),
            ParamGroup::DensityHead => vec![&self.density],
            ParamGroup::ColorHead(s) => self.heads[s.index()].iter().collect(),
        }
    }

    pub fn group_mut(&mut self, g: ParamGroup) -> Vec<&mut Dense> {
        match g {
            ParamGroup::Trunk => self.trunk.iter_mut().collect(),
            ParamGroup::DensityHead => vec![&mut self.density],
            ParamGroup::ColorHead(s) => self.heads[s.index()].iter_mut().collect(),
        }
    }

    /// Named tensors in a fixed order: `(group, name, shape, values)`.
    pub fn named_tensors(&self) -> Vec<(ParamGroup, String, Vec<usize>, Vec<f64>)> {
        let mut out = Vec::new();
        for g in ParamGroup::ALL {
            for (i, layer) in self.group(g).into_iter().enumerate() {
                let prefix = format!("{}.{i}", g.name());
                out.push((
                    g,
                    format!("{prefix}.weight"),
                    layer.weight.shape().to_vec(),
                    layer.weight.iter().copied().collect(),
                ));
                out.push((
                    g,
                    format!("{prefix}.bias"),
                    layer.bias.shape().to_vec(),
                    layer.bias.to_vec(),
                ));
            }
        }
        out
    }

    /// Overwrites tensors in [`FieldParams::named_tensors`] order from a flat
    /// iterator. Returns the number of scalars consumed.
    pub fn fill_from(&mut self, values: &[f64]) -> Result<usize> {
        let needed = self.scalar_count();
        if values.len() < needed {
            return Err(Error::DimensionMismatch {
                context: "field parameter buffer",
                expected: needed,
                actual: values.len(),
            });
        }
        let mut it = values.iter().copied();
        for g in ParamGroup::ALL {
            for layer in self.group_mut(g) {
                layer.weight.iter_mut().for_each(|w| *w = it.next().unwrap());
                layer.bias.iter_mut().for_each(|b| *b = it.next().unwrap());
            }
        }
        Ok(needed)
    }

    pub fn scalar_count(&self) -> usize {
        ParamGroup::ALL
            .iter()
            .flat_map(|g| self.group(*g))
            .map(|d| d.weight.len() + d.bias.len())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        ParamGroup::ALL
            .iter()
            .flat_map(|g| self.group(*g))
            .all(Dense::is_finite)
    }

    /// Batched forward pass over `n` rows of encoded positions and directions.
    pub fn forward(
        &self,
        position: ArrayView2<f64>,
        direction: ArrayView2<f64>,
        sensor: SensorChannel,
    ) -> Result<FieldForward> {
        self.check_inputs(&position, &direction)?;
        let (trunk_inputs, trunk_outputs) = self.trunk_forward(&position);
        let feature = trunk_outputs.last().expect("non-empty trunk");
        let density_logit = self.density.forward(&feature.view()).column(0).to_owned();
        let sigma = density_logit.mapv(softplus);
        let (head_inputs, head_outputs) = self.head_forward(sensor, feature, &direction);
        let color = head_outputs.last().expect("non-empty head").clone();

        Ok(FieldForward {
            sensor,
            sigma,
            color,
            position: position.to_owned(),
            trunk_inputs,
            trunk_outputs,
            density_logit,
            head_inputs,
            head_outputs,
        })
    }

    fn check_inputs(&self, position: &ArrayView2<f64>, direction: &ArrayView2<f64>) -> Result<()> {
        if position.ncols() != self.position_dim {
            return Err(Error::DimensionMismatch {
                context: "encoded position",
                expected: self.position_dim,
                actual: position.ncols(),
            });
        }
        if direction.ncols() != self.direction_dim {
            return Err(Error::DimensionMismatch {
                context: "encoded direction",
                expected: self.direction_dim,
                actual: direction.ncols(),
            });
        }
        if position.nrows() != direction.nrows() {
            return Err(Error::DimensionMismatch {
                context: "row count",
                expected: position.nrows(),
                actual: direction.nrows(),
            });
        }
        Ok(())
    }

    fn trunk_forward(&self, position: &ArrayView2<f64>) -> (Vec<Array2<f64>>, Vec<Array2<f64>>) {
        let mut inputs = Vec::with_capacity(self.trunk.len());
        let mut outputs: Vec<Array2<f64>> = Vec::with_capacity(self.trunk.len());
        for (l, layer) in self.trunk.iter().enumerate() {
            let input = if l == 0 {
                position.to_owned()
            } else if self.config.has_skip(l) {
                concatenate![Axis(1), outputs[l - 1], *position]
            } else {
                outputs[l - 1].clone()
            };
            let mut h = layer.forward(&input.view());
            relu_inplace(&mut h);
            inputs.push(input);
            outputs.push(h);
        }
        (inputs, outputs)
    }

    fn head_forward(
        &self,
        sensor: SensorChannel,
        feature: &Array2<f64>,
        direction: &ArrayView2<f64>,
    ) -> (Vec<Array2<f64>>, Vec<Array2<f64>>) {
        let head = &self.heads[sensor.index()];
        let mut inputs = Vec::with_capacity(head.len());
        let mut outputs: Vec<Array2<f64>> = Vec::with_capacity(head.len());
        let last = head.len() - 1;
        for (l, layer) in head.iter().enumerate() {
            let input = if l == 0 {
                concatenate![Axis(1), *feature, *direction]
            } else {
                outputs[l - 1].clone()
            };
            let mut h = layer.forward(&input.view());
            if l == last {
                h.mapv_inplace(sigmoid);
            } else {
                relu_inplace(&mut h);
            }
            inputs.push(input);
            outputs.push(h);
        }
        (inputs, outputs)
    }

    /// Forward pass without caches that evaluates the trunk once and both
    /// color heads: `(sigma, [color_a, color_b])`.
    pub fn forward_pair(
        &self,
        position: ArrayView2<f64>,
        direction: ArrayView2<f64>,
    ) -> Result<(Array1<f64>, [Array2<f64>; SENSOR_COUNT])> {
        self.check_inputs(&position, &direction)?;
        let (_, trunk_outputs) = self.trunk_forward(&position);
        let feature = trunk_outputs.last().expect("non-empty trunk");
        let sigma = self.density.forward(&feature.view()).column(0).mapv(softplus);
        let colors = SensorChannel::ALL.map(|s| {
            let (_, mut outputs) = self.head_forward(s, feature, &direction);
            outputs.pop().expect("non-empty head")
        });
        Ok((sigma, colors))
    }
}

impl FieldForward {
    pub fn rows(&self) -> usize {
        self.sigma.len()
    }

    /// Reverse pass. Parameter gradients are accumulated into `grad`; the
    /// returned arrays are the gradients with respect to the encoded position
    /// and direction rows.
    pub fn backward(
        &self,
        params: &FieldParams,
        d_sigma: &Array1<f64>,
        d_color: &Array2<f64>,
        grad: &mut FieldParams,
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        let n = self.rows();
        if d_sigma.len() != n {
            return Err(Error::DimensionMismatch {
                context: "sigma upstream gradient",
                expected: n,
                actual: d_sigma.len(),
            });
        }
        if d_color.dim() != self.color.dim() {
            return Err(Error::DimensionMismatch {
                context: "color upstream gradient",
                expected: self.color.len(),
                actual: d_color.len(),
            });
        }
        let cfg = &params.config;
        let width = cfg.trunk_width;
        let s = self.sensor.index();

        // color head
        let head = &params.heads[s];
        let last = head.len() - 1;
        let mut dz = d_color.clone();
        Zip::from(&mut dz)
            .and(&self.color)
            .for_each(|g, &c| *g *= c * (1.0 - c));
        let mut d_in = Array2::zeros((0, 0));
        for l in (0..=last).rev() {
            if l != last {
                Zip::from(&mut dz)
                    .and(&self.head_outputs[l])
                    .for_each(|g, &h| {
                        if h <= 0.0 {
                            *g = 0.0
                        }
                    });
            }
            d_in = head[l].backward(&self.head_inputs[l].view(), &dz, &mut grad.heads[s][l]);
            dz = d_in.clone();
        }
        let mut d_feature = d_in.slice(s![.., ..width]).to_owned();
        let d_direction = d_in.slice(s![.., width..]).to_owned();

        // density head
        let mut d_logit = Array2::zeros((n, 1));
        Zip::from(d_logit.column_mut(0))
            .and(d_sigma)
            .and(&self.density_logit)
            .for_each(|g, &ds, &z| *g = ds * sigmoid(z));
        let feature = self.trunk_outputs.last().expect("non-empty trunk");
        d_feature += &params
            .density
            .backward(&feature.view(), &d_logit, &mut grad.density);

        // trunk
        let mut d_position = Array2::zeros(self.position.dim());
        let mut dh = d_feature;
        for l in (0..params.trunk.len()).rev() {
            Zip::from(&mut dh)
                .and(&self.trunk_outputs[l])
                .for_each(|g, &h| {
                    if h <= 0.0 {
                        *g = 0.0
                    }
                });
            let d_input =
                params.trunk[l].backward(&self.trunk_inputs[l].view(), &dh, &mut grad.trunk[l]);
            if l == 0 {
                d_position += &d_input;
            } else if cfg.has_skip(l) {
                d_position += &d_input.slice(s![.., width..]);
                dh = d_input.slice(s![.., ..width]).to_owned();
            } else {
                dh = d_input;
            }
        }
        Ok((d_position, d_direction))
    }
}

fn single_row(v: &[f64]) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((1, v.len()), v).expect("row view")
}

/// Evaluates the field at one encoded point.
pub fn query_field(
    params: &FieldParams,
    encoded_position: &[f64],
    encoded_direction: &[f64],
    sensor: SensorChannel,
) -> Result<FieldOutput> {
    let fwd = params.forward(
        single_row(encoded_position),
        single_row(encoded_direction),
        sensor,
    )?;
    Ok(FieldOutput {
        sigma: fwd.sigma[0],
        color: fwd.color.row(0).to_vec(),
    })
}

/// Gradients of one field query.
#[derive(Debug, Clone)]
pub struct FieldGradients {
    pub params: FieldParams,
    pub encoded_position: Vec<f64>,
    pub encoded_direction: Vec<f64>,
}

/// Reverse-mode derivative of [`query_field`] contracted with the upstream
/// gradients `d_sigma` and `d_color`.
pub fn query_field_backward(
    params: &FieldParams,
    encoded_position: &[f64],
    encoded_direction: &[f64],
    sensor: SensorChannel,
    d_sigma: f64,
    d_color: &[f64],
) -> Result<FieldGradients> {
    if d_color.len() != params.config.channels_per_sensor {
        return Err(Error::DimensionMismatch {
            context: "color upstream gradient",
            expected: params.config.channels_per_sensor,
            actual: d_color.len(),
        });
    }
    let fwd = params.forward(
        single_row(encoded_position),
        single_row(encoded_direction),
        sensor,
    )?;
    let mut grad = params.zeros_like();
    let (dp, dd) = fwd.backward(
        params,
        &Array1::from_elem(1, d_sigma),
        &single_row(d_color).to_owned(),
        &mut grad,
    )?;
    Ok(FieldGradients {
        params: grad,
        encoded_position: dp.row(0).to_vec(),
        encoded_direction: dd.row(0).to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn tiny_config() -> FieldConfig {
        FieldConfig {
            trunk_layers: 3,
            trunk_width: 6,
            skip_layer: 2,
            head_layers: 1,
            head_width: 5,
            channels_per_sensor: 3,
        }
    }

    fn tiny_encoding() -> EncodingConfig {
        EncodingConfig {
            position_bands: 2,
            direction_bands: 1,
            include_raw: true,
        }
    }

    fn random_vec(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn init_is_deterministic_and_seed_dependent() {
        let cfg = FieldConfig::default();
        let enc = EncodingConfig::default();
        let a = init_params(&cfg, &enc, 1).unwrap();
        let b = init_params(&cfg, &enc, 1).unwrap();
        let c = init_params(&cfg, &enc, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.trunk[0].weight.dim(), (256, enc.position_dim()));
        assert_eq!(a.trunk[4].weight.dim(), (256, 256 + enc.position_dim()));
        assert_eq!(a.heads[0].len(), 3);
        assert_eq!(a.heads[1][2].weight.dim(), (3, 128));
        assert!(a.density.bias.iter().all(|b| *b == -1.0));
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = FieldConfig {
            trunk_layers: 1,
            head_layers: 2,
            ..FieldConfig::default()
        };
        assert!(init_params(&cfg, &EncodingConfig::default(), 0).is_err());
    }

    #[test]
    fn density_is_shared_between_sensors() {
        let p = init_params(&tiny_config(), &tiny_encoding(), 3).unwrap();
        let pos = random_vec(p.position_dim, 1);
        let dir = random_vec(p.direction_dim, 2);
        let a = query_field(&p, &pos, &dir, SensorChannel::A).unwrap();
        let b = query_field(&p, &pos, &dir, SensorChannel::B).unwrap();
        assert_eq!(a.sigma.to_bits(), b.sigma.to_bits());
        assert_ne!(a.color, b.color);
    }

    #[test]
    fn outputs_in_range_for_random_points() {
        let p = init_params(&tiny_config(), &tiny_encoding(), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 10_000;
        let pos = Array2::from_shape_simple_fn((n, p.position_dim), || rng.random_range(-3.0..3.0));
        let dir = Array2::from_shape_simple_fn((n, p.direction_dim), || rng.random_range(-1.0..1.0));
        let out = p.forward(pos.view(), dir.view(), SensorChannel::B).unwrap();
        assert!(out.sigma.iter().all(|s| *s >= 0.0));
        assert!(out.color.iter().all(|c| (0.0..=1.0).contains(c)));
    }

    #[test]
    fn hand_evaluated_tiny_network() {
        // one trunk layer of width 2, no hidden head layers, one color channel
        let cfg = FieldConfig {
            trunk_layers: 1,
            trunk_width: 2,
            skip_layer: 0,
            head_layers: 0,
            head_width: 0,
            channels_per_sensor: 1,
        };
        let enc = EncodingConfig {
            position_bands: 1,
            direction_bands: 0,
            include_raw: true,
        };
        let mut p = init_params(&cfg, &enc, 0).unwrap();
        // encoded position of the origin with alpha = 1: raw 0, sin 0, cos 1
        let pos = [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let dir = [0.0, 0.0, 0.0];
        p.trunk[0].weight.fill(0.0);
        p.trunk[0].weight[(0, 6)] = 0.5;
        p.trunk[0].weight[(1, 7)] = -2.0;
        p.trunk[0].bias = ndarray::arr1(&[0.25, 0.1]);
        p.density.weight = ndarray::arr2(&[[2.0, 3.0]]);
        p.density.bias = ndarray::arr1(&[-0.5]);
        p.heads[0][0].weight = ndarray::arr2(&[[1.5, 4.0, 0.0, 0.0, 0.0]]);
        p.heads[0][0].bias = ndarray::arr1(&[-1.0]);
        // h = relu([0.5 + 0.25, -2 + 0.1]) = [0.75, 0]
        // sigma = softplus(2 * 0.75 - 0.5) = ln(1 + e)
        // color = sigmoid(1.5 * 0.75 - 1) = sigmoid(0.125)
        let out = query_field(&p, &pos, &dir, SensorChannel::A).unwrap();
        assert_abs_diff_eq!(out.sigma, (1.0 + 1f64.exp()).ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(out.color[0], 1.0 / (1.0 + (-0.125f64).exp()), epsilon = 1e-12);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let p = init_params(&tiny_config(), &tiny_encoding(), 3).unwrap();
        let err = query_field(&p, &[0.0; 4], &vec![0.0; p.direction_dim], SensorChannel::A);
        assert!(matches!(err, Err(Error::DimensionMismatch { .. })));
        let pos = vec![0.0; p.position_dim];
        let dir = vec![0.0; p.direction_dim];
        let err = query_field_backward(&p, &pos, &dir, SensorChannel::A, 1.0, &[1.0]);
        assert!(matches!(err, Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let p = init_params(&tiny_config(), &tiny_encoding(), 5).unwrap();
        let pos = random_vec(p.position_dim, 1);
        let dir = random_vec(p.direction_dim, 2);
        let g = query_field_backward(&p, &pos, &dir, SensorChannel::A, 0.0, &[0.0; 3]).unwrap();
        assert_eq!(g.params, p.zeros_like());
        assert!(g.encoded_position.iter().all(|v| *v == 0.0));
        assert!(g.encoded_direction.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn unselected_head_gets_exact_zero_gradient() {
        let p = init_params(&tiny_config(), &tiny_encoding(), 6).unwrap();
        let pos = random_vec(p.position_dim, 1);
        let dir = random_vec(p.direction_dim, 2);
        let g = query_field_backward(&p, &pos, &dir, SensorChannel::B, 0.7, &[0.3, -0.2, 0.9])
            .unwrap();
        let zero = p.zeros_like();
        assert_eq!(g.params.heads[0], zero.heads[0]);
        assert_ne!(g.params.heads[1], zero.heads[1]);
    }

    /// Scalar objective `d_sigma * sigma + d_color · color` for the oracle.
    fn objective(
        p: &FieldParams,
        pos: &[f64],
        dir: &[f64],
        sensor: SensorChannel,
        ds: f64,
        dc: &[f64],
    ) -> f64 {
        let out = query_field(p, pos, dir, sensor).unwrap();
        ds * out.sigma + out.color.iter().zip(dc).map(|(a, b)| a * b).sum::<f64>()
    }

    #[test]
    fn gradients_match_central_differences() {
        let cfg = tiny_config();
        let p = init_params(&cfg, &tiny_encoding(), 7).unwrap();
        let pos = random_vec(p.position_dim, 11);
        let dir = random_vec(p.direction_dim, 12);
        let ds = 0.8;
        let dc = [0.4, -1.1, 0.6];
        for sensor in SensorChannel::ALL {
            let g = query_field_backward(&p, &pos, &dir, sensor, ds, &dc).unwrap();
            let analytic: Vec<f64> = g
                .params
                .named_tensors()
                .into_iter()
                .flat_map(|t| t.3)
                .collect();
            let base: Vec<f64> = p.named_tensors().into_iter().flat_map(|t| t.3).collect();
            let h = 1e-6;
            for i in 0..base.len() {
                let mut plus = p.clone();
                let mut minus = p.clone();
                let mut v = base.clone();
                v[i] += h;
                plus.fill_from(&v).unwrap();
                v[i] -= 2.0 * h;
                minus.fill_from(&v).unwrap();
                let fd = (objective(&plus, &pos, &dir, sensor, ds, &dc)
                    - objective(&minus, &pos, &dir, sensor, ds, &dc))
                    / (2.0 * h);
                let err = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(1e-4);
                assert!(err < 1e-6, "param {i}: fd {fd} analytic {}", analytic[i]);
            }
            for (which, input, grad) in [
                ("pos", &pos, &g.encoded_position),
                ("dir", &dir, &g.encoded_direction),
            ] {
                for i in 0..input.len() {
                    let mut plus = input.clone();
                    let mut minus = input.clone();
                    plus[i] += h;
                    minus[i] -= h;
                    let (pp, pd, mp, md) = if which == "pos" {
                        (&plus, &dir, &minus, &dir)
                    } else {
                        (&pos, &plus, &pos, &minus)
                    };
                    let fd = (objective(&p, pp, pd, sensor, ds, &dc)
                        - objective(&p, mp, md, sensor, ds, &dc))
                        / (2.0 * h);
                    let err = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-4);
                    assert!(err < 1e-6, "{which} {i}: fd {fd} analytic {}", grad[i]);
                }
            }
        }
    }

    #[test]
    fn select_trainable_groups() {
        let a = select_trainable(SensorChannel::A, &[]);
        assert!(a.contains(ParamGroup::Trunk));
        assert!(a.contains(ParamGroup::DensityHead));
        assert!(a.contains(ParamGroup::ColorHead(SensorChannel::A)));
        assert!(!a.contains(ParamGroup::ColorHead(SensorChannel::B)));

        let b = select_trainable(SensorChannel::B, &[]);
        assert!(!b.contains(ParamGroup::ColorHead(SensorChannel::A)));
        assert!(b.contains(ParamGroup::ColorHead(SensorChannel::B)));

        let frozen = select_trainable(
            SensorChannel::B,
            &[
                ParamGroup::Trunk,
                ParamGroup::DensityHead,
                ParamGroup::ColorHead(SensorChannel::A),
            ],
        );
        assert_eq!(frozen.groups(), vec![ParamGroup::ColorHead(SensorChannel::B)]);
    }

    #[test]
    fn fill_from_roundtrips_named_tensors() {
        let p = init_params(&tiny_config(), &tiny_encoding(), 9).unwrap();
        let flat: Vec<f64> = p.named_tensors().into_iter().flat_map(|t| t.3).collect();
        assert_eq!(flat.len(), p.scalar_count());
        let mut q = p.zeros_like();
        q.fill_from(&flat).unwrap();
        assert_eq!(p, q);
    }
}
