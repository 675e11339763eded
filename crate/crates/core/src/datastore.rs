//! On-disk dataset layout, float depth files, training checkpoints and
//! configuration files.
//!
//! A dataset directory holds `manifest.json`, 8-bit PNG images, optional
//! PNG exclusion masks (nonzero = excluded) and optional depth files. A
//! depth file is a 16-byte header (8-byte magic, little-endian `u32` width
//! and height) followed by row-major little-endian `f32` values.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageReader, RgbImage};
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::dataset::{MultiSensorDataset, Perturbation, SensorImage, SensorSet};
use crate::encoding::EncodingConfig;
use crate::error::{Error, Result};
use crate::field::{FieldConfig, FieldParams, SensorChannel, SENSOR_COUNT};
use crate::geometry::{Intrinsics, RigidTransform, Twist};
use crate::raster::{to_u8, Image, Mask};
use crate::renderer::SamplingConfig;
use crate::synthetic::{SceneSpec, SyntheticDataset};
use crate::training::{AdamHyper, AdamState, CameraSet, Split, TrainConfig, TrainState};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const DEPTH_MAGIC: [u8; 8] = *b"MBDEPTH\x01";
pub const CHECKPOINT_MAGIC: [u8; 8] = *b"MBCKPT\x00\x01";
pub const CHECKPOINT_VERSION: u32 = 1;
const DATASET_FORMAT: &str = "multibarf-dataset/1";
/// Largest tolerated deviation of a stored rotation from orthonormality.
pub const POSE_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorRecord {
    pub sensor: SensorChannel,
    pub channels: usize,
    pub intrinsics: Intrinsics,
    pub background: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub name: String,
    pub file: String,
    pub sensor: SensorChannel,
    /// Row-major `[R | t]`, camera to world.
    pub initial_pose: [[f64; 4]; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth_pose: Option<[[f64; 4]; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth_depth: Option<String>,
}

/// Provenance of a generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorRecord {
    pub seed: u64,
    pub scene: SceneSpec,
    pub perturbations: [Vec<Perturbation>; SENSOR_COUNT],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub near: f64,
    pub far: f64,
    pub sensors: Vec<SensorRecord>,
    pub images: Vec<ImageRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<GeneratorRecord>,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn image_error(path: &Path, e: image::ImageError) -> Error {
    Error::load(path.display().to_string(), e.to_string())
}

/// Writes a one- or three-channel image as an 8-bit PNG.
pub fn save_png(img: &Image, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let (w, h) = (img.width as u32, img.height as u32);
    let bytes: Vec<u8> = img.data.iter().map(|v| to_u8(*v)).collect();
    match img.channels {
        3 => RgbImage::from_raw(w, h, bytes)
            .expect("buffer matches size")
            .save(path)
            .map_err(|e| image_error(path, e)),
        1 => GrayImage::from_raw(w, h, bytes)
            .expect("buffer matches size")
            .save(path)
            .map_err(|e| image_error(path, e)),
        c => Err(Error::invalid(format!("cannot store a {c}-channel image as PNG"))),
    }
}

pub fn load_png(path: &Path, channels: usize) -> Result<Image> {
    if !path.exists() {
        return Err(Error::load(path.display().to_string(), "file does not exist"));
    }
    let decoded = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| image_error(path, e))?;
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    let raw = match channels {
        3 => decoded.into_rgb8().into_raw(),
        1 => decoded.into_luma8().into_raw(),
        c => return Err(Error::invalid(format!("cannot load a {c}-channel image from PNG"))),
    };
    let data = raw.into_iter().map(|b| f64::from(b) / 255.0).collect();
    Ok(Image::from_data(w, h, channels, data))
}

fn save_mask(mask: &Mask, path: &Path) -> Result<()> {
    let bytes = mask.excluded.iter().map(|e| if *e { 255 } else { 0 }).collect();
    let img = GrayImage::from_raw(mask.width as u32, mask.height as u32, bytes).expect("mask size");
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save(path).map_err(|e| image_error(path, e))
}

fn load_mask(path: &Path) -> Result<Mask> {
    let img = load_png(path, 1)?;
    Ok(Mask {
        width: img.width,
        height: img.height,
        excluded: img.data.iter().map(|v| *v > 0.0).collect(),
    })
}

pub fn encode_depth(depth: &Image) -> Result<Vec<u8>> {
    if depth.channels != 1 {
        return Err(Error::invalid("depth maps have one channel"));
    }
    let mut out = Vec::with_capacity(16 + 4 * depth.data.len());
    out.extend_from_slice(&DEPTH_MAGIC);
    out.extend_from_slice(&(depth.width as u32).to_le_bytes());
    out.extend_from_slice(&(depth.height as u32).to_le_bytes());
    for v in &depth.data {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_depth(bytes: &[u8], record: &str) -> Result<Image> {
    if bytes.len() < 16 || bytes[..8] != DEPTH_MAGIC {
        return Err(Error::load(record, "not a depth file (bad magic)"));
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
    let (w, h) = (word(8), word(12));
    let body = &bytes[16..];
    if body.len() != 4 * w * h {
        return Err(Error::load(
            record,
            format!("depth payload is {} bytes, {w}x{h} needs {}", body.len(), 4 * w * h),
        ));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
        .collect();
    Ok(Image::from_data(w, h, 1, data))
}

pub fn save_depth(depth: &Image, path: &Path) -> Result<()> {
    write_file(path, &encode_depth(depth)?)
}

pub fn load_depth(path: &Path) -> Result<Image> {
    let record = path.display().to_string();
    if !path.exists() {
        return Err(Error::load(record, "file does not exist"));
    }
    decode_depth(&read_file(path)?, &record)
}

fn write_dataset(ds: &MultiSensorDataset, generator: Option<GeneratorRecord>, root: &Path) -> Result<()> {
    ds.validate()?;
    let mut images = Vec::new();
    for s in SensorChannel::ALL {
        for (i, img) in ds.sensor(s).images.iter().enumerate() {
            let stem = format!("{}_{i:03}", s.tag());
            let file = format!("images/{stem}.png");
            save_png(&img.color, &root.join(&file))?;
            let mask = match &img.mask {
                Some(m) => {
                    let f = format!("masks/{stem}.png");
                    save_mask(m, &root.join(&f))?;
                    Some(f)
                }
                None => None,
            };
            let truth_depth = match &img.truth_depth {
                Some(d) => {
                    let f = format!("depth/{stem}.depth");
                    save_depth(d, &root.join(&f))?;
                    Some(f)
                }
                None => None,
            };
            images.push(ImageRecord {
                name: img.name.clone(),
                file,
                sensor: s,
                initial_pose: img.initial_pose.to_rows(),
                mask,
                truth_pose: img.truth_pose.map(|p| p.to_rows()),
                truth_depth,
            });
        }
    }
    let manifest = Manifest {
        format: DATASET_FORMAT.into(),
        near: ds.near,
        far: ds.far,
        sensors: SensorChannel::ALL
            .iter()
            .map(|&s| SensorRecord {
                sensor: s,
                channels: ds.channels(s),
                intrinsics: ds.sensor(s).intrinsics,
                background: ds.background[s.index()].clone(),
            })
            .collect(),
        images,
        generator,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_file(&root.join(MANIFEST_FILE), text.as_bytes())
}

pub fn save_dataset(ds: &MultiSensorDataset, root: &Path) -> Result<()> {
    write_dataset(ds, None, root)
}

/// Saves a generated dataset together with its scene description.
pub fn save_synthetic(syn: &SyntheticDataset, root: &Path) -> Result<()> {
    let generator = GeneratorRecord {
        seed: syn.seed,
        scene: syn.scene.clone(),
        perturbations: syn.perturbations.clone(),
    };
    write_dataset(&syn.dataset, Some(generator), root)
}

pub fn load_manifest(root: &Path) -> Result<Manifest> {
    let path = root.join(MANIFEST_FILE);
    if !path.exists() {
        return Err(Error::load(path.display().to_string(), "file does not exist"));
    }
    let text = read_file(&path)?;
    let manifest: Manifest = serde_json::from_slice(&text)
        .map_err(|e| Error::load(path.display().to_string(), e.to_string()))?;
    if manifest.format != DATASET_FORMAT {
        return Err(Error::load(
            path.display().to_string(),
            format!("unknown format `{}`", manifest.format),
        ));
    }
    Ok(manifest)
}

fn record_pose(rows: &[[f64; 4]; 3], record: &str) -> Result<RigidTransform> {
    RigidTransform::from_rows(rows, POSE_TOLERANCE).map_err(|e| Error::load(record, e.to_string()))
}

pub fn load_dataset(root: &Path) -> Result<MultiSensorDataset> {
    let manifest = load_manifest(root)?;
    let mut sensors: [Option<SensorRecord>; SENSOR_COUNT] = [None, None];
    for rec in &manifest.sensors {
        let slot = &mut sensors[rec.sensor.index()];
        if slot.is_some() {
            return Err(Error::load(MANIFEST_FILE, format!("sensor {} listed twice", rec.sensor)));
        }
        *slot = Some(rec.clone());
    }
    let [Some(a), Some(b)] = sensors else {
        return Err(Error::load(MANIFEST_FILE, "manifest must list sensors A and B"));
    };
    let sensors = [a, b];
    let mut sets = sensors.clone().map(|r| SensorSet {
        intrinsics: r.intrinsics,
        images: Vec::new(),
    });
    for rec in &manifest.images {
        let channels = sensors[rec.sensor.index()].channels;
        let color = load_png(&root.join(&rec.file), channels)?;
        let mask = rec.mask.as_ref().map(|f| load_mask(&root.join(f))).transpose()?;
        let truth_depth = rec
            .truth_depth
            .as_ref()
            .map(|f| load_depth(&root.join(f)))
            .transpose()?;
        sets[rec.sensor.index()].images.push(SensorImage {
            name: rec.name.clone(),
            color,
            initial_pose: record_pose(&rec.initial_pose, &rec.file)?,
            mask,
            truth_pose: rec.truth_pose.as_ref().map(|p| record_pose(p, &rec.file)).transpose()?,
            truth_depth,
        });
    }
    let ds = MultiSensorDataset {
        sensors: sets,
        near: manifest.near,
        far: manifest.far,
        background: sensors.map(|r| r.background),
    };
    ds.validate()?;
    Ok(ds)
}

/// Name, shape and position of one tensor in the checkpoint buffer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RngRecord {
    seed: [u8; 32],
    stream: u64,
    /// Decimal string; the position is wider than JSON integers.
    word_pos: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    field: FieldConfig,
    encoding: EncodingConfig,
    config: TrainConfig,
    sampling: SamplingConfig,
    position_dim: usize,
    direction_dim: usize,
    splits: [Split; SENSOR_COUNT],
    cameras: [CameraSet; SENSOR_COUNT],
    adam: AdamHyper,
    field_steps: [u64; 4],
    twist_steps: [Vec<u64>; SENSOR_COUNT],
    iteration: u64,
    rng: RngRecord,
    tensors: Vec<TensorEntry>,
}

struct BufferWriter {
    tensors: Vec<TensorEntry>,
    data: Vec<f64>,
}

impl BufferWriter {
    fn push(&mut self, name: String, shape: Vec<usize>, values: impl IntoIterator<Item = f64>) {
        let offset = self.data.len();
        self.data.extend(values);
        debug_assert_eq!(self.data.len() - offset, shape.iter().product::<usize>());
        self.tensors.push(TensorEntry { name, shape, offset });
    }

    fn push_params(&mut self, prefix: &str, p: &FieldParams) {
        for (_, name, shape, values) in p.named_tensors() {
            self.push(format!("{prefix}/{name}"), shape, values);
        }
    }

    fn push_twists(&mut self, prefix: &str, twists: &[Vec<[f64; 6]>; SENSOR_COUNT]) {
        for s in SensorChannel::ALL {
            let t = &twists[s.index()];
            self.push(format!("{prefix}/{}", s.tag()), vec![t.len(), 6], t.iter().flatten().copied());
        }
    }
}

/// Serializes a training state: magic, version, header length, JSON header,
/// then the little-endian `f64` buffer described by the header's tensor
/// list.
pub fn encode_checkpoint(state: &TrainState) -> Vec<u8> {
    let mut buf = BufferWriter {
        tensors: Vec::new(),
        data: Vec::new(),
    };
    buf.push_params("params", &state.params);
    buf.push_params("adam_m", &state.adam.field_m);
    buf.push_params("adam_v", &state.adam.field_v);
    let twists = state.twists.clone().map(|v| v.iter().map(Twist::to_array).collect());
    buf.push_twists("twists", &twists);
    buf.push_twists("twist_m", &state.adam.twist_m);
    buf.push_twists("twist_v", &state.adam.twist_v);
    let header = CheckpointHeader {
        version: CHECKPOINT_VERSION,
        field: state.params.config,
        encoding: state.config.encoding,
        config: state.config.clone(),
        sampling: state.sampling.clone(),
        position_dim: state.params.position_dim,
        direction_dim: state.params.direction_dim,
        splits: state.splits.clone(),
        cameras: state.cameras.clone(),
        adam: state.adam.hyper,
        field_steps: state.adam.field_steps,
        twist_steps: state.adam.twist_steps.clone(),
        iteration: state.iteration,
        rng: RngRecord {
            seed: state.rng.get_seed(),
            stream: state.rng.get_stream(),
            word_pos: state.rng.get_word_pos().to_string(),
        },
        tensors: buf.tensors,
    };
    let json = serde_json::to_vec(&header).expect("checkpoint header serializes");
    let mut out = Vec::with_capacity(20 + json.len() + 8 * buf.data.len());
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for v in &buf.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct BufferReader<'a> {
    tensors: &'a [TensorEntry],
    data: &'a [f64],
    next: usize,
}

impl BufferReader<'_> {
    fn take(&mut self, name: &str, shape: &[usize]) -> Result<&[f64]> {
        let entry = self
            .tensors
            .get(self.next)
            .ok_or_else(|| Error::load("checkpoint", format!("missing tensor {name}")))?;
        if entry.name != name || entry.shape != shape {
            return Err(Error::load(
                "checkpoint",
                format!("tensor {} {:?} where {name} {shape:?} was expected", entry.name, entry.shape),
            ));
        }
        self.next += 1;
        Ok(&self.data[entry.offset..entry.offset + entry.len()])
    }

    fn fill_params(&mut self, prefix: &str, p: &mut FieldParams) -> Result<()> {
        let mut values = Vec::with_capacity(p.scalar_count());
        for (_, name, shape, _) in p.named_tensors() {
            values.extend_from_slice(self.take(&format!("{prefix}/{name}"), &shape)?);
        }
        p.fill_from(&values)?;
        Ok(())
    }

    fn twists(&mut self, prefix: &str, counts: [usize; SENSOR_COUNT]) -> Result<[Vec<[f64; 6]>; SENSOR_COUNT]> {
        let mut out: [Vec<[f64; 6]>; SENSOR_COUNT] = Default::default();
        for s in SensorChannel::ALL {
            let n = counts[s.index()];
            let flat = self.take(&format!("{prefix}/{}", s.tag()), &[n, 6])?;
            out[s.index()] = flat.chunks_exact(6).map(|c| c.try_into().unwrap()).collect();
        }
        Ok(out)
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<TrainState> {
    let bad = |reason: &str| Error::load("checkpoint", reason);
    if bytes.len() < 20 || bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint file (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::IncompatibleVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let json_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
    let json_end = usize::try_from(json_len)
        .ok()
        .and_then(|n| n.checked_add(20))
        .filter(|end| *end <= bytes.len())
        .ok_or_else(|| bad("header length exceeds file size"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[20..json_end]).map_err(|e| bad(&format!("malformed header: {e}")))?;
    if header.version != version {
        return Err(bad("header version disagrees with file version"));
    }
    let body = &bytes[json_end..];
    let extent: usize = header.tensors.iter().map(TensorEntry::len).sum();
    if body.len() != 8 * extent {
        return Err(bad(&format!(
            "parameter buffer is {} bytes, tensor list needs {}",
            body.len(),
            8 * extent
        )));
    }
    let mut expected_offset = 0;
    for t in &header.tensors {
        if t.offset != expected_offset {
            return Err(bad(&format!("tensor {} has offset {}, expected {expected_offset}", t.name, t.offset)));
        }
        expected_offset += t.len();
    }
    let data: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mut reader = BufferReader {
        tensors: &header.tensors,
        data: &data,
        next: 0,
    };

    // fresh tensors of the right shapes, then overwritten from the buffer
    let mut params = crate::field::init_params(&header.field, &header.encoding, 0)?;
    if params.position_dim != header.position_dim || params.direction_dim != header.direction_dim {
        return Err(bad("encoding dimensions disagree with the field layout"));
    }
    reader.fill_params("params", &mut params)?;
    let mut field_m = params.zeros_like();
    reader.fill_params("adam_m", &mut field_m)?;
    let mut field_v = params.zeros_like();
    reader.fill_params("adam_v", &mut field_v)?;
    let counts = [header.splits[0].train.len(), header.splits[1].train.len()];
    let twists = reader.twists("twists", counts)?.map(|v| v.into_iter().map(Twist::from_array).collect());
    let twist_m = reader.twists("twist_m", counts)?;
    let twist_v = reader.twists("twist_v", counts)?;
    if reader.next != header.tensors.len() {
        return Err(bad("unexpected trailing tensors"));
    }
    for s in 0..SENSOR_COUNT {
        if header.twist_steps[s].len() != counts[s] || header.cameras[s].initial.len() != counts[s] {
            return Err(bad("per-image records disagree with the training split"));
        }
    }
    let word_pos: u128 = header
        .rng
        .word_pos
        .parse()
        .map_err(|_| bad("malformed rng position"))?;
    let mut rng = ChaCha8Rng::from_seed(header.rng.seed);
    rng.set_stream(header.rng.stream);
    rng.set_word_pos(word_pos);

    let mut config = header.config;
    config.field = header.field;
    config.encoding = header.encoding;
    Ok(TrainState {
        config,
        sampling: header.sampling,
        params,
        splits: header.splits,
        cameras: header.cameras,
        twists,
        adam: AdamState {
            hyper: header.adam,
            field_m,
            field_v,
            field_steps: header.field_steps,
            twist_m,
            twist_v,
            twist_steps: header.twist_steps,
        },
        iteration: header.iteration,
        rng,
    })
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    write_file(path, &encode_checkpoint(state))
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    if !path.exists() {
        return Err(Error::load(path.display().to_string(), "file does not exist"));
    }
    decode_checkpoint(&read_file(path)?)
}

/// Full configuration, every field spelled out.
pub fn dump_config(cfg: &TrainConfig) -> String {
    toml::to_string_pretty(cfg).expect("config serializes")
}

pub fn parse_config(text: &str, record: &str) -> Result<TrainConfig> {
    let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::load(record, e.message().to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<TrainConfig> {
    let text = read_file(path)?;
    let text = String::from_utf8(text).map_err(|_| Error::load(path.display().to_string(), "not UTF-8"))?;
    parse_config(&text, &path.display().to_string())
}

/// File names written by one render call.
pub fn render_artifacts(dir: &Path) -> [PathBuf; 3] {
    [dir.join("image_A.png"), dir.join("image_B.png"), dir.join("depth.depth")]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{generate_scene, make_dataset, DatasetOptions};
    use crate::training::{init_state, run_until};

    fn small_synthetic(logo: bool) -> SyntheticDataset {
        let spec = generate_scene("textured-shapes", 3).unwrap();
        let opts = DatasetOptions {
            views: [3, 2],
            width: 12,
            height: 10,
            logo_mask: logo,
            ..Default::default()
        };
        make_dataset(&spec, &opts, 5).unwrap()
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            iterations: 6,
            batch_pixels: 16,
            samples_per_ray: 6,
            log_every: 1,
            field: FieldConfig {
                trunk_layers: 2,
                trunk_width: 8,
                skip_layer: 1,
                head_layers: 1,
                head_width: 4,
                channels_per_sensor: 3,
            },
            encoding: EncodingConfig {
                position_bands: 2,
                direction_bands: 1,
                include_raw: true,
            },
            validation_fraction: 0.0,
            ..Default::default()
        }
    }

    fn quantize_like_disk(mut ds: MultiSensorDataset) -> MultiSensorDataset {
        for set in &mut ds.sensors {
            for img in &mut set.images {
                img.color = img.color.quantized();
                if let Some(d) = &mut img.truth_depth {
                    d.data.iter_mut().for_each(|v| *v = f64::from(*v as f32));
                }
            }
        }
        ds
    }

    #[test]
    fn dataset_roundtrip() {
        let syn = small_synthetic(true);
        let dir = tempfile::tempdir().unwrap();
        save_synthetic(&syn, dir.path()).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded, quantize_like_disk(syn.dataset.clone()));
        // poses keep full precision
        let a = &syn.dataset.sensors[0].images[1];
        assert_eq!(loaded.sensors[0].images[1].initial_pose, a.initial_pose);
        assert!(loaded.sensors[1].images[0].mask.is_some());
        // saving what was loaded reproduces the same bytes
        let again = tempfile::tempdir().unwrap();
        save_dataset(&loaded, again.path()).unwrap();
        let reloaded = load_dataset(again.path()).unwrap();
        assert_eq!(reloaded, loaded);
        let gen = load_manifest(dir.path()).unwrap().generator.unwrap();
        assert_eq!(gen.scene, syn.scene);
    }

    #[test]
    fn quantization_error_is_bounded() {
        let syn = small_synthetic(false);
        let dir = tempfile::tempdir().unwrap();
        save_synthetic(&syn, dir.path()).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        for s in 0..2 {
            for (a, b) in syn.dataset.sensors[s].images.iter().zip(&loaded.sensors[s].images) {
                for (x, y) in a.color.data.iter().zip(&b.color.data) {
                    assert!((x - y).abs() <= 1.0 / 255.0);
                }
            }
        }
    }

    #[test]
    fn missing_png_is_named() {
        let syn = small_synthetic(false);
        let dir = tempfile::tempdir().unwrap();
        save_synthetic(&syn, dir.path()).unwrap();
        fs::remove_file(dir.path().join("images/B_001.png")).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Load { .. }));
        assert!(err.to_string().contains("B_001.png"), "{err}");
    }

    #[test]
    fn non_orthonormal_pose_is_rejected() {
        let syn = small_synthetic(false);
        let dir = tempfile::tempdir().unwrap();
        save_synthetic(&syn, dir.path()).unwrap();
        let mut manifest = load_manifest(dir.path()).unwrap();
        manifest.images[2].initial_pose[0][0] += 1e-4;
        let text = serde_json::to_string(&manifest).unwrap();
        fs::write(dir.path().join(MANIFEST_FILE), text).unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains(&manifest.images[2].file), "{err}");
        assert!(err.contains("orthonormal"), "{err}");
    }

    #[test]
    fn malformed_manifest() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(MANIFEST_FILE), "{ not json").unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Load { .. })));
        let empty = tempfile::tempdir().unwrap();
        assert!(matches!(load_dataset(empty.path()), Err(Error::Load { .. })));
    }

    #[test]
    fn depth_file_format() {
        let depth = Image::from_data(3, 2, 1, vec![1.0, 2.5, -0.0, 1e9, 0.1, 7.25]);
        let bytes = encode_depth(&depth).unwrap();
        assert_eq!(bytes.len(), 16 + 4 * 6);
        assert_eq!(&bytes[..8], b"MBDEPTH\x01");
        assert_eq!(&bytes[8..16], &[3, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(&bytes[16..20], &1.0f32.to_le_bytes());
        let back = decode_depth(&bytes, "d").unwrap();
        assert_eq!(back.data[1], 2.5);
        assert_eq!(back.data[4], f64::from(0.1f32));
        // a PNG is not a depth file
        let dir = tempfile::tempdir().unwrap();
        let png = dir.path().join("x.png");
        save_png(&Image::new(3, 2, 1), &png).unwrap();
        assert!(load_depth(&png).is_err());
        assert!(decode_depth(&bytes[..bytes.len() - 1], "d").is_err());
    }

    #[test]
    fn checkpoint_roundtrip_is_bitwise() {
        let syn = small_synthetic(false);
        let mut state = init_state(&syn.dataset, &tiny_config()).unwrap();
        run_until(&mut state, &syn.dataset, 4, &mut |_, _| {}).unwrap();
        let bytes = encode_checkpoint(&state);
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, state);
        assert_eq!(encode_checkpoint(&back), bytes);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        save_checkpoint(&state, &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), state);
    }

    #[test]
    fn resume_matches_uninterrupted() {
        let syn = small_synthetic(false);
        let cfg = tiny_config();
        let mut whole = init_state(&syn.dataset, &cfg).unwrap();
        let mut logs_whole = Vec::new();
        run_until(&mut whole, &syn.dataset, 6, &mut |_, r| logs_whole.push(r.clone())).unwrap();

        let mut first = init_state(&syn.dataset, &cfg).unwrap();
        let mut logs = Vec::new();
        run_until(&mut first, &syn.dataset, 3, &mut |_, r| logs.push(r.clone())).unwrap();
        let mut resumed = decode_checkpoint(&encode_checkpoint(&first)).unwrap();
        drop(first);
        run_until(&mut resumed, &syn.dataset, 6, &mut |_, r| logs.push(r.clone())).unwrap();
        assert_eq!(logs, logs_whole);
        assert_eq!(encode_checkpoint(&resumed), encode_checkpoint(&whole));
    }

    #[test]
    fn checkpoint_corruption_is_detected() {
        let syn = small_synthetic(false);
        let state = init_state(&syn.dataset, &tiny_config()).unwrap();
        let bytes = encode_checkpoint(&state);
        let truncated = &bytes[..bytes.len() - 8];
        assert!(matches!(decode_checkpoint(truncated), Err(Error::Load { .. })));
        let mut longer = bytes.clone();
        longer.extend_from_slice(&[0; 8]);
        assert!(matches!(decode_checkpoint(&longer), Err(Error::Load { .. })));
        let mut wrong_version = bytes.clone();
        wrong_version[8..12].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(
            decode_checkpoint(&wrong_version),
            Err(Error::IncompatibleVersion { found: 7, expected: 1 })
        ));
        assert!(decode_checkpoint(b"MBDEPTH\x01").is_err());
    }

    #[test]
    fn config_dump_roundtrips() {
        let cfg = TrainConfig {
            seed: 17,
            lr_pose_start: 1.2345678901234567e-3,
            sensors: vec![SensorChannel::B],
            ..Default::default()
        };
        let text = dump_config(&cfg);
        assert!(text.contains("lr_field_start"));
        assert!(text.contains("[field]"));
        assert_eq!(parse_config(&text, "cfg").unwrap(), cfg);
        // partial files fall back to defaults
        let partial = parse_config("iterations = 5\n[field]\ntrunk_width = 32\n", "cfg").unwrap();
        assert_eq!(partial.iterations, 5);
        assert_eq!(partial.field.trunk_width, 32);
        assert_eq!(partial.field.trunk_layers, FieldConfig::default().trunk_layers);
        assert!(matches!(parse_config("iterations = \"x\"", "cfg"), Err(Error::Load { .. })));
    }
}
