//! In-memory two-sensor multiview dataset.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{SensorChannel, SENSOR_COUNT};
use crate::geometry::{Intrinsics, RigidTransform};
use crate::raster::{Image, Mask};

#[derive(Debug, Clone, PartialEq)]
pub struct SensorImage {
    pub name: String,
    pub color: Image,
    pub initial_pose: RigidTransform,
    pub mask: Option<Mask>,
    pub truth_pose: Option<RigidTransform>,
    /// Camera-axis depth of the nearest surface; `far` where nothing is hit.
    pub truth_depth: Option<Image>,
}

impl SensorImage {
    pub fn is_excluded(&self, col: usize, row: usize) -> bool {
        self.mask.as_ref().is_some_and(|m| m.is_excluded(col, row))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensorSet {
    pub intrinsics: Intrinsics,
    pub images: Vec<SensorImage>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiSensorDataset {
    pub sensors: [SensorSet; SENSOR_COUNT],
    /// Ray distance bounds shared by every camera.
    pub near: f64,
    pub far: f64,
    pub background: [Vec<f64>; SENSOR_COUNT],
}

impl MultiSensorDataset {
    pub fn sensor(&self, s: SensorChannel) -> &SensorSet {
        &self.sensors[s.index()]
    }

    pub fn channels(&self, s: SensorChannel) -> usize {
        self.background[s.index()].len()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.near > 0.0 && self.near < self.far) {
            return Err(Error::invalid("dataset needs 0 < near < far"));
        }
        for s in SensorChannel::ALL {
            let set = self.sensor(s);
            set.intrinsics.validate()?;
            let channels = self.channels(s);
            for img in &set.images {
                let k = &set.intrinsics;
                if img.color.width != k.width
                    || img.color.height != k.height
                    || img.color.channels != channels
                {
                    return Err(Error::load(
                        &img.name,
                        format!(
                            "image is {}x{}x{}, sensor {s} expects {}x{}x{channels}",
                            img.color.width, img.color.height, img.color.channels, k.width, k.height
                        ),
                    ));
                }
                if let Some(m) = &img.mask {
                    if m.width != k.width || m.height != k.height {
                        return Err(Error::load(&img.name, "mask size differs from image"));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Size of the log record of one injected pose perturbation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    pub rotation_deg: f64,
    pub translation: f64,
}
