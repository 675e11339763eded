use serde::{Deserialize, Serialize};

/// Row-major float image with interleaved channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn filled(width: usize, height: usize, value: &[f64]) -> Self {
        let mut img = Self::new(width, height, value.len());
        for px in img.data.chunks_exact_mut(value.len()) {
            px.copy_from_slice(value);
        }
        img
    }

    pub fn from_data(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), width * height * channels, "image buffer size");
        Self {
            width,
            height,
            channels,
            data,
        }
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn index(&self, col: usize, row: usize) -> usize {
        row * self.width + col
    }

    pub fn pixel(&self, col: usize, row: usize) -> &[f64] {
        let i = self.index(col, row) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn pixel_mut(&mut self, col: usize, row: usize) -> &mut [f64] {
        let i = self.index(col, row) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    pub fn get(&self, col: usize, row: usize, channel: usize) -> f64 {
        self.data[self.index(col, row) * self.channels + channel]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    /// Values rounded to the nearest 8-bit level.
    pub fn quantized(&self) -> Image {
        let data = self.data.iter().map(|v| f64::from(to_u8(*v)) / 255.0).collect();
        Image { data, ..*self }
    }
}

pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Per-pixel exclusion mask; `true` marks a pixel removed from sampling and
/// metrics.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub excluded: Vec<bool>,
}

impl Mask {
    pub fn none(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            excluded: vec![false; width * height],
        }
    }

    /// Excludes the half-open rectangle `[col0, col1) × [row0, row1)`.
    pub fn rectangle(
        width: usize,
        height: usize,
        cols: std::ops::Range<usize>,
        rows: std::ops::Range<usize>,
    ) -> Self {
        let mut m = Self::none(width, height);
        for r in rows.start..rows.end.min(height) {
            for c in cols.start..cols.end.min(width) {
                m.excluded[r * width + c] = true;
            }
        }
        m
    }

    pub fn is_excluded(&self, col: usize, row: usize) -> bool {
        self.excluded[row * self.width + col]
    }

    pub fn included_count(&self) -> usize {
        self.excluded.iter().filter(|e| !**e).count()
    }
}
