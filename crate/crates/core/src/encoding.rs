//! Sinusoidal positional encoding with a coarse-to-fine frequency gate.
//!
//! Band `k` contributes `w_k(alpha) * [sin(2^k π x), cos(2^k π x)]`, where the
//! gate `w_k` ramps from 0 to 1 as `alpha` sweeps across `[k, k + 1)`.

use serde::{Deserialize, Serialize};

use std::f64::consts::PI;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncodingConfig {
    pub position_bands: usize,
    pub direction_bands: usize,
    pub include_raw: bool,
}

impl Default for EncodingConfig {
    fn default() -> Self {
        Self {
            position_bands: 10,
            direction_bands: 4,
            include_raw: true,
        }
    }
}

impl EncodingConfig {
    pub fn validate(&self) -> crate::Result<()> {
        if self.position_bands == 0 {
            return Err(crate::Error::invalid("position_bands must be >= 1"));
        }
        Ok(())
    }

    pub fn position_dim(&self) -> usize {
        encoded_dim(3, self.position_bands, self.include_raw)
    }

    pub fn direction_dim(&self) -> usize {
        encoded_dim(3, self.direction_bands, self.include_raw)
    }
}

/// Number of open frequency bands, possibly fractional.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Default, Serialize, Deserialize)]
pub struct Alpha(pub f64);

impl Alpha {
    /// Every band fully open for an encoding with `bands` bands.
    pub fn full(bands: usize) -> Self {
        Alpha(bands as f64)
    }
}

pub fn coarse_to_fine_weight(alpha: Alpha, band: usize) -> f64 {
    let x = alpha.0 - band as f64;
    if x < 0.0 {
        0.0
    } else if x < 1.0 {
        0.5 * (1.0 - (x * PI).cos())
    } else {
        1.0
    }
}

pub fn encoded_dim(input_dim: usize, bands: usize, include_raw: bool) -> usize {
    input_dim * (2 * bands + usize::from(include_raw))
}

/// Precomputed gate weights and frequencies for one alpha.
#[derive(Debug, Clone)]
pub struct BandGate {
    weights: Vec<f64>,
    frequencies: Vec<f64>,
    include_raw: bool,
}

impl BandGate {
    pub fn new(bands: usize, include_raw: bool, alpha: Alpha) -> Self {
        Self {
            weights: (0..bands).map(|k| coarse_to_fine_weight(alpha, k)).collect(),
            frequencies: (0..bands).map(|k| (1u64 << k) as f64 * PI).collect(),
            include_raw,
        }
    }

    pub fn output_dim(&self, input_dim: usize) -> usize {
        encoded_dim(input_dim, self.weights.len(), self.include_raw)
    }

    /// Writes the encoding of `x` into `out` (length `output_dim(x.len())`).
    pub fn encode_into(&self, x: &[f64], out: &mut [f64]) {
        let d = x.len();
        debug_assert_eq!(out.len(), self.output_dim(d));
        let mut offset = 0;
        if self.include_raw {
            out[..d].copy_from_slice(x);
            offset = d;
        }
        out[offset..].iter_mut().for_each(|v| *v = 0.0);
        // gates are non-increasing in k, so bands past the last open one
        // stay zero
        let Some(top) = self.weights.iter().rposition(|w| *w != 0.0) else {
            return;
        };
        for (i, xi) in x.iter().enumerate() {
            // double-angle recurrence: sin/cos of 2^k·π·x from the base band
            let (mut s, mut c) = (PI * xi).sin_cos();
            for k in 0..=top {
                let at = offset + 2 * d * k;
                out[at + i] = self.weights[k] * s;
                out[at + d + i] = self.weights[k] * c;
                (s, c) = (2.0 * s * c, (c - s) * (c + s));
            }
        }
    }

    pub fn encode(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.output_dim(x.len())];
        self.encode_into(x, &mut out);
        out
    }

    /// Adds `d out / d x` contracted with `grad_out` into `grad_x`.
    pub fn accumulate_backward(&self, x: &[f64], grad_out: &[f64], grad_x: &mut [f64]) {
        let d = x.len();
        debug_assert_eq!(grad_out.len(), self.output_dim(d));
        let mut offset = 0;
        if self.include_raw {
            for i in 0..d {
                grad_x[i] += grad_out[i];
            }
            offset = d;
        }
        let Some(top) = self.weights.iter().rposition(|w| *w != 0.0) else {
            return;
        };
        for (i, xi) in x.iter().enumerate() {
            let (mut s, mut c) = (PI * xi).sin_cos();
            for k in 0..=top {
                let at = offset + 2 * d * k;
                let (w, f) = (self.weights[k], self.frequencies[k]);
                grad_x[i] += w * f * (c * grad_out[at + i] - s * grad_out[at + d + i]);
                (s, c) = (2.0 * s * c, (c - s) * (c + s));
            }
        }
    }
}

/// Encodes `x` with `bands` gated frequency bands.
pub fn positional_encode(x: &[f64], bands: usize, include_raw: bool, alpha: Alpha) -> Vec<f64> {
    BandGate::new(bands, include_raw, alpha).encode(x)
}
