// SPDX-License-Identifier: Apache-2.0

use std::f64::consts::TAU;

use crate::data_ingest::normalize_angle;

/// Heading as a bin over `[0, 2pi)` plus a residual normalised by half the
/// bin width, so the residual of a bin spans `[-1, 1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RotBinCodec {
    pub bins: usize,
}

impl Default for RotBinCodec {
    fn default() -> Self {
        Self { bins: 12 }
    }
}

impl RotBinCodec {
    pub fn new(bins: usize) -> Self {
        assert!(bins >= 2, "need at least two rotation bins");
        Self { bins }
    }

    pub fn width(&self) -> f64 {
        TAU / self.bins as f64
    }

    pub fn encode(&self, theta: f64) -> (usize, f64) {
        let t = normalize_angle(theta);
        let w = self.width();
        let bin = ((t / w).floor() as usize).min(self.bins - 1);
        let res = (t - (bin as f64 + 0.5) * w) / (w / 2.0);
        (bin, res)
    }

    pub fn decode(&self, bin: usize, res: f64) -> f64 {
        let w = self.width();
        normalize_angle((bin as f64 + 0.5) * w + res * w / 2.0)
    }
}
