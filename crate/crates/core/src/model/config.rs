use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const INITIAL_CHANNELS: usize = 16;
pub const BASE_WIDTH: f64 = 18.0;

/// Shape of an SE-PyramidNet built from bottleneck units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PyramidConfig {
    /// Total number of bottleneck units, split into three equal groups.
    pub units: usize,
    /// Widening factor: total growth of the bottleneck width across all units.
    pub widening: f64,
    pub num_classes: usize,
    /// Square input side (32 for CIFAR).
    pub input_size: usize,
    pub input_channels: usize,
    /// Attach a squeeze-and-excitation gate to every unit.
    pub squeeze_excitation: bool,
}

impl Default for PyramidConfig {
    fn default() -> Self {
        Self {
            units: 54,
            widening: 120.0,
            num_classes: 100,
            input_size: 32,
            input_channels: 3,
            squeeze_excitation: true,
        }
    }
}

impl PyramidConfig {
    pub fn new(units: usize, widening: f64, num_classes: usize) -> Self {
        Self {
            units,
            widening,
            num_classes,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.units == 0 || self.units % 3 != 0 {
            errs.push(format!("units (R) must be a positive multiple of 3, got {}", self.units));
        }
        if !(self.widening > 0.0) || !self.widening.is_finite() {
            errs.push(format!("widening factor must be positive, got {}", self.widening));
        }
        if self.num_classes < 2 {
            errs.push(format!("num_classes must be at least 2, got {}", self.num_classes));
        }
        if self.input_size == 0 || self.input_size % 4 != 0 {
            errs.push(format!("input size must be a positive multiple of 4, got {}", self.input_size));
        }
        if self.input_channels == 0 {
            errs.push("input channels must be positive".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(errs))
        }
    }

    /// Units that open groups 2 and 3 and therefore downsample.
    pub fn is_downsampling(&self, k: usize) -> bool {
        let g = self.units / 3;
        k == g + 1 || k == 2 * g + 1
    }

    /// Spatial side of the feature map leaving unit `k`.
    pub fn spatial_after(&self, k: usize) -> usize {
        let g = self.units / 3;
        let halvings = (k > g) as usize + (k > 2 * g) as usize;
        self.input_size >> halvings
    }

    pub fn fmd(&self, k: usize) -> Result<usize> {
        fmd(k, self.units, self.widening)
    }
}

/// Bottleneck width of unit `k`: `⌊18 + ω·(k−1)/R⌋`.
pub fn fmd(k: usize, units: usize, widening: f64) -> Result<usize> {
    if k == 0 || k > units {
        return Err(Error::OutOfRange {
            what: "unit index",
            detail: format!("k = {k} not in [1, {units}]"),
        });
    }
    Ok((BASE_WIDTH + widening * (k - 1) as f64 / units as f64).floor() as usize)
}

/// Hidden width of the excitation MLP: `max(1, ⌊D/4⌋)`.
pub fn se_width(depth: usize) -> usize {
    (depth / 4).max(1)
}
