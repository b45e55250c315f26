use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box with coordinates normalized to the image size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoundingBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = Self { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    pub fn full() -> Self {
        Self { x1: 0.0, y1: 0.0, x2: 1.0, y2: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let coords = [self.x1, self.y1, self.x2, self.y2];
        if coords.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::InvalidBox(format!("coordinate outside [0,1]: {coords:?}")));
        }
        if self.x1 > self.x2 || self.y1 > self.y2 {
            return Err(Error::InvalidBox(format!("corners out of order: {coords:?}")));
        }
        Ok(())
    }

    pub fn coords(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

/// Bin index for one normalized coordinate. `f64::round` rounds half away from zero.
pub fn coordinate_bin(c: f64, bins: usize) -> usize {
    if bins <= 1 {
        return 0;
    }
    (c * (bins - 1) as f64).round() as usize
}

pub fn bin_coordinate(bin: usize, bins: usize) -> f64 {
    if bins <= 1 {
        return 0.0;
    }
    bin as f64 / (bins - 1) as f64
}
