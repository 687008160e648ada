//! Numeric tolerances shared across the pipeline.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    /// Allowed deviation of a normalized vector's L2 norm from 1.
    pub unit_norm: f64,
    /// Vectors with an L2 norm at or below this cannot be normalized.
    pub min_norm: f64,
    /// Maximum |mean calibrated probability - alpha|.
    pub calibration: f64,
    /// Half-width of the intercept-shift search interval.
    pub shift_bound: f64,
    /// |S| at or below this maps to the neutral class when comparing signs.
    pub neutral_band: f64,
}

impl Tolerances {
    pub const DEFAULT: Tolerances = Tolerances {
        unit_norm: 1e-9,
        min_norm: 1e-12,
        calibration: 1e-6,
        shift_bound: 30.0,
        neutral_band: 0.05,
    };
}

impl Default for Tolerances {
    fn default() -> Self {
        Self::DEFAULT
    }
}
