//! Runtime extrapolation and a parametric CO2-equivalent estimator.

use core::fmt;

use serde::{Deserialize, Serialize};

/// Lung CPS reference run: 13.55 h of training for 5.59 kg CO2-eq.
pub const LUNG_CPS_HOURS: f64 = 13.55;
pub const LUNG_CPS_GRAMS: f64 = 5590.0;
/// Voxels shown by the Lung CPS run: batch 2, 80x192x160, 250 x 1000 iterations.
pub const LUNG_CPS_VOXELS: f64 = 2.0 * 80.0 * 192.0 * 160.0 * 250.0 * 1000.0;
const DEFAULT_POWER_WATTS: f64 = 1000.0;

#[derive(Debug, Clone, PartialEq)]
pub struct CostError(pub &'static str);

impl fmt::Display for CostError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid cost model: {}", self.0)
    }
}

impl core::error::Error for CostError {}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub device_power_watts: f64,
    pub grid_intensity_g_per_kwh: f64,
    /// Seconds of training per input voxel; used to predict runtime from a
    /// voxel budget.
    pub seconds_per_voxel: f64,
}

impl Default for CostModel {
    /// Calibrated to the Lung CPS reference run.
    fn default() -> Self {
        Self::calibrated_to(LUNG_CPS_HOURS, LUNG_CPS_GRAMS, DEFAULT_POWER_WATTS, LUNG_CPS_VOXELS)
            .expect("reference calibration is valid")
    }
}

impl CostModel {
    pub fn new(device_power_watts: f64, grid_intensity_g_per_kwh: f64, seconds_per_voxel: f64) -> Result<Self, CostError> {
        let m = Self { device_power_watts, grid_intensity_g_per_kwh, seconds_per_voxel };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), CostError> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !ok(self.device_power_watts) {
            return Err(CostError("device_power_watts must be positive"));
        }
        if !ok(self.grid_intensity_g_per_kwh) {
            return Err(CostError("grid_intensity_g_per_kwh must be positive"));
        }
        if !ok(self.seconds_per_voxel) {
            return Err(CostError("seconds_per_voxel must be positive"));
        }
        Ok(())
    }

    /// Picks the grid intensity so that `hours` of training at
    /// `power_watts` emits `grams`, and the voxel rate so that `voxels`
    /// take `hours`.
    pub fn calibrated_to(hours: f64, grams: f64, power_watts: f64, voxels: f64) -> Result<Self, CostError> {
        let intensity = grams / (hours * power_watts / 1000.0);
        Self::new(power_watts, intensity, hours * 3600.0 / voxels)
    }

    /// Grams CO2-eq for `seconds` of wall-clock training.
    pub fn co2_grams(&self, seconds: f64) -> f64 {
        let hours = seconds / 3600.0;
        hours * (self.device_power_watts / 1000.0) * self.grid_intensity_g_per_kwh
    }

    pub fn runtime_for_voxels(&self, voxels: f64) -> f64 {
        voxels * self.seconds_per_voxel
    }
}

/// CPS runtime estimated as one measured max-patch epoch times the epoch count.
pub fn extrapolate_cps_runtime(epoch_seconds: f64, n_epochs: u32) -> f64 {
    epoch_seconds * f64::from(n_epochs)
}
