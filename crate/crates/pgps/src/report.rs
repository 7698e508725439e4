//! Training reports: per-epoch records, accounting totals and the
//! configuration they were produced under.

use pgps_core::curriculum::{CurriculumPlan, Scheme};
use pgps_core::toynet::NetConfig;
use pgps_core::{CostModel, PatchSize3D};
use serde::{Deserialize, Serialize};

pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u32,
    /// `None` for RPSS, which draws a stage per iteration.
    pub stage_index: Option<usize>,
    pub patch: Option<PatchSize3D>,
    pub batch: Option<u32>,
    pub iterations: u32,
    /// Means over the epoch's iterations.
    pub loss: f64,
    pub soft_dice: f64,
    pub cross_entropy: f64,
    pub val_dice: Option<f64>,
    pub voxels: u64,
    pub wallclock_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub source: String,
    pub train_cases: usize,
    pub val_cases: usize,
    pub shapes: Vec<[usize; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigSnapshot {
    pub task: String,
    pub plan: CurriculumPlan,
    pub net: NetConfig,
    pub learning_rate: f64,
    pub momentum: f64,
    pub validate_every: u32,
    pub cost: CostModel,
    pub dataset: DatasetSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Totals {
    pub iterations: u64,
    /// Sum of batch x patch voxels over executed iterations.
    pub voxels_shown: u64,
    /// Relative to CPS at the maximal patch with the same epochs and
    /// iterations; `None` when that baseline is empty.
    pub voxels_shown_fraction: Option<f64>,
    /// Training time, excluding validation.
    pub wallclock_seconds: f64,
    pub validation_seconds: f64,
    pub estimated_co2_grams: f64,
    /// Runtime and emissions predicted from `voxels_shown` by the cost
    /// model's calibration, independent of this machine.
    pub modelled_runtime_seconds: f64,
    pub modelled_co2_grams: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub version: u32,
    pub scheme: Scheme,
    pub seed: u64,
    pub valid: bool,
    pub error: Option<String>,
    pub config: ConfigSnapshot,
    pub epochs: Vec<EpochRecord>,
    pub totals: Totals,
    /// Dice per validation case after the last completed epoch.
    pub final_case_dice: Vec<f64>,
    pub final_val_dice: Option<f64>,
}

impl TrainReport {
    /// Copy with every timing-derived field zeroed, for byte comparisons.
    pub fn masked(&self) -> Self {
        let mut r = self.clone();
        for e in &mut r.epochs {
            e.wallclock_seconds = 0.0;
        }
        r.totals.wallclock_seconds = 0.0;
        r.totals.validation_seconds = 0.0;
        r.totals.estimated_co2_grams = 0.0;
        r
    }

    pub fn csv_rows(&self) -> Vec<EpochCsvRow> {
        self.epochs
            .iter()
            .map(|e| EpochCsvRow {
                scheme: self.scheme.to_string(),
                seed: self.seed,
                epoch: e.epoch,
                stage_index: e.stage_index,
                patch: e.patch.map(|p| p.to_string()),
                batch: e.batch,
                iterations: e.iterations,
                loss: e.loss,
                soft_dice: e.soft_dice,
                cross_entropy: e.cross_entropy,
                val_dice: e.val_dice,
                voxels: e.voxels,
                wallclock_seconds: e.wallclock_seconds,
            })
            .collect()
    }

    /// Mean epoch time over epochs that ran the maximal patch.
    pub fn mean_max_patch_epoch_seconds(&self) -> Option<f64> {
        let max = self.config.plan.max_patch();
        let times: Vec<f64> =
            self.epochs.iter().filter(|e| e.patch == Some(max)).map(|e| e.wallclock_seconds).collect();
        (!times.is_empty()).then(|| times.iter().sum::<f64>() / times.len() as f64)
    }
}

/// Flat per-epoch row; optional fields are empty cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochCsvRow {
    pub scheme: String,
    pub seed: u64,
    pub epoch: u32,
    pub stage_index: Option<usize>,
    pub patch: Option<String>,
    pub batch: Option<u32>,
    pub iterations: u32,
    pub loss: f64,
    pub soft_dice: f64,
    pub cross_entropy: f64,
    pub val_dice: Option<f64>,
    pub voxels: u64,
    pub wallclock_seconds: f64,
}
