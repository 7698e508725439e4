//! Published PGPS+ input tensor tables for the ten Medical Segmentation
//! Decathlon tasks, as `[batch, width, height, depth]` rows.
//!
//! The final row of each table is the maximal (inference) patch, and its
//! batch size is the constant batch used by plain PGPS.

use crate::arch::{ArchitectureSpec, PatchSize3D};
use crate::curriculum::{build_plan, CurriculumPlan, Scheme, ScheduleError};

#[derive(Debug, Clone, Copy)]
pub struct TaskPreset {
    pub name: &'static str,
    pub poolings: [u8; 3],
    pub rows: &'static [[u32; 4]],
    /// Published PGPS+ batch column when it does not follow the
    /// backward-chained rule.
    pub batch_override: Option<&'static [u32]>,
}

impl TaskPreset {
    pub fn spec(&self) -> ArchitectureSpec {
        ArchitectureSpec::new(self.name, self.poolings).expect("preset poolings are valid")
    }

    pub fn max_patch(&self) -> PatchSize3D {
        let r = self.rows[self.rows.len() - 1];
        PatchSize3D::from_const([r[1], r[2], r[3]])
    }

    pub fn default_batch(&self) -> u32 {
        self.rows[self.rows.len() - 1][0]
    }

    pub fn published_patches(&self) -> impl Iterator<Item = PatchSize3D> + '_ {
        self.rows.iter().map(|r| PatchSize3D::from_const([r[1], r[2], r[3]]))
    }

    pub fn published_batches(&self) -> impl Iterator<Item = u32> + '_ {
        self.rows.iter().map(|r| r[0])
    }

    /// Plan built from the architecture rules alone.
    pub fn plan(&self, scheme: Scheme, total_epochs: u32, iterations_per_epoch: u32) -> Result<CurriculumPlan, ScheduleError> {
        build_plan(
            &self.spec(),
            self.max_patch(),
            scheme,
            self.default_batch(),
            total_epochs,
            iterations_per_epoch,
        )
    }

    /// Like [`TaskPreset::plan`], but PGPS+ uses the published batch column
    /// when the preset carries an override.
    pub fn plan_with_overrides(
        &self,
        scheme: Scheme,
        total_epochs: u32,
        iterations_per_epoch: u32,
    ) -> Result<CurriculumPlan, ScheduleError> {
        let plan = self.plan(scheme, total_epochs, iterations_per_epoch)?;
        match (scheme, self.batch_override) {
            (Scheme::PgpsPlus, Some(batches)) => plan.with_batch_override(batches),
            _ => Ok(plan),
        }
    }
}

pub fn task(name: &str) -> Option<&'static TaskPreset> {
    let key = name.to_ascii_lowercase().replace(['-', ' '], "_");
    TASKS.iter().find(|t| t.name == key)
}

const BRAIN: &[[u32; 4]] = &[
    [24, 64, 32, 32],
    [12, 64, 64, 32],
    [6, 64, 64, 64],
    [4, 96, 64, 64],
    [3, 96, 96, 64],
    [2, 96, 96, 96],
    [2, 128, 96, 96],
    [2, 128, 128, 96],
    [2, 128, 128, 128],
];

const HEART: &[[u32; 4]] = &[
    [24, 32, 32, 32],
    [12, 32, 64, 32],
    [6, 32, 64, 64],
    [4, 48, 64, 64],
    [3, 48, 96, 64],
    [2, 48, 96, 96],
    [2, 64, 96, 96],
    [2, 64, 128, 96],
    [2, 64, 128, 128],
    [2, 80, 128, 128],
    [2, 80, 160, 128],
    [2, 80, 160, 160],
    [2, 80, 192, 160],
];

const LIVER: &[[u32; 4]] = BRAIN;

const HIPPOCAMPUS: &[[u32; 4]] = &[
    [24, 16, 8, 8],
    [12, 16, 16, 8],
    [9, 16, 16, 16],
    [9, 24, 16, 16],
    [9, 24, 24, 16],
    [9, 24, 24, 24],
    [9, 32, 24, 24],
    [9, 32, 32, 24],
    [9, 32, 32, 32],
    [9, 40, 32, 32],
    [9, 40, 40, 32],
    [9, 40, 40, 40],
    [9, 40, 48, 40],
    [9, 40, 56, 40],
];

const HIPPOCAMPUS_BATCHES: &[u32] = &[24, 12, 9, 9, 9, 9, 9, 9, 9, 9, 9, 9, 9, 9];

const PROSTATE: &[[u32; 4]] = &[
    [24, 8, 64, 64],
    [12, 8, 128, 64],
    [6, 8, 128, 128],
    [4, 12, 128, 128],
    [3, 12, 192, 128],
    [2, 12, 192, 192],
    [2, 16, 192, 192],
    [2, 16, 256, 192],
    [2, 16, 256, 256],
    [2, 20, 256, 256],
    [2, 20, 320, 256],
];

const LUNG: &[[u32; 4]] = HEART;

const PANCREAS: &[[u32; 4]] = &[
    [24, 16, 32, 32],
    [12, 16, 64, 32],
    [6, 16, 64, 64],
    [4, 24, 64, 64],
    [3, 24, 96, 64],
    [2, 24, 96, 96],
    [2, 32, 96, 96],
    [2, 32, 128, 96],
    [2, 32, 128, 128],
    [2, 40, 128, 128],
    [2, 40, 160, 128],
    [2, 40, 160, 160],
    [2, 40, 192, 160],
    [2, 40, 192, 192],
    [2, 40, 224, 192],
];

const HEPATIC_VESSEL: &[[u32; 4]] = &[
    [24, 32, 32, 32],
    [12, 32, 64, 32],
    [6, 32, 64, 64],
    [4, 48, 64, 64],
    [3, 48, 96, 64],
    [2, 48, 96, 96],
    [2, 64, 96, 96],
    [2, 64, 128, 96],
    [2, 64, 128, 128],
    [2, 64, 160, 128],
    [2, 64, 160, 160],
    [2, 64, 192, 160],
    [2, 64, 192, 192],
];

const SPLEEN: &[[u32; 4]] = &[
    [24, 32, 32, 32],
    [12, 32, 64, 32],
    [6, 32, 64, 64],
    [4, 48, 64, 64],
    [3, 48, 96, 64],
    [2, 48, 96, 96],
    [2, 64, 96, 96],
    [2, 64, 128, 96],
    [2, 64, 128, 128],
    [2, 64, 160, 128],
    [2, 64, 160, 160],
    [2, 64, 192, 160],
];

const COLON: &[[u32; 4]] = &[
    [24, 16, 32, 32],
    [12, 16, 64, 32],
    [6, 16, 64, 64],
    [4, 24, 64, 64],
    [3, 24, 96, 64],
    [2, 24, 96, 96],
    [2, 32, 96, 96],
    [2, 32, 128, 96],
    [2, 32, 128, 128],
    [2, 40, 128, 128],
    [2, 40, 160, 128],
    [2, 40, 160, 160],
    [2, 48, 160, 160],
    [2, 48, 192, 160],
    [2, 56, 192, 160],
];

const fn preset(name: &'static str, poolings: [u8; 3], rows: &'static [[u32; 4]]) -> TaskPreset {
    TaskPreset { name, poolings, rows, batch_override: None }
}

pub static TASKS: [TaskPreset; 10] = [
    preset("brain", [5, 5, 5], BRAIN),
    preset("heart", [4, 5, 5], HEART),
    preset("liver", [5, 5, 5], LIVER),
    TaskPreset {
        name: "hippocampus",
        poolings: [3, 3, 3],
        rows: HIPPOCAMPUS,
        batch_override: Some(HIPPOCAMPUS_BATCHES),
    },
    preset("prostate", [2, 6, 6], PROSTATE),
    preset("lung", [4, 5, 5], LUNG),
    preset("pancreas", [3, 5, 5], PANCREAS),
    preset("hepatic_vessel", [4, 5, 5], HEPATIC_VESSEL),
    preset("spleen", [4, 5, 5], SPLEEN),
    preset("colon", [3, 5, 5], COLON),
];
