//! Patch-size curricula: stage generation, batch planning, epoch allocation
//! and voxel accounting.
//!
//! All accounting is exact integer arithmetic; the only division happens
//! when a ratio is finally reported.

use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Reverse;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::arch::{ArchitectureSpec, PatchSize3D};

/// Batch size ceiling applied by the PGPS+ planner.
pub const MAX_BATCH: u32 = 24;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ScheduleError {
    MinExceedsMax { axis: usize },
    NotDivisible { axis: usize, span: u32, step: u32 },
    ZeroStep { axis: usize },
    IllegalMaxPatch { patch: PatchSize3D },
    NoStages,
    ZeroBatch { stage: usize },
    ZeroIterations,
    EpochMismatch { allocated: u64, total: u32 },
    NotSingleStage { stages: usize },
    NonIncreasingVoxels { stage: usize },
    BadIncrement { stage: usize },
    OverrideLength { expected: usize, got: usize },
    ZeroVoxelBaseline,
}

impl fmt::Display for ScheduleError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use ScheduleError::*;
        match self {
            MinExceedsMax { axis } => write!(f, "minimal patch exceeds maximal patch on axis {axis}"),
            NotDivisible { axis, span, step } => write!(
                f,
                "axis {axis}: span {span} between minimal and maximal patch is not a multiple of step {step}"
            ),
            ZeroStep { axis } => write!(f, "axis {axis} has a zero step"),
            IllegalMaxPatch { patch } => {
                write!(f, "maximal patch {patch} is not legal for the architecture")
            }
            NoStages => write!(f, "schedule has no stages"),
            ZeroBatch { stage } => write!(f, "stage {stage} has batch size 0"),
            ZeroIterations => write!(f, "iterations per epoch must be positive"),
            EpochMismatch { allocated, total } => write!(
                f,
                "stages allocate {allocated} epochs but the plan declares {total}"
            ),
            NotSingleStage { stages } => write!(f, "CPS plan must have exactly one stage, got {stages}"),
            NonIncreasingVoxels { stage } => {
                write!(f, "stage {stage} does not grow the patch voxel count")
            }
            BadIncrement { stage } => write!(
                f,
                "stage {stage} does not differ from its predecessor by exactly one axis step"
            ),
            OverrideLength { expected, got } => {
                write!(f, "batch override has {got} entries, plan has {expected} stages")
            }
            ZeroVoxelBaseline => write!(f, "baseline plan shows zero voxels"),
        }
    }
}

impl core::error::Error for ScheduleError {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scheme {
    #[serde(rename = "CPS")]
    Cps,
    #[serde(rename = "PGPS")]
    Pgps,
    #[serde(rename = "PGPS_PLUS")]
    PgpsPlus,
    #[serde(rename = "RPSS")]
    Rpss,
}

impl Scheme {
    pub const ALL: [Scheme; 4] = [Scheme::Cps, Scheme::Pgps, Scheme::PgpsPlus, Scheme::Rpss];

    /// Short lowercase name used on the command line.
    pub fn cli_name(&self) -> &'static str {
        match self {
            Scheme::Cps => "cps",
            Scheme::Pgps => "pgps",
            Scheme::PgpsPlus => "pgps+",
            Scheme::Rpss => "rpss",
        }
    }

    pub fn from_cli_name(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cps" => Some(Scheme::Cps),
            "pgps" => Some(Scheme::Pgps),
            "pgps+" | "pgps_plus" | "pgpsplus" => Some(Scheme::PgpsPlus),
            "rpss" => Some(Scheme::Rpss),
            _ => None,
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scheme::Cps => "CPS",
            Scheme::Pgps => "PGPS",
            Scheme::PgpsPlus => "PGPS+",
            Scheme::Rpss => "RPSS",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage {
    pub patch: PatchSize3D,
    pub batch: u32,
    pub epochs: u32,
}

impl Stage {
    /// Voxels in one input tensor, `batch * patch voxels`.
    pub fn tensor_voxels(&self) -> u64 {
        u64::from(self.batch) * self.patch.voxel_count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurriculumPlan {
    pub scheme: Scheme,
    pub default_batch: u32,
    pub total_epochs: u32,
    pub iterations_per_epoch: u32,
    pub stages: Vec<Stage>,
}

impl CurriculumPlan {
    /// Structural checks that do not need the architecture.
    pub fn validate(&self) -> Result<(), ScheduleError> {
        if self.stages.is_empty() {
            return Err(ScheduleError::NoStages);
        }
        if self.iterations_per_epoch == 0 {
            return Err(ScheduleError::ZeroIterations);
        }
        if self.scheme == Scheme::Cps && self.stages.len() != 1 {
            return Err(ScheduleError::NotSingleStage { stages: self.stages.len() });
        }
        if let Some(stage) = self.stages.iter().position(|s| s.batch == 0) {
            return Err(ScheduleError::ZeroBatch { stage });
        }
        let allocated: u64 = self.stages.iter().map(|s| u64::from(s.epochs)).sum();
        if allocated != u64::from(self.total_epochs) {
            return Err(ScheduleError::EpochMismatch { allocated, total: self.total_epochs });
        }
        for (k, pair) in self.stages.windows(2).enumerate() {
            if pair[1].patch.voxel_count() <= pair[0].patch.voxel_count() {
                return Err(ScheduleError::NonIncreasingVoxels { stage: k + 1 });
            }
        }
        Ok(())
    }

    /// Checks that consecutive stages grow by exactly one step on one axis.
    pub fn check_increments(&self, steps: [u32; 3]) -> Result<(), ScheduleError> {
        for (k, pair) in self.stages.windows(2).enumerate() {
            let (a, b) = (pair[0].patch, pair[1].patch);
            let changed: Vec<usize> = (0..3).filter(|&x| a.dim(x) != b.dim(x)).collect();
            let ok = changed.len() == 1 && b.dim(changed[0]) == a.dim(changed[0]) + steps[changed[0]];
            if !ok {
                return Err(ScheduleError::BadIncrement { stage: k + 1 });
            }
        }
        Ok(())
    }

    pub fn max_patch(&self) -> PatchSize3D {
        self.stages.last().map(|s| s.patch).expect("plan has stages")
    }

    pub fn patches(&self) -> Vec<PatchSize3D> {
        self.stages.iter().map(|s| s.patch).collect()
    }

    pub fn batches(&self) -> Vec<u32> {
        self.stages.iter().map(|s| s.batch).collect()
    }

    pub fn total_iterations(&self) -> u64 {
        u64::from(self.total_epochs) * u64::from(self.iterations_per_epoch)
    }

    /// Voxels shown over the whole run when stages are traversed in order.
    pub fn total_voxels(&self) -> u128 {
        self.stages
            .iter()
            .map(|s| u128::from(s.tensor_voxels()) * u128::from(s.epochs))
            .sum::<u128>()
            * u128::from(self.iterations_per_epoch)
    }

    /// Stage index active during `epoch` (0-based) for ordered schemes.
    pub fn stage_for_epoch(&self, epoch: u32) -> usize {
        let mut end = 0u32;
        for (k, s) in self.stages.iter().enumerate() {
            end += s.epochs;
            if epoch < end {
                return k;
            }
        }
        self.stages.len() - 1
    }

    /// Replaces the batch column, e.g. with a published table that does not
    /// follow the PGPS+ rule.
    pub fn with_batch_override(mut self, batches: &[u32]) -> Result<Self, ScheduleError> {
        if batches.len() != self.stages.len() {
            return Err(ScheduleError::OverrideLength {
                expected: self.stages.len(),
                got: batches.len(),
            });
        }
        for (s, &b) in self.stages.iter_mut().zip(batches) {
            s.batch = b;
        }
        self.validate()?;
        Ok(self)
    }
}

/// Patch sizes from `min` to `max`, growing one axis by one step at a time.
///
/// Axes are visited round-robin in a fixed order: larger target extent
/// first, then more pending increments, then lower axis index. Axes with no
/// increments left are skipped.
pub fn generate_stages(
    min: PatchSize3D,
    max: PatchSize3D,
    steps: [u32; 3],
) -> Result<Vec<PatchSize3D>, ScheduleError> {
    let mut remaining = [0u32; 3];
    for axis in 0..3 {
        if steps[axis] == 0 {
            return Err(ScheduleError::ZeroStep { axis });
        }
        if min.dim(axis) > max.dim(axis) {
            return Err(ScheduleError::MinExceedsMax { axis });
        }
        let span = max.dim(axis) - min.dim(axis);
        if !span.is_multiple_of(steps[axis]) {
            return Err(ScheduleError::NotDivisible { axis, span, step: steps[axis] });
        }
        remaining[axis] = span / steps[axis];
    }

    let mut order = [0usize, 1, 2];
    order.sort_by_key(|&a| (Reverse(max.dim(a)), Reverse(remaining[a]), a));

    let total: u32 = remaining.iter().sum();
    let mut out = Vec::with_capacity(total as usize + 1);
    let mut cur = min.dims();
    out.push(min);
    while remaining.iter().any(|&r| r > 0) {
        for &axis in &order {
            if remaining[axis] == 0 {
                continue;
            }
            cur[axis] += steps[axis];
            remaining[axis] -= 1;
            out.push(PatchSize3D::from_const(cur));
        }
    }
    Ok(out)
}

/// PGPS+ batch sizes, chained backwards from the final stage so that each
/// stage's tensor holds no more voxels than the next stage's tensor.
pub fn plan_pgps_plus_batches(stage_voxels: &[u64], default_batch: u32) -> Result<Vec<u32>, ScheduleError> {
    if stage_voxels.is_empty() {
        return Err(ScheduleError::NoStages);
    }
    if default_batch == 0 {
        return Err(ScheduleError::ZeroBatch { stage: stage_voxels.len() - 1 });
    }
    let n = stage_voxels.len();
    let mut batches = vec![default_batch; n];
    for k in (0..n - 1).rev() {
        let next = u128::from(batches[k + 1]) * u128::from(stage_voxels[k + 1]);
        let fit = next / u128::from(stage_voxels[k].max(1));
        let capped = fit.min(u128::from(MAX_BATCH)) as u32;
        batches[k] = capped.max(default_batch);
    }
    Ok(batches)
}

pub fn plan_pgps_batches(n_stages: usize, default_batch: u32) -> Vec<u32> {
    vec![default_batch; n_stages]
}

/// Equal epochs per stage; the remainder goes to the final stage.
pub fn allocate_epochs(total_epochs: u32, n_stages: usize) -> Vec<u32> {
    assert!(n_stages > 0, "at least one stage");
    let per = total_epochs / n_stages as u32;
    let mut epochs = vec![per; n_stages];
    epochs[n_stages - 1] += total_epochs - per * n_stages as u32;
    epochs
}

/// Voxels shown by `plan` relative to `baseline`.
pub fn voxels_shown_fraction(plan: &CurriculumPlan, baseline: &CurriculumPlan) -> Result<f64, ScheduleError> {
    let denom = baseline.total_voxels();
    if denom == 0 {
        return Err(ScheduleError::ZeroVoxelBaseline);
    }
    let num = plan.total_voxels();
    if num == denom {
        return Ok(1.0);
    }
    Ok(num as f64 / denom as f64)
}

pub fn build_plan(
    spec: &ArchitectureSpec,
    max_patch: PatchSize3D,
    scheme: Scheme,
    default_batch: u32,
    total_epochs: u32,
    iterations_per_epoch: u32,
) -> Result<CurriculumPlan, ScheduleError> {
    if !spec.is_legal_patch(&max_patch) {
        return Err(ScheduleError::IllegalMaxPatch { patch: max_patch });
    }
    if default_batch == 0 {
        return Err(ScheduleError::ZeroBatch { stage: 0 });
    }
    let patches = match scheme {
        Scheme::Cps => vec![max_patch],
        _ => generate_stages(spec.min_patch(), max_patch, spec.axis_steps())?,
    };
    let batches = match scheme {
        Scheme::PgpsPlus => {
            let voxels: Vec<u64> = patches.iter().map(|p| p.voxel_count()).collect();
            plan_pgps_plus_batches(&voxels, default_batch)?
        }
        _ => plan_pgps_batches(patches.len(), default_batch),
    };
    let epochs = allocate_epochs(total_epochs, patches.len());
    let stages = patches
        .into_iter()
        .zip(batches)
        .zip(epochs)
        .map(|((patch, batch), epochs)| Stage { patch, batch, epochs })
        .collect();
    let plan = CurriculumPlan {
        scheme,
        default_batch,
        total_epochs,
        iterations_per_epoch,
        stages,
    };
    plan.validate()?;
    plan.check_increments(spec.axis_steps())?;
    Ok(plan)
}
