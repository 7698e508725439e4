//! Compares generated schedules with the published tables.

use std::fmt;

use pgps_core::curriculum::{build_plan, Scheme};
use pgps_core::{ArchitectureSpec, PatchSize3D};
use serde::Serialize;

use crate::io::{FixtureFile, FixtureTask};

/// Tasks whose published batch column is known not to follow the
/// backward-chained rule.
pub const DOCUMENTED_BATCH_EXCEPTIONS: &[&str] = &["hippocampus"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ColumnStatus {
    Pass,
    /// Mismatch on a task listed in [`DOCUMENTED_BATCH_EXCEPTIONS`].
    Exception { stage: usize, generated: String, published: String },
    Fail { stage: Option<usize>, generated: String, published: String },
}

impl ColumnStatus {
    pub fn is_pass(&self) -> bool {
        matches!(self, ColumnStatus::Pass)
    }
}

impl fmt::Display for ColumnStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ColumnStatus::Pass => write!(f, "PASS"),
            ColumnStatus::Exception { stage, generated, published } => write!(
                f,
                "EXCEPTION (documented override; first divergence at stage {stage}: rule gives {generated}, table has {published})"
            ),
            ColumnStatus::Fail { stage: Some(stage), generated, published } => {
                write!(f, "FAIL (first divergence at stage {stage}: generated {generated}, table has {published})")
            }
            ColumnStatus::Fail { stage: None, generated, published } => {
                write!(f, "FAIL (generated {generated}, table has {published})")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TaskVerdict {
    pub task: String,
    pub stages: usize,
    pub patches: ColumnStatus,
    pub batches: ColumnStatus,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Verification {
    pub tasks: Vec<TaskVerdict>,
}

impl Verification {
    pub fn patch_passes(&self) -> usize {
        self.tasks.iter().filter(|t| t.patches.is_pass()).count()
    }

    pub fn batch_passes(&self) -> usize {
        self.tasks.iter().filter(|t| t.batches.is_pass()).count()
    }

    pub fn batch_exceptions(&self) -> usize {
        self.tasks.iter().filter(|t| matches!(t.batches, ColumnStatus::Exception { .. })).count()
    }

    /// Every patch column matches, no undocumented batch mismatch, and at
    /// most one batch column is carried by an exception.
    pub fn passed(&self) -> bool {
        let n = self.tasks.len();
        !self.tasks.is_empty()
            && self.patch_passes() == n
            && self.batch_passes() + self.batch_exceptions() == n
            && self.batch_passes() + 1 >= n
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for t in &self.tasks {
            out.push_str(&format!(
                "{:<16} stages {:>2}  patches {}  batches {}\n",
                t.task, t.stages, t.patches, t.batches
            ));
        }
        out.push_str(&format!(
            "patch columns {}/{} match; batch columns {}/{} match, {} documented exception(s)\n",
            self.patch_passes(),
            self.tasks.len(),
            self.batch_passes(),
            self.tasks.len(),
            self.batch_exceptions()
        ));
        out.push_str(if self.passed() { "result: PASS\n" } else { "result: FAIL\n" });
        out
    }
}

pub fn verify_fixtures(file: &FixtureFile) -> Verification {
    Verification { tasks: file.tasks.iter().map(verify_task).collect() }
}

fn fail(generated: impl fmt::Display, published: impl fmt::Display) -> ColumnStatus {
    ColumnStatus::Fail { stage: None, generated: generated.to_string(), published: published.to_string() }
}

pub fn verify_task(task: &FixtureTask) -> TaskVerdict {
    let verdict = |patches, batches| TaskVerdict { task: task.name.clone(), stages: task.rows.len(), patches, batches };
    let Some(last) = task.rows.last() else {
        return verdict(fail("a schedule", "no rows"), fail("a schedule", "no rows"));
    };
    let spec = match ArchitectureSpec::new(task.name.clone(), task.poolings) {
        Ok(s) => s,
        Err(e) => return verdict(fail(&e, "valid poolings"), fail(&e, "valid poolings")),
    };
    let max = match PatchSize3D::new([last[1], last[2], last[3]]) {
        Ok(p) => p,
        Err(e) => return verdict(fail(&e, "valid maximal patch"), fail(&e, "valid maximal patch")),
    };
    let plan = match build_plan(&spec, max, Scheme::PgpsPlus, last[0], 0, 1) {
        Ok(p) => p,
        Err(e) => return verdict(fail(&e, "a legal schedule"), fail(&e, "a legal schedule")),
    };
    let published_patches: Vec<PatchSize3D> =
        task.rows.iter().map(|r| PatchSize3D::from_const([r[1], r[2], r[3]])).collect();
    let published_batches: Vec<u32> = task.rows.iter().map(|r| r[0]).collect();
    let patches = compare(&plan.patches(), &published_patches, false);
    let documented = DOCUMENTED_BATCH_EXCEPTIONS.contains(&task.name.as_str());
    let batches = compare(&plan.batches(), &published_batches, documented);
    verdict(patches, batches)
}

fn compare<T: PartialEq + fmt::Display>(generated: &[T], published: &[T], documented: bool) -> ColumnStatus {
    let n = generated.len().min(published.len());
    let Some(stage) = (0..n).find(|&i| generated[i] != published[i]).or((generated.len() != published.len()).then_some(n))
    else {
        return ColumnStatus::Pass;
    };
    let show = |col: &[T]| col.get(stage).map_or_else(|| "no stage".to_string(), ToString::to_string);
    let (generated, published) = (show(generated), show(published));
    if documented {
        ColumnStatus::Exception { stage, generated, published }
    } else {
        ColumnStatus::Fail { stage: Some(stage), generated, published }
    }
}
