//! Named task configurations: the ten decathlon tasks plus a scaled-down
//! Lung shape for desk-scale training.

use pgps_core::curriculum::{build_plan, CurriculumPlan, Scheme};
use pgps_core::fixtures::{self, TaskPreset};
use pgps_core::{ArchitectureSpec, PatchSize3D};

use crate::error::Result;

pub const TOY_LUNG: &str = "toy_lung";

#[derive(Debug, Clone)]
pub struct Preset {
    pub name: String,
    pub spec: ArchitectureSpec,
    pub max_patch: PatchSize3D,
    pub default_batch: u32,
    pub batch_override: Option<Vec<u32>>,
}

impl Preset {
    pub fn from_task(t: &TaskPreset) -> Self {
        Self {
            name: t.name.to_string(),
            spec: t.spec(),
            max_patch: t.max_patch(),
            default_batch: t.default_batch(),
            batch_override: t.batch_override.map(<[u32]>::to_vec),
        }
    }

    /// Lung divided by 8 on every axis: one pooling fewer per axis, so the
    /// stage count and voxel ratios are unchanged.
    pub fn toy_lung() -> Self {
        Self {
            name: TOY_LUNG.into(),
            spec: ArchitectureSpec::new(TOY_LUNG, [1, 2, 2]).expect("valid poolings"),
            max_patch: PatchSize3D::from_const([10, 24, 20]),
            default_batch: 2,
            batch_override: None,
        }
    }

    pub fn plan(&self, scheme: Scheme, epochs: u32, iterations: u32) -> Result<CurriculumPlan> {
        let plan = build_plan(&self.spec, self.max_patch, scheme, self.default_batch, epochs, iterations)?;
        Ok(match (scheme, &self.batch_override) {
            (Scheme::PgpsPlus, Some(b)) => plan.with_batch_override(b)?,
            _ => plan,
        })
    }
}

pub fn names() -> Vec<&'static str> {
    fixtures::TASKS.iter().map(|t| t.name).chain([TOY_LUNG]).collect()
}

pub fn resolve(name: &str) -> Option<Preset> {
    let key = name.to_ascii_lowercase().replace(['-', ' '], "_");
    if key == TOY_LUNG {
        return Some(Preset::toy_lung());
    }
    fixtures::task(&key).map(Preset::from_task)
}

#[cfg(test)]
mod tests {
    use super::*;
    use pgps_core::curriculum::voxels_shown_fraction;

    #[test]
    fn toy_lung_mirrors_lung() {
        let toy = Preset::toy_lung();
        let lung = resolve("lung").unwrap();
        let a = toy.plan(Scheme::Pgps, 26, 1).unwrap();
        let b = lung.plan(Scheme::Pgps, 26, 1).unwrap();
        assert_eq!(a.stages.len(), 13);
        for (s, t) in a.stages.iter().zip(&b.stages) {
            assert_eq!(s.patch.dims().map(|d| d * 8), t.patch.dims());
        }
        let base = toy.plan(Scheme::Cps, 26, 1).unwrap();
        let f = voxels_shown_fraction(&a, &base).unwrap();
        assert!((0.34..=0.36).contains(&f), "{f}");
    }

    #[test]
    fn resolve_normalizes() {
        assert_eq!(resolve("Hepatic-Vessel").unwrap().name, "hepatic_vessel");
        assert_eq!(resolve("toy-lung").unwrap().name, TOY_LUNG);
        assert!(resolve("kidney").is_none());
        assert_eq!(names().len(), 11);
    }
}
