//! Progressive growing of patch size: curriculum planning and a desk-scale
//! 3D segmentation trainer.
//!
//! This crate is `no_std` and only needs `alloc`. File formats, timing and
//! the command line live in the `pgps` companion crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod arch;
pub mod cost;
pub mod curriculum;
pub mod fixtures;
pub mod rng;
pub mod sampler;
pub mod stats;
pub mod toynet;
pub mod volume;

pub use arch::{ArchError, ArchitectureSpec, PatchSize3D};
pub use cost::CostModel;
pub use curriculum::{CurriculumPlan, Scheme, ScheduleError, Stage};
pub use rng::CounterRng;
pub use volume::{LabelVolume, Volume, VolumeError};
