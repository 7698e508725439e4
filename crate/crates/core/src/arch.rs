//! Architecture constraints on legal patch sizes.
//!
//! A fully convolutional encoder with `p` stride-2 poolings on an axis can
//! only process extents that are multiples of `2^p` on that axis. Axis order
//! is always width, height, depth.

use alloc::string::String;
use core::fmt;

use serde::{Deserialize, Serialize};

/// Largest pooling count accepted per axis.
pub const MAX_POOLINGS: u8 = 8;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ArchError {
    ZeroDim { axis: usize },
    VoxelOverflow,
    TooManyPoolings { axis: usize, poolings: u8 },
    IllegalOverride { patch: PatchSize3D },
}

impl fmt::Display for ArchError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ArchError::ZeroDim { axis } => write!(f, "patch dimension on axis {axis} is zero"),
            ArchError::VoxelOverflow => write!(f, "patch voxel count overflows u64"),
            ArchError::TooManyPoolings { axis, poolings } => write!(
                f,
                "axis {axis} has {poolings} poolings, at most {MAX_POOLINGS} are supported"
            ),
            ArchError::IllegalOverride { patch } => write!(
                f,
                "minimal patch override {patch} is not a multiple of the axis steps"
            ),
        }
    }
}

impl core::error::Error for ArchError {}

/// Spatial extent of a training patch in voxels, `[width, height, depth]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "[u32; 3]", into = "[u32; 3]")]
pub struct PatchSize3D([u32; 3]);

impl PatchSize3D {
    pub fn new(dims: [u32; 3]) -> Result<Self, ArchError> {
        if let Some(axis) = dims.iter().position(|&d| d == 0) {
            return Err(ArchError::ZeroDim { axis });
        }
        dims.iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(u64::from(d)))
            .ok_or(ArchError::VoxelOverflow)?;
        Ok(Self(dims))
    }

    /// Panics on invalid dims; meant for literals.
    pub const fn from_const(dims: [u32; 3]) -> Self {
        assert!(dims[0] > 0 && dims[1] > 0 && dims[2] > 0);
        Self(dims)
    }

    #[inline]
    pub fn dims(&self) -> [u32; 3] {
        self.0
    }

    #[inline]
    pub fn dim(&self, axis: usize) -> u32 {
        self.0[axis]
    }

    #[inline]
    pub fn as_usize(&self) -> [usize; 3] {
        self.0.map(|d| d as usize)
    }

    pub fn voxel_count(&self) -> u64 {
        self.0.iter().map(|&d| u64::from(d)).product()
    }

    pub fn elementwise_max(&self, other: &Self) -> Self {
        Self(core::array::from_fn(|a| self.0[a].max(other.0[a])))
    }

    /// True if every axis of `self` is `<=` the same axis of `other`.
    pub fn fits_within(&self, other: &Self) -> bool {
        (0..3).all(|a| self.0[a] <= other.0[a])
    }
}

impl TryFrom<[u32; 3]> for PatchSize3D {
    type Error = ArchError;

    fn try_from(dims: [u32; 3]) -> Result<Self, Self::Error> {
        Self::new(dims)
    }
}

impl From<PatchSize3D> for [u32; 3] {
    fn from(p: PatchSize3D) -> Self {
        p.0
    }
}

impl fmt::Display for PatchSize3D {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.0[0], self.0[1], self.0[2])
    }
}

#[derive(Deserialize)]
struct RawSpec {
    name: String,
    poolings_per_axis: [u8; 3],
    #[serde(default)]
    min_patch_override: Option<PatchSize3D>,
}

/// Per-axis pooling counts of a fully convolutional network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawSpec")]
pub struct ArchitectureSpec {
    name: String,
    poolings_per_axis: [u8; 3],
    #[serde(skip_serializing_if = "Option::is_none")]
    min_patch_override: Option<PatchSize3D>,
}

impl TryFrom<RawSpec> for ArchitectureSpec {
    type Error = ArchError;

    fn try_from(raw: RawSpec) -> Result<Self, Self::Error> {
        let spec = Self::new(raw.name, raw.poolings_per_axis)?;
        match raw.min_patch_override {
            Some(p) => spec.with_min_patch_override(p),
            None => Ok(spec),
        }
    }
}

impl ArchitectureSpec {
    pub fn new(name: impl Into<String>, poolings_per_axis: [u8; 3]) -> Result<Self, ArchError> {
        for (axis, &poolings) in poolings_per_axis.iter().enumerate() {
            if poolings > MAX_POOLINGS {
                return Err(ArchError::TooManyPoolings { axis, poolings });
            }
        }
        Ok(Self {
            name: name.into(),
            poolings_per_axis,
            min_patch_override: None,
        })
    }

    /// Replaces the derived minimal patch. The override must itself be a
    /// multiple of the axis steps.
    pub fn with_min_patch_override(mut self, patch: PatchSize3D) -> Result<Self, ArchError> {
        let steps = self.axis_steps();
        if (0..3).any(|a| !patch.dim(a).is_multiple_of(steps[a])) {
            return Err(ArchError::IllegalOverride { patch });
        }
        self.min_patch_override = Some(patch);
        Ok(self)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn poolings_per_axis(&self) -> [u8; 3] {
        self.poolings_per_axis
    }

    pub fn min_patch_override(&self) -> Option<PatchSize3D> {
        self.min_patch_override
    }

    /// Smallest legal increment per axis, `2^poolings`.
    pub fn axis_steps(&self) -> [u32; 3] {
        self.poolings_per_axis.map(|p| 1u32 << p)
    }

    /// Smallest patch the network is trained on: two steps on the first
    /// axis, one step on the others, unless overridden.
    pub fn min_patch(&self) -> PatchSize3D {
        if let Some(p) = self.min_patch_override {
            return p;
        }
        let [s0, s1, s2] = self.axis_steps();
        PatchSize3D([2 * s0, s1, s2])
    }

    pub fn is_legal_patch(&self, patch: &PatchSize3D) -> bool {
        let steps = self.axis_steps();
        let min = self.min_patch();
        (0..3).all(|a| patch.dim(a).is_multiple_of(steps[a]) && patch.dim(a) >= min.dim(a))
    }
}
