//! Patch extraction with zero padding and forced-foreground batches.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::arch::PatchSize3D;
use crate::rng::CounterRng;
use crate::volume::{linear_index, LabelVolume, Volume};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SamplerError {
    ShapeMismatch { image: [usize; 3], labels: [usize; 3] },
    ZeroBatch,
}

impl fmt::Display for SamplerError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SamplerError::ShapeMismatch { image, labels } => {
                write!(f, "image shape {image:?} does not match label shape {labels:?}")
            }
            SamplerError::ZeroBatch => write!(f, "batch size must be positive"),
        }
    }
}

impl core::error::Error for SamplerError {}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchRequest {
    pub size: PatchSize3D,
    pub force_foreground: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub image: Volume,
    pub labels: LabelVolume,
    /// Position of the patch's first voxel in volume coordinates; may be
    /// negative when the patch hangs over the volume edge.
    pub origin: [i64; 3],
    /// Whether the origin was chosen around a foreground voxel.
    pub forced: bool,
}

impl Patch {
    pub fn contains_foreground(&self) -> bool {
        self.labels.labels().iter().any(|&l| l != 0)
    }
}

/// Image/label pair with a cached list of foreground voxel indices.
#[derive(Debug, Clone)]
pub struct PatchSource<'a> {
    image: &'a Volume,
    labels: &'a LabelVolume,
    foreground: Vec<usize>,
}

impl<'a> PatchSource<'a> {
    pub fn new(image: &'a Volume, labels: &'a LabelVolume) -> Result<Self, SamplerError> {
        if image.shape() != labels.shape() {
            return Err(SamplerError::ShapeMismatch { image: image.shape(), labels: labels.shape() });
        }
        let foreground = labels
            .labels()
            .iter()
            .enumerate()
            .filter_map(|(i, &l)| (l != 0).then_some(i))
            .collect();
        Ok(Self { image, labels, foreground })
    }

    pub fn shape(&self) -> [usize; 3] {
        self.image.shape()
    }

    pub fn foreground_voxels(&self) -> usize {
        self.foreground.len()
    }

    /// Extracts one patch of exactly `req.size`.
    ///
    /// With `force_foreground` and a non-empty label map, a foreground voxel
    /// is picked uniformly and the patch is centred on it, then shifted to
    /// stay as far inside the volume as possible. Otherwise the origin is
    /// uniform over all placements with maximal overlap.
    pub fn sample(&self, req: &PatchRequest, rng: &mut CounterRng) -> Patch {
        let shape = self.shape();
        let size = req.size.as_usize();
        let bounds: [(i64, i64); 3] = core::array::from_fn(|a| {
            let slack = shape[a] as i64 - size[a] as i64;
            (slack.min(0), slack.max(0))
        });
        let forced = req.force_foreground && !self.foreground.is_empty();
        let origin: [i64; 3] = if forced {
            let idx = self.foreground[rng.below(self.foreground.len() as u64) as usize];
            let centre = unravel(shape, idx);
            core::array::from_fn(|a| {
                let o = centre[a] as i64 - (size[a] / 2) as i64;
                o.clamp(bounds[a].0, bounds[a].1)
            })
        } else {
            core::array::from_fn(|a| rng.range_i64(bounds[a].0, bounds[a].1))
        };
        let (image, labels) = crop(self.image, self.labels, origin, req.size);
        Patch { image, labels, origin, forced }
    }

    /// `batch` patches of the same size; the first `ceil(batch / 2)` are
    /// forced to contain foreground.
    pub fn compose_batch(&self, size: PatchSize3D, batch: usize, rng: &mut CounterRng) -> Result<Vec<Patch>, SamplerError> {
        if batch == 0 {
            return Err(SamplerError::ZeroBatch);
        }
        let n_forced = batch.div_ceil(2);
        Ok((0..batch)
            .map(|i| {
                let req = PatchRequest { size, force_foreground: i < n_forced };
                self.sample(&req, rng)
            })
            .collect())
    }
}

pub fn sample_patch(
    image: &Volume,
    labels: &LabelVolume,
    req: &PatchRequest,
    rng: &mut CounterRng,
) -> Result<Patch, SamplerError> {
    Ok(PatchSource::new(image, labels)?.sample(req, rng))
}

pub fn compose_batch(
    image: &Volume,
    labels: &LabelVolume,
    size: PatchSize3D,
    batch: usize,
    rng: &mut CounterRng,
) -> Result<Vec<Patch>, SamplerError> {
    PatchSource::new(image, labels)?.compose_batch(size, batch, rng)
}

fn unravel(shape: [usize; 3], idx: usize) -> [usize; 3] {
    let z = idx % shape[2];
    let y = (idx / shape[2]) % shape[1];
    let x = idx / (shape[1] * shape[2]);
    [x, y, z]
}

/// Copies the window at `origin` of extent `size`; voxels outside the
/// volume are zero (label 0).
pub fn crop(image: &Volume, labels: &LabelVolume, origin: [i64; 3], size: PatchSize3D) -> (Volume, LabelVolume) {
    let shape = image.shape();
    let out_shape = size.as_usize();
    let n: usize = out_shape.iter().product();
    let mut data = vec![0.0f32; n];
    let mut labs = vec![0u8; n];
    // overlap of [origin, origin + size) with [0, shape) per axis, in patch coords
    let range = |a: usize| -> (usize, usize) {
        let lo = (-origin[a]).max(0) as usize;
        let hi = (shape[a] as i64 - origin[a]).clamp(0, out_shape[a] as i64) as usize;
        (lo, hi.max(lo))
    };
    let (x0, x1) = range(0);
    let (y0, y1) = range(1);
    let (z0, z1) = range(2);
    if z1 > z0 {
        let src_img = image.data();
        let src_lab = labels.labels();
        for px in x0..x1 {
            let vx = (px as i64 + origin[0]) as usize;
            for py in y0..y1 {
                let vy = (py as i64 + origin[1]) as usize;
                let vz = (z0 as i64 + origin[2]) as usize;
                let src = linear_index(shape, vx, vy, vz);
                let dst = linear_index(out_shape, px, py, z0);
                let len = z1 - z0;
                data[dst..dst + len].copy_from_slice(&src_img[src..src + len]);
                labs[dst..dst + len].copy_from_slice(&src_lab[src..src + len]);
            }
        }
    }
    (
        Volume::new(out_shape, data).expect("crop of a valid volume"),
        LabelVolume::new(out_shape, labs, labels.n_classes()).expect("crop of a valid label map"),
    )
}
