//! Dense 3D image and label containers, their byte format, and a synthetic
//! blob generator.
//!
//! Layout is row-major over `[w, h, d]`: the depth index varies fastest.
//!
//! Byte format (all integers little-endian):
//!
//! ```text
//! image:  "PGPSVOL1" + 8 zero bytes | w:u64 h:u64 d:u64 | w*h*d f32
//! labels: "PGPSLAB1" + 8 zero bytes | w:u64 h:u64 d:u64 | n_classes:u64 | w*h*d u8
//! ```

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::rng::CounterRng;

pub const VOLUME_MAGIC: [u8; 16] = *b"PGPSVOL1\0\0\0\0\0\0\0\0";
pub const LABEL_MAGIC: [u8; 16] = *b"PGPSLAB1\0\0\0\0\0\0\0\0";
const HEADER_LEN: usize = 16 + 24;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum VolumeError {
    BadMagic { offset: usize },
    Truncated { offset: usize, needed: usize },
    TrailingBytes { offset: usize },
    DimOverflow { offset: usize },
    ZeroDim { offset: usize },
    NonFinite { offset: usize },
    LabelOutOfRange { offset: usize, label: u8 },
    BadClassCount { offset: usize },
    LengthMismatch { expected: usize, got: usize },
    ShapeMismatch { image: [usize; 3], labels: [usize; 3] },
    Geometry,
}

impl fmt::Display for VolumeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use VolumeError::*;
        match self {
            BadMagic { offset } => write!(f, "bad magic at byte {offset}"),
            Truncated { offset, needed } => {
                write!(f, "truncated payload: need {needed} more bytes at byte {offset}")
            }
            TrailingBytes { offset } => write!(f, "unexpected trailing bytes at byte {offset}"),
            DimOverflow { offset } => write!(f, "dimension product overflows at byte {offset}"),
            ZeroDim { offset } => write!(f, "zero dimension at byte {offset}"),
            NonFinite { offset } => write!(f, "non-finite voxel value at byte {offset}"),
            LabelOutOfRange { offset, label } => {
                write!(f, "label {label} out of range at byte {offset}")
            }
            BadClassCount { offset } => write!(f, "class count must be in [2, 256] at byte {offset}"),
            LengthMismatch { expected, got } => {
                write!(f, "data length {got} does not match shape volume {expected}")
            }
            ShapeMismatch { image, labels } => {
                write!(f, "image shape {image:?} does not match label shape {labels:?}")
            }
            Geometry => write!(f, "blob radii do not fit inside the volume"),
        }
    }
}

impl core::error::Error for VolumeError {}

fn shape_len(shape: [usize; 3]) -> Option<usize> {
    shape[0].checked_mul(shape[1])?.checked_mul(shape[2])
}

#[inline]
pub fn linear_index(shape: [usize; 3], x: usize, y: usize, z: usize) -> usize {
    (x * shape[1] + y) * shape[2] + z
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    shape: [usize; 3],
    data: Vec<f32>,
}

impl Volume {
    pub fn new(shape: [usize; 3], data: Vec<f32>) -> Result<Self, VolumeError> {
        let expected = shape_len(shape).ok_or(VolumeError::DimOverflow { offset: 0 })?;
        if shape.contains(&0) {
            return Err(VolumeError::ZeroDim { offset: 0 });
        }
        if data.len() != expected {
            return Err(VolumeError::LengthMismatch { expected, got: data.len() });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(VolumeError::NonFinite { offset: i * 4 });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: [usize; 3]) -> Self {
        let n = shape_len(shape).expect("shape fits in usize");
        Self { shape, data: vec![0.0; n] }
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[linear_index(self.shape, x, y, z)]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.data.len() * 4);
        out.extend_from_slice(&VOLUME_MAGIC);
        for d in self.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, VolumeError> {
        let (shape, n) = read_header(bytes, &VOLUME_MAGIC)?;
        let mut off = HEADER_LEN;
        let needed = n.checked_mul(4).ok_or(VolumeError::DimOverflow { offset: 16 })?;
        take(bytes, off, needed)?;
        let mut data = Vec::with_capacity(n);
        for chunk in bytes[off..off + needed].chunks_exact(4) {
            let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
            if !v.is_finite() {
                return Err(VolumeError::NonFinite { offset: off });
            }
            data.push(v);
            off += 4;
        }
        if bytes.len() > off {
            return Err(VolumeError::TrailingBytes { offset: off });
        }
        Ok(Self { shape, data })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVolume {
    shape: [usize; 3],
    labels: Vec<u8>,
    n_classes: u16,
}

impl LabelVolume {
    pub fn new(shape: [usize; 3], labels: Vec<u8>, n_classes: u16) -> Result<Self, VolumeError> {
        let expected = shape_len(shape).ok_or(VolumeError::DimOverflow { offset: 0 })?;
        if shape.contains(&0) {
            return Err(VolumeError::ZeroDim { offset: 0 });
        }
        if !(2..=256).contains(&n_classes) {
            return Err(VolumeError::BadClassCount { offset: 0 });
        }
        if labels.len() != expected {
            return Err(VolumeError::LengthMismatch { expected, got: labels.len() });
        }
        if let Some(i) = labels.iter().position(|&l| u16::from(l) >= n_classes) {
            return Err(VolumeError::LabelOutOfRange { offset: i, label: labels[i] });
        }
        Ok(Self { shape, labels, n_classes })
    }

    pub fn background(shape: [usize; 3], n_classes: u16) -> Self {
        let n = shape_len(shape).expect("shape fits in usize");
        Self::new(shape, vec![0; n], n_classes).expect("valid background")
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn n_classes(&self) -> u16 {
        self.n_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> u8 {
        self.labels[linear_index(self.shape, x, y, z)]
    }

    pub fn foreground_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l != 0).count()
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.foreground_count() as f64 / self.labels.len() as f64
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 8 + self.labels.len());
        out.extend_from_slice(&LABEL_MAGIC);
        for d in self.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&u64::from(self.n_classes).to_le_bytes());
        out.extend_from_slice(&self.labels);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, VolumeError> {
        let (shape, n) = read_header(bytes, &LABEL_MAGIC)?;
        let k = read_u64(bytes, HEADER_LEN)?;
        if !(2..=256).contains(&k) {
            return Err(VolumeError::BadClassCount { offset: HEADER_LEN });
        }
        let off = HEADER_LEN + 8;
        take(bytes, off, n)?;
        let labels = bytes[off..off + n].to_vec();
        if let Some(i) = labels.iter().position(|&l| u64::from(l) >= k) {
            return Err(VolumeError::LabelOutOfRange { offset: off + i, label: labels[i] });
        }
        if bytes.len() > off + n {
            return Err(VolumeError::TrailingBytes { offset: off + n });
        }
        Ok(Self { shape, labels, n_classes: k as u16 })
    }
}

fn take(bytes: &[u8], offset: usize, len: usize) -> Result<(), VolumeError> {
    let end = offset.checked_add(len).ok_or(VolumeError::DimOverflow { offset })?;
    if bytes.len() < end {
        return Err(VolumeError::Truncated { offset: bytes.len(), needed: end - bytes.len() });
    }
    Ok(())
}

fn read_u64(bytes: &[u8], offset: usize) -> Result<u64, VolumeError> {
    take(bytes, offset, 8)?;
    let mut b = [0u8; 8];
    b.copy_from_slice(&bytes[offset..offset + 8]);
    Ok(u64::from_le_bytes(b))
}

fn read_header(bytes: &[u8], magic: &[u8; 16]) -> Result<([usize; 3], usize), VolumeError> {
    take(bytes, 0, 16)?;
    if let Some(i) = (0..16).find(|&i| bytes[i] != magic[i]) {
        return Err(VolumeError::BadMagic { offset: i });
    }
    let mut shape = [0usize; 3];
    for (a, s) in shape.iter_mut().enumerate() {
        let offset = 16 + 8 * a;
        let d = read_u64(bytes, offset)?;
        if d == 0 {
            return Err(VolumeError::ZeroDim { offset });
        }
        *s = usize::try_from(d).map_err(|_| VolumeError::DimOverflow { offset })?;
    }
    let n = shape_len(shape).ok_or(VolumeError::DimOverflow { offset: 16 })?;
    Ok((shape, n))
}

/// Synthetic image with `n_blobs` axis-aligned ellipsoids of label 1.
///
/// Background intensities are uniform in `[0, 0.3]`, blob intensities
/// uniform in `[0.6, 1.0]`. Per-axis radii are integers drawn from the
/// inclusive `radius_range`; every blob lies fully inside the volume.
pub fn synth_blobs(
    shape: [usize; 3],
    n_blobs: usize,
    radius_range: (usize, usize),
    seed: u64,
) -> Result<(Volume, LabelVolume), VolumeError> {
    let (rmin, rmax) = radius_range;
    if shape.contains(&0) {
        return Err(VolumeError::ZeroDim { offset: 0 });
    }
    if n_blobs > 0 && (rmin == 0 || rmin > rmax || shape.iter().any(|&s| 2 * rmax + 1 > s)) {
        return Err(VolumeError::Geometry);
    }
    let n = shape_len(shape).ok_or(VolumeError::DimOverflow { offset: 0 })?;
    let root = CounterRng::new(seed);
    let mut noise = root.substream(0);
    let mut data: Vec<f32> = (0..n).map(|_| 0.3 * noise.next_f32()).collect();
    let mut labels = vec![0u8; n];

    let mut geo = root.substream(1);
    let mut fill = root.substream(2);
    for _ in 0..n_blobs {
        let r: [usize; 3] = core::array::from_fn(|_| rmin + geo.below((rmax - rmin + 1) as u64) as usize);
        let c: [usize; 3] =
            core::array::from_fn(|a| r[a] + geo.below((shape[a] - 2 * r[a]) as u64) as usize);
        for x in c[0] - r[0]..=c[0] + r[0] {
            let dx = (x as f64 - c[0] as f64) / r[0] as f64;
            for y in c[1] - r[1]..=c[1] + r[1] {
                let dy = (y as f64 - c[1] as f64) / r[1] as f64;
                for z in c[2] - r[2]..=c[2] + r[2] {
                    let dz = (z as f64 - c[2] as f64) / r[2] as f64;
                    if dx * dx + dy * dy + dz * dz <= 1.0 {
                        let i = linear_index(shape, x, y, z);
                        labels[i] = 1;
                        data[i] = 0.6 + 0.4 * fill.next_f32();
                    }
                }
            }
        }
    }
    Ok((Volume { shape, data }, LabelVolume { shape, labels, n_classes: 2 }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn checksum(bytes: &[u8]) -> u64 {
        // FNV-1a
        bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ u64::from(b)).wrapping_mul(0x100_0000_01b3))
    }

    #[test]
    fn small_round_trip() {
        let data: Vec<f32> = (0..64).map(|i| i as f32 * 0.5 - 3.0).collect();
        let v = Volume::new([4, 4, 4], data).unwrap();
        assert_eq!(Volume::from_bytes(&v.to_bytes()).unwrap(), v);
        let l = LabelVolume::new([4, 4, 4], (0..64).map(|i| (i % 3) as u8).collect(), 3).unwrap();
        assert_eq!(LabelVolume::from_bytes(&l.to_bytes()).unwrap(), l);
    }

    #[test]
    fn truncated_and_corrupt() {
        let v = Volume::zeros([4, 4, 4]);
        let b = v.to_bytes();
        assert!(matches!(Volume::from_bytes(&b[..b.len() - 1]), Err(VolumeError::Truncated { .. })));
        assert!(matches!(Volume::from_bytes(&b[..20]), Err(VolumeError::Truncated { .. })));
        let mut bad = b.clone();
        bad[3] = b'X';
        assert_eq!(Volume::from_bytes(&bad), Err(VolumeError::BadMagic { offset: 3 }));
        let mut zero = b.clone();
        zero[16..24].copy_from_slice(&0u64.to_le_bytes());
        assert_eq!(Volume::from_bytes(&zero), Err(VolumeError::ZeroDim { offset: 16 }));
        let mut huge = b.clone();
        for a in 0..3 {
            huge[16 + 8 * a..24 + 8 * a].copy_from_slice(&(u64::MAX / 2).to_le_bytes());
        }
        assert!(matches!(Volume::from_bytes(&huge), Err(VolumeError::DimOverflow { .. })));
        let mut nan = b.clone();
        nan[HEADER_LEN + 8..HEADER_LEN + 12].copy_from_slice(&f32::NAN.to_le_bytes());
        assert_eq!(Volume::from_bytes(&nan), Err(VolumeError::NonFinite { offset: HEADER_LEN + 8 }));
        let mut long = b;
        long.push(0);
        assert!(matches!(Volume::from_bytes(&long), Err(VolumeError::TrailingBytes { .. })));
        // label map read as image
        let l = LabelVolume::background([2, 2, 2], 2);
        assert!(matches!(Volume::from_bytes(&l.to_bytes()), Err(VolumeError::BadMagic { .. })));
    }

    #[test]
    fn label_range_checked() {
        assert!(LabelVolume::new([1, 1, 2], vec![0, 2], 2).is_err());
        let mut b = LabelVolume::background([1, 1, 2], 2).to_bytes();
        let last = b.len() - 1;
        b[last] = 5;
        assert_eq!(
            LabelVolume::from_bytes(&b),
            Err(VolumeError::LabelOutOfRange { offset: last, label: 5 })
        );
    }

    #[test]
    fn blobs_round_trip_checksum() {
        let (img, lab) = synth_blobs([64, 64, 64], 3, (4, 10), 7).unwrap();
        let bytes = img.to_bytes();
        let back = Volume::from_bytes(&bytes).unwrap();
        assert_eq!(checksum(&back.to_bytes()), checksum(&bytes));
        let lb = lab.to_bytes();
        assert_eq!(checksum(&LabelVolume::from_bytes(&lb).unwrap().to_bytes()), checksum(&lb));
    }

    #[test]
    fn blob_generation() {
        let (_, lab) = synth_blobs([16, 16, 16], 0, (2, 3), 1).unwrap();
        assert_eq!(lab.foreground_count(), 0);
        let a = synth_blobs([32, 32, 32], 2, (2, 5), 11).unwrap();
        let b = synth_blobs([32, 32, 32], 2, (2, 5), 11).unwrap();
        assert_eq!(a, b);
        let (_, lab) = synth_blobs([64, 64, 64], 3, (4, 10), 7).unwrap();
        let f = lab.foreground_fraction();
        assert!(f > 0.001 && f < 0.2, "{f}");
        assert_eq!(synth_blobs([8, 8, 8], 1, (4, 4), 0), Err(VolumeError::Geometry));
        assert_eq!(synth_blobs([8, 8, 8], 1, (3, 2), 0), Err(VolumeError::Geometry));
    }

    proptest! {
        #[test]
        fn random_volume_round_trip(
            shape in proptest::array::uniform3(1usize..6),
            seed in any::<u64>(),
        ) {
            let mut r = CounterRng::new(seed);
            let n = shape.iter().product();
            let data: Vec<f32> = (0..n).map(|_| (r.next_f64() * 200.0 - 100.0) as f32).collect();
            let v = Volume::new(shape, data).unwrap();
            prop_assert_eq!(Volume::from_bytes(&v.to_bytes()).unwrap(), v);
        }

        #[test]
        fn blob_labels_imply_bright(seed in any::<u64>(), blobs in 0usize..5) {
            let (img, lab) = synth_blobs([24, 20, 16], blobs, (2, 5), seed).unwrap();
            for (v, &l) in img.data().iter().zip(lab.labels()) {
                if l == 1 {
                    prop_assert!(*v >= 0.6 && *v <= 1.0);
                } else {
                    prop_assert!(*v >= 0.0 && *v <= 0.3);
                }
            }
        }
    }
}
