//! A two-layer fully convolutional 3D segmentation network.
//!
//! `conv(1 -> C, 3x3x3) -> ReLU -> conv(C -> K, 3x3x3) -> softmax`, zero
//! padded so the output has the input's spatial shape. Any patch size can be
//! fed without rebuilding the network. Trained in `f32`; the same code runs
//! in `f64` for gradient checks.

pub mod conv;
pub mod loss;

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::arch::PatchSize3D;
use crate::rng::CounterRng;
use crate::sampler::{crop, Patch};
use crate::volume::{LabelVolume, Volume};
use conv::{ConvShape, KERNEL_VOLUME};
pub use loss::{dice_ce_loss, dice_score, DiceScores, LossParts, DICE_SMOOTH};

pub trait Scalar: Float + Default + Send + Sync + fmt::Debug + 'static {}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ToyError {
    ShapeMismatch,
    LabelOutOfRange { label: u8, n_classes: usize },
    NonFinite { what: &'static str },
    BadConfig(&'static str),
}

impl fmt::Display for ToyError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ToyError::ShapeMismatch => write!(f, "tensor shapes are not congruent"),
            ToyError::LabelOutOfRange { label, n_classes } => {
                write!(f, "label {label} out of range for {n_classes} classes")
            }
            ToyError::NonFinite { what } => write!(f, "non-finite value in {what}"),
            ToyError::BadConfig(msg) => write!(f, "invalid network configuration: {msg}"),
        }
    }
}

impl core::error::Error for ToyError {}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub hidden_channels: usize,
    pub n_classes: usize,
    pub init_seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self { hidden_channels: 8, n_classes: 2, init_seed: 0 }
    }
}

/// Single-channel input batch, `[n][w][h][d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct InputBatch<T> {
    pub n: usize,
    pub spatial: [usize; 3],
    pub data: Vec<T>,
    pub labels: Vec<u8>,
}

impl<T: Scalar> InputBatch<T> {
    pub fn from_patches(patches: &[Patch]) -> Result<Self, ToyError> {
        let first = patches.first().ok_or(ToyError::ShapeMismatch)?;
        let spatial = first.image.shape();
        let vox: usize = spatial.iter().product();
        let mut data = Vec::with_capacity(patches.len() * vox);
        let mut labels = Vec::with_capacity(patches.len() * vox);
        for p in patches {
            if p.image.shape() != spatial || p.labels.shape() != spatial {
                return Err(ToyError::ShapeMismatch);
            }
            data.extend(p.image.data().iter().map(|&v| T::from(v).unwrap()));
            labels.extend_from_slice(p.labels.labels());
        }
        Ok(Self { n: patches.len(), spatial, data, labels })
    }

    pub fn voxels(&self) -> usize {
        self.spatial.iter().product()
    }
}

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    pre_relu: Vec<T>,
    hidden: Vec<T>,
    pub probs: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyNet<T> {
    hidden: usize,
    n_classes: usize,
    /// `[w1 | b1 | w2 | b2]`, weights as `[out][in][27]`.
    params: Vec<T>,
}

impl<T: Scalar> ToyNet<T> {
    /// He-uniform weights from a counter RNG, zero biases.
    pub fn new(cfg: &NetConfig) -> Result<Self, ToyError> {
        if cfg.hidden_channels == 0 {
            return Err(ToyError::BadConfig("hidden_channels must be positive"));
        }
        if !(2..=256).contains(&cfg.n_classes) {
            return Err(ToyError::BadConfig("n_classes must be in [2, 256]"));
        }
        let mut net = Self::zeros(cfg.hidden_channels, cfg.n_classes);
        let mut rng = CounterRng::new(cfg.init_seed);
        let c = cfg.hidden_channels;
        let b1 = libm::sqrt(6.0 / KERNEL_VOLUME as f64);
        let b2 = libm::sqrt(6.0 / (c * KERNEL_VOLUME) as f64);
        let (w1, _, w2, _) = net.layout();
        for v in &mut net.params[w1.clone()] {
            *v = T::from(rng.uniform(-b1, b1)).unwrap();
        }
        for v in &mut net.params[w2.clone()] {
            *v = T::from(rng.uniform(-b2, b2)).unwrap();
        }
        Ok(net)
    }

    pub fn zeros(hidden: usize, n_classes: usize) -> Self {
        let n = hidden * KERNEL_VOLUME + hidden + n_classes * hidden * KERNEL_VOLUME + n_classes;
        Self { hidden, n_classes, params: vec![T::zero(); n] }
    }

    pub fn from_params(hidden: usize, n_classes: usize, params: Vec<T>) -> Result<Self, ToyError> {
        let net = Self::zeros(hidden, n_classes);
        if params.len() != net.params.len() {
            return Err(ToyError::ShapeMismatch);
        }
        Ok(Self { params, ..net })
    }

    pub fn hidden_channels(&self) -> usize {
        self.hidden
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Converts parameters to another precision.
    pub fn cast<U: Scalar>(&self) -> ToyNet<U> {
        ToyNet {
            hidden: self.hidden,
            n_classes: self.n_classes,
            params: self.params.iter().map(|&v| U::from(v).unwrap()).collect(),
        }
    }

    fn layout(&self) -> (core::ops::Range<usize>, core::ops::Range<usize>, core::ops::Range<usize>, core::ops::Range<usize>) {
        let c = self.hidden;
        let k = self.n_classes;
        let w1 = 0..c * KERNEL_VOLUME;
        let b1 = w1.end..w1.end + c;
        let w2 = b1.end..b1.end + k * c * KERNEL_VOLUME;
        let b2 = w2.end..w2.end + k;
        (w1, b1, w2, b2)
    }

    pub fn forward_cached(&self, input: &[T], n: usize, spatial: [usize; 3]) -> Result<ForwardCache<T>, ToyError> {
        let vox: usize = spatial.iter().product();
        if n == 0 || input.len() != n * vox {
            return Err(ToyError::ShapeMismatch);
        }
        let (w1, b1, w2, b2) = self.layout();
        let (c, k) = (self.hidden, self.n_classes);
        let mut pre_relu = vec![T::zero(); n * c * vox];
        conv::forward(
            &ConvShape { n, cin: 1, cout: c, spatial },
            input,
            &self.params[w1],
            &self.params[b1],
            &mut pre_relu,
        );
        let hidden: Vec<T> = pre_relu.iter().map(|&v| v.max(T::zero())).collect();
        let mut probs = vec![T::zero(); n * k * vox];
        conv::forward(
            &ConvShape { n, cin: c, cout: k, spatial },
            &hidden,
            &self.params[w2],
            &self.params[b2],
            &mut probs,
        );
        softmax_channels(&mut probs, n, k, vox);
        if probs.iter().any(|v| !v.is_finite()) {
            return Err(ToyError::NonFinite { what: "activations" });
        }
        Ok(ForwardCache { pre_relu, hidden, probs })
    }

    /// Per-voxel class probabilities, `[n][k][w][h][d]`.
    pub fn forward(&self, input: &[T], n: usize, spatial: [usize; 3]) -> Result<Vec<T>, ToyError> {
        Ok(self.forward_cached(input, n, spatial)?.probs)
    }

    /// Loss and its gradient with respect to every parameter.
    pub fn loss_and_grad(&self, batch: &InputBatch<T>) -> Result<(LossParts<T>, Vec<T>), ToyError> {
        let (n, spatial, vox) = (batch.n, batch.spatial, batch.voxels());
        let cache = self.forward_cached(&batch.data, n, spatial)?;
        let (parts, grad_probs) = dice_ce_loss(&cache.probs, &batch.labels, self.n_classes, n)?;
        let grad_logits = softmax_backward(&cache.probs, &grad_probs, n, self.n_classes, vox);

        let (w1, b1, w2, b2) = self.layout();
        let (c, k) = (self.hidden, self.n_classes);
        let mut grads = vec![T::zero(); self.params.len()];
        let mut grad_hidden = vec![T::zero(); n * c * vox];
        {
            let (head, tail) = grads.split_at_mut(w2.start);
            let (gw2, gb2) = tail.split_at_mut(w2.len());
            conv::backward(
                &ConvShape { n, cin: c, cout: k, spatial },
                &cache.hidden,
                &self.params[w2.clone()],
                &grad_logits,
                gw2,
                &mut gb2[..b2.len()],
                Some(&mut grad_hidden),
            );
            for (g, &pre) in grad_hidden.iter_mut().zip(&cache.pre_relu) {
                if pre <= T::zero() {
                    *g = T::zero();
                }
            }
            let (gw1, gb1) = head.split_at_mut(w1.end);
            conv::backward(
                &ConvShape { n, cin: 1, cout: c, spatial },
                &batch.data,
                &self.params[w1],
                &grad_hidden,
                gw1,
                &mut gb1[..b1.len()],
                None,
            );
        }
        if grads.iter().any(|v| !v.is_finite()) {
            return Err(ToyError::NonFinite { what: "gradients" });
        }
        Ok((parts, grads))
    }

    /// Hard labels for a whole volume, tiled with non-overlapping windows of
    /// `window` (zero padded at the far edges).
    pub fn segment_volume(&self, image: &Volume, window: PatchSize3D) -> Result<Vec<u8>, ToyError> {
        let shape = image.shape();
        let win = window.as_usize();
        let empty = LabelVolume::background(shape, self.n_classes as u16);
        let mut out = vec![0u8; image.len()];
        let tiles = |a: usize| shape[a].div_ceil(win[a]);
        let wvox: usize = win.iter().product();
        for tx in 0..tiles(0) {
            for ty in 0..tiles(1) {
                for tz in 0..tiles(2) {
                    let origin = [tx * win[0], ty * win[1], tz * win[2]];
                    let (tile, _) = crop(image, &empty, origin.map(|o| o as i64), window);
                    let input: Vec<T> = tile.data().iter().map(|&v| T::from(v).unwrap()).collect();
                    let probs = self.forward(&input, 1, win)?;
                    for x in 0..win[0].min(shape[0] - origin[0]) {
                        for y in 0..win[1].min(shape[1] - origin[1]) {
                            for z in 0..win[2].min(shape[2] - origin[2]) {
                                let v = (x * win[1] + y) * win[2] + z;
                                let mut best = 0;
                                for c in 1..self.n_classes {
                                    if probs[c * wvox + v] > probs[best * wvox + v] {
                                        best = c;
                                    }
                                }
                                let gi = crate::volume::linear_index(
                                    shape,
                                    origin[0] + x,
                                    origin[1] + y,
                                    origin[2] + z,
                                );
                                out[gi] = best as u8;
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

fn softmax_channels<T: Scalar>(logits: &mut [T], n: usize, k: usize, vox: usize) {
    for b in 0..n {
        let block = &mut logits[b * k * vox..][..k * vox];
        for v in 0..vox {
            let mut mx = T::neg_infinity();
            for c in 0..k {
                mx = mx.max(block[c * vox + v]);
            }
            let mut sum = T::zero();
            for c in 0..k {
                let e = (block[c * vox + v] - mx).exp();
                block[c * vox + v] = e;
                sum = sum + e;
            }
            for c in 0..k {
                block[c * vox + v] = block[c * vox + v] / sum;
            }
        }
    }
}

// dL/dz_c = p_c (dL/dp_c - sum_j p_j dL/dp_j)
fn softmax_backward<T: Scalar>(probs: &[T], grad_probs: &[T], n: usize, k: usize, vox: usize) -> Vec<T> {
    let mut out = vec![T::zero(); probs.len()];
    for b in 0..n {
        let base = b * k * vox;
        for v in 0..vox {
            let mut dot = T::zero();
            for c in 0..k {
                let i = base + c * vox + v;
                dot = dot + probs[i] * grad_probs[i];
            }
            for c in 0..k {
                let i = base + c * vox + v;
                out[i] = probs[i] * (grad_probs[i] - dot);
            }
        }
    }
    out
}

/// Momentum SGD with polynomial learning-rate decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimState<T> {
    pub learning_rate: f64,
    pub momentum: f64,
    pub poly_exponent: f64,
    pub velocity: Vec<T>,
}

impl<T: Scalar> OptimState<T> {
    pub fn new(learning_rate: f64, momentum: f64, n_params: usize) -> Result<Self, ToyError> {
        if !(learning_rate >= 0.0 && learning_rate.is_finite()) {
            return Err(ToyError::BadConfig("learning_rate must be non-negative"));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(ToyError::BadConfig("momentum must be in [0, 1)"));
        }
        Ok(Self { learning_rate, momentum, poly_exponent: 0.9, velocity: vec![T::zero(); n_params] })
    }

    /// `lr * (1 - epoch / max_epochs)^0.9`.
    pub fn lr_at(&self, epoch: u32, max_epochs: u32) -> f64 {
        if max_epochs == 0 {
            return self.learning_rate;
        }
        let frac = 1.0 - f64::from(epoch.min(max_epochs)) / f64::from(max_epochs);
        self.learning_rate * libm::pow(frac, self.poly_exponent)
    }

    pub fn step(&mut self, params: &mut [T], grads: &[T], lr: f64) {
        let lr = T::from(lr).unwrap();
        let mu = T::from(self.momentum).unwrap();
        for ((p, v), &g) in params.iter_mut().zip(self.velocity.iter_mut()).zip(grads) {
            *v = mu * *v - lr * g;
            *p = *p + *v;
        }
    }
}

/// One forward/backward pass and parameter update. Returns the loss.
pub fn train_step<T: Scalar>(
    net: &mut ToyNet<T>,
    optim: &mut OptimState<T>,
    batch: &InputBatch<T>,
    epoch: u32,
    max_epochs: u32,
) -> Result<LossParts<T>, ToyError> {
    if optim.velocity.len() != net.param_count() {
        return Err(ToyError::ShapeMismatch);
    }
    let (parts, grads) = net.loss_and_grad(batch)?;
    let lr = optim.lr_at(epoch, max_epochs);
    optim.step(&mut net.params, &grads, lr);
    Ok(parts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::PatchSource;
    use crate::volume::synth_blobs;

    fn random_batch(seed: u64, n: usize, spatial: [usize; 3], k: usize) -> InputBatch<f64> {
        let mut rng = CounterRng::new(seed);
        let vox: usize = spatial.iter().product();
        InputBatch {
            n,
            spatial,
            data: (0..n * vox).map(|_| rng.uniform(-1.0, 1.0)).collect(),
            labels: (0..n * vox).map(|_| rng.below(k as u64) as u8).collect(),
        }
    }

    #[test]
    fn zero_net_is_uniform() {
        let net = ToyNet::<f64>::zeros(4, 3);
        let probs = net.forward(&[0.0; 27], 1, [3, 3, 3]).unwrap();
        assert!(probs.iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn probabilities_normalized() {
        let net = ToyNet::<f32>::new(&NetConfig { hidden_channels: 5, n_classes: 3, init_seed: 2 }).unwrap();
        let b = random_batch(1, 2, [5, 4, 6], 3);
        let input: Vec<f32> = b.data.iter().map(|&v| (v * 5.0) as f32).collect();
        let probs = net.forward(&input, 2, [5, 4, 6]).unwrap();
        let vox = 120;
        for s in 0..2 {
            for v in 0..vox {
                let sum: f32 = (0..3).map(|c| probs[(s * 3 + c) * vox + v]).sum();
                assert!((sum - 1.0).abs() <= 1e-6, "{sum}");
            }
        }
    }

    #[test]
    fn frozen_forward_checksum() {
        let net = ToyNet::<f64>::new(&NetConfig { init_seed: 11, ..NetConfig::default() }).unwrap();
        let input: Vec<f64> = (0..512).map(|i| ((i * 37) % 101) as f64 / 100.0).collect();
        let probs = net.forward(&input, 1, [8, 8, 8]).unwrap();
        let checksum: f64 = probs.iter().enumerate().map(|(i, p)| p * ((i % 7) as f64 + 1.0)).sum();
        assert!((checksum - FROZEN_CHECKSUM).abs() < 1e-9, "{checksum:.12}");
    }

    const FROZEN_CHECKSUM: f64 = 2041.249866798154;

    #[test]
    fn gradient_check_small() {
        let net = ToyNet::<f64>::new(&NetConfig { hidden_channels: 3, n_classes: 2, init_seed: 5 }).unwrap();
        let batch = random_batch(9, 2, [4, 4, 4], 2);
        let (_, grads) = net.loss_and_grad(&batch).unwrap();
        let h = 1e-6;
        let mut worst = 0.0f64;
        for (i, &g) in grads.iter().enumerate() {
            let mut up = net.clone();
            up.params_mut()[i] += h;
            let mut dn = net.clone();
            dn.params_mut()[i] -= h;
            let fd = (up.loss_and_grad(&batch).unwrap().0.total - dn.loss_and_grad(&batch).unwrap().0.total) / (2.0 * h);
            worst = worst.max((fd - g).abs() / g.abs().max(1.0));
        }
        assert!(worst < 1e-4, "{worst}");
    }

    #[test]
    fn accepts_every_fixture_stage_size() {
        let net = ToyNet::<f32>::new(&NetConfig::default()).unwrap();
        let count = net.param_count();
        let mut seen = alloc::collections::BTreeSet::new();
        for t in &crate::fixtures::TASKS {
            for p in t.published_patches() {
                // scale down 8x per axis; shapes stay distinct per stage
                let s = p.as_usize().map(|d| d.div_ceil(8));
                if seen.insert(s) {
                    let n: usize = s.iter().product();
                    let probs = net.forward(&vec![0.5; n], 1, s).unwrap();
                    assert_eq!(probs.len(), 2 * n);
                }
            }
        }
        assert_eq!(net.param_count(), count);
    }

    #[test]
    fn translation_covariance() {
        let net = ToyNet::<f64>::new(&NetConfig { hidden_channels: 4, n_classes: 2, init_seed: 3 }).unwrap();
        let s = [9, 9, 9];
        let b = random_batch(4, 1, s, 2);
        let idx = |x: usize, y: usize, z: usize| (x * 9 + y) * 9 + z;
        let mut shifted = vec![0.0; 729];
        for x in 1..9 {
            for y in 0..9 {
                for z in 0..9 {
                    shifted[idx(x, y, z)] = b.data[idx(x - 1, y, z)];
                }
            }
        }
        let p0 = net.forward(&b.data, 1, s).unwrap();
        let p1 = net.forward(&shifted, 1, s).unwrap();
        // receptive field is 5 voxels; stay two away from every border
        for x in 3..7 {
            for y in 2..7 {
                for z in 2..7 {
                    for c in 0..2 {
                        let a = p0[c * 729 + idx(x - 1, y, z)];
                        let b = p1[c * 729 + idx(x, y, z)];
                        assert!((a - b).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let mut net = ToyNet::<f32>::new(&NetConfig::default()).unwrap();
        let before = net.clone();
        let mut opt = OptimState::new(0.0, 0.9, net.param_count()).unwrap();
        let b = random_batch(3, 2, [4, 4, 4], 2);
        let batch = InputBatch { data: b.data.iter().map(|&v| v as f32).collect(), n: b.n, spatial: b.spatial, labels: b.labels };
        for e in 0..3 {
            train_step(&mut net, &mut opt, &batch, e, 10).unwrap();
        }
        assert_eq!(net, before);
    }

    #[test]
    fn poly_decay() {
        let opt = OptimState::<f32>::new(0.1, 0.9, 1).unwrap();
        assert_eq!(opt.lr_at(0, 100), 0.1);
        assert_eq!(opt.lr_at(100, 100), 0.0);
        assert!((opt.lr_at(50, 100) - 0.1 * libm::pow(0.5, 0.9)).abs() < 1e-15);
        assert!(OptimState::<f32>::new(0.1, 1.0, 1).is_err());
    }

    #[test]
    fn loss_decreases_on_blobs() {
        let (img, lab) = synth_blobs([24, 24, 24], 3, (3, 5), 1).unwrap();
        let src = PatchSource::new(&img, &lab).unwrap();
        let size = PatchSize3D::from_const([12, 12, 12]);
        let mut finals = Vec::new();
        for seed in 0..5 {
            let mut net = ToyNet::<f32>::new(&NetConfig { init_seed: seed, ..NetConfig::default() }).unwrap();
            let mut opt = OptimState::new(0.05, 0.9, net.param_count()).unwrap();
            let mut rng = CounterRng::new(100 + seed);
            let mut losses = Vec::new();
            for step in 0..50 {
                let patches = src.compose_batch(size, 2, &mut rng).unwrap();
                let batch = InputBatch::<f32>::from_patches(&patches).unwrap();
                losses.push(train_step(&mut net, &mut opt, &batch, step, 50).unwrap().total);
            }
            let head: f32 = losses[..5].iter().sum::<f32>() / 5.0;
            let tail: f32 = losses[45..].iter().sum::<f32>() / 5.0;
            finals.push(tail - head);
        }
        finals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!(finals[2] < 0.0, "{finals:?}");
    }

    #[test]
    fn training_is_deterministic() {
        let (img, lab) = synth_blobs([16, 16, 16], 2, (2, 4), 5).unwrap();
        let src = PatchSource::new(&img, &lab).unwrap();
        let run = || {
            let mut net = ToyNet::<f32>::new(&NetConfig::default()).unwrap();
            let mut opt = OptimState::new(0.05, 0.9, net.param_count()).unwrap();
            let mut rng = CounterRng::new(8);
            for step in 0..5 {
                let patches = src.compose_batch(PatchSize3D::from_const([8, 8, 8]), 2, &mut rng).unwrap();
                let batch = InputBatch::<f32>::from_patches(&patches).unwrap();
                train_step(&mut net, &mut opt, &batch, step, 5).unwrap();
            }
            net.params().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn segment_volume_covers_everything() {
        let (img, _) = synth_blobs([10, 7, 9], 1, (2, 3), 2).unwrap();
        let net = ToyNet::<f32>::new(&NetConfig::default()).unwrap();
        let seg = net.segment_volume(&img, PatchSize3D::from_const([4, 4, 4])).unwrap();
        assert_eq!(seg.len(), img.len());
        assert!(seg.iter().all(|&l| l < 2));
    }
}
