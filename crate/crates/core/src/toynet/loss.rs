//! Soft Dice + cross-entropy loss and hard Dice scores.
//!
//! Probabilities are laid out `[n][k][voxels]`, labels `[n][voxels]`.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{Scalar, ToyError};

pub const DICE_SMOOTH: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts<T> {
    pub total: T,
    /// Mean soft Dice over foreground classes.
    pub soft_dice: T,
    pub cross_entropy: T,
}

/// `loss = (1 - softDice) + crossEntropy` over a batch of `n` samples.
///
/// Soft Dice is pooled over the whole batch per foreground class
/// (`1..n_classes`) and averaged over those classes; cross-entropy is the
/// mean over all voxels. Returns the loss and `d loss / d probs`.
pub fn dice_ce_loss<T: Scalar>(
    probs: &[T],
    labels: &[u8],
    n_classes: usize,
    n: usize,
) -> Result<(LossParts<T>, Vec<T>), ToyError> {
    if n_classes < 2 || n == 0 || !labels.len().is_multiple_of(n) || probs.len() != labels.len() * n_classes {
        return Err(ToyError::ShapeMismatch);
    }
    if let Some(&l) = labels.iter().find(|&&l| usize::from(l) >= n_classes) {
        return Err(ToyError::LabelOutOfRange { label: l, n_classes });
    }
    let vox = labels.len() / n;
    let m = T::from(labels.len()).unwrap();
    let eps = T::from(DICE_SMOOTH).unwrap();
    let two = T::one() + T::one();
    let fg = T::from(n_classes - 1).unwrap();
    let at = |b: usize, c: usize| (b * n_classes + c) * vox;

    let mut grad = vec![T::zero(); probs.len()];

    let mut ce = T::zero();
    for b in 0..n {
        let lab = &labels[b * vox..][..vox];
        for (v, &g) in lab.iter().enumerate() {
            let i = at(b, usize::from(g)) + v;
            let p = probs[i];
            ce = ce - p.ln();
            grad[i] = grad[i] - T::one() / (m * p);
        }
    }
    ce = ce / m;

    let mut dice_sum = T::zero();
    for c in 1..n_classes {
        let (mut inter, mut psum, mut gsum) = (T::zero(), T::zero(), T::zero());
        for b in 0..n {
            let p = &probs[at(b, c)..][..vox];
            let lab = &labels[b * vox..][..vox];
            for (&pv, &g) in p.iter().zip(lab) {
                psum = psum + pv;
                if usize::from(g) == c {
                    inter = inter + pv;
                    gsum = gsum + T::one();
                }
            }
        }
        let num = two * inter + eps;
        let den = psum + gsum + eps;
        dice_sum = dice_sum + num / den;
        // d(num/den)/dp = (2 g den - num) / den^2; loss carries -1/fg
        let inv = T::one() / (den * den * fg);
        for b in 0..n {
            let lab = &labels[b * vox..][..vox];
            let gr = &mut grad[at(b, c)..][..vox];
            for (gv, &g) in gr.iter_mut().zip(lab) {
                let gt = if usize::from(g) == c { T::one() } else { T::zero() };
                *gv = *gv - (two * gt * den - num) * inv;
            }
        }
    }
    let soft_dice = dice_sum / fg;
    let total = T::one() - soft_dice + ce;
    if !total.is_finite() {
        return Err(ToyError::NonFinite { what: "loss" });
    }
    Ok((LossParts { total, soft_dice, cross_entropy: ce }, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiceScores {
    /// Dice for classes `1..n_classes`.
    pub per_class: Vec<f64>,
    pub mean: f64,
}

/// Hard Dice `2|P∩G| / (|P| + |G|)` per foreground class; a class absent
/// from both maps scores 1.
pub fn dice_score(pred: &[u8], truth: &[u8], n_classes: usize) -> DiceScores {
    assert_eq!(pred.len(), truth.len(), "congruent label maps");
    let mut inter = vec![0u64; n_classes];
    let mut p_count = vec![0u64; n_classes];
    let mut g_count = vec![0u64; n_classes];
    for (&p, &g) in pred.iter().zip(truth) {
        let (p, g) = (usize::from(p), usize::from(g));
        if p < n_classes {
            p_count[p] += 1;
        }
        if g < n_classes {
            g_count[g] += 1;
        }
        if p == g && p < n_classes {
            inter[p] += 1;
        }
    }
    let per_class: Vec<f64> = (1..n_classes)
        .map(|c| {
            let den = p_count[c] + g_count[c];
            if den == 0 {
                1.0
            } else {
                2.0 * inter[c] as f64 / den as f64
            }
        })
        .collect();
    let mean = if per_class.is_empty() { 1.0 } else { per_class.iter().sum::<f64>() / per_class.len() as f64 };
    DiceScores { per_class, mean }
}
