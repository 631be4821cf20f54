//! Soft Dice plus cross-entropy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::CLASS_LABELS;
use crate::ops::softmax_channels;
use crate::tensor::{FeatureMap, Real};

pub const DICE_EPSILON: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub dice_weight: f64,
    pub ce_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            dice_weight: 1.0,
            ce_weight: 1.0,
        }
    }
}

/// Class index of each BraTS label value.
pub fn class_indices(labels: &[u8]) -> Result<Vec<usize>> {
    labels
        .iter()
        .map(|v| {
            CLASS_LABELS
                .iter()
                .position(|c| c == v)
                .ok_or_else(|| Error::input(format!("label value {v}")))
        })
        .collect()
}

fn check<T: Real>(probs: &FeatureMap<T>, labels: &[u8]) -> Result<Vec<usize>> {
    if probs.channels() != CLASS_LABELS.len() {
        return Err(Error::input(format!(
            "{} channels, expected {}",
            probs.channels(),
            CLASS_LABELS.len()
        )));
    }
    if labels.len() != probs.voxels() {
        return Err(Error::input(format!(
            "{} labels for {} voxels",
            labels.len(),
            probs.voxels()
        )));
    }
    class_indices(labels)
}

/// Per-class `(2Σpg + ε, Σp + Σg + ε)`.
fn dice_terms<T: Real>(probs: &FeatureMap<T>, classes: &[usize]) -> Vec<(f64, f64)> {
    (0..probs.channels())
        .map(|k| {
            let p = probs.channel(k);
            let (mut inter, mut sp, mut sg) = (0.0, 0.0, 0.0);
            for (&pv, &c) in p.iter().zip(classes) {
                let pv = pv.as_f64();
                sp += pv;
                if c == k {
                    inter += pv;
                    sg += 1.0;
                }
            }
            (2.0 * inter + DICE_EPSILON, sp + sg + DICE_EPSILON)
        })
        .collect()
}

/// `dice_weight·(1 − mean soft Dice) + ce_weight·mean cross-entropy`.
pub fn loss<T: Real>(probs: &FeatureMap<T>, labels: &[u8], w: LossWeights) -> Result<f64> {
    let classes = check(probs, labels)?;
    let terms = dice_terms(probs, &classes);
    let mean_dice = terms.iter().map(|(n, d)| n / d).sum::<f64>() / terms.len() as f64;
    let n = probs.voxels();
    let ce = classes
        .iter()
        .enumerate()
        .map(|(v, &c)| -probs.data()[c * n + v].as_f64().max(1e-300).ln())
        .sum::<f64>()
        / n as f64;
    Ok(w.dice_weight * (1.0 - mean_dice) + w.ce_weight * ce)
}

/// Loss and its gradient with respect to the logits (softmax applied here).
pub fn loss_and_grad<T: Real>(logits: &FeatureMap<T>, labels: &[u8], w: LossWeights) -> Result<(f64, FeatureMap<T>)> {
    let probs = softmax_channels(logits);
    let value = loss(&probs, labels, w)?;
    let classes = class_indices(labels)?;
    let k = probs.channels();
    let n = probs.voxels();
    let terms = dice_terms(&probs, &classes);
    let p = probs.data();
    let mut grad = FeatureMap::zeros(probs.shape());
    let g = grad.data_mut();
    let dice_scale = -w.dice_weight / k as f64;
    let ce_scale = w.ce_weight / n as f64;
    let mut dp = vec![0.0f64; k];
    for v in 0..n {
        let c = classes[v];
        // d loss / d p_kv from the Dice term
        for (j, (num, den)) in terms.iter().enumerate() {
            let gt = if j == c { 1.0 } else { 0.0 };
            dp[j] = dice_scale * (2.0 * gt / den - num / (den * den));
        }
        let weighted: f64 = (0..k).map(|j| p[j * n + v].as_f64() * dp[j]).sum();
        for j in 0..k {
            let pj = p[j * n + v].as_f64();
            let onehot = if j == c { 1.0 } else { 0.0 };
            g[j * n + v] = T::of(pj * (dp[j] - weighted) + ce_scale * (pj - onehot));
        }
    }
    Ok((value, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_prediction_is_zero() {
        let labels = [0u8, 1, 2, 4, 4, 0, 2, 1];
        let classes = class_indices(&labels).unwrap();
        let probs = FeatureMap::<f64>::from_fn([4, 2, 2, 2], |[c, h, w, d]| {
            (classes[(h * 2 + w) * 2 + d] == c) as u8 as f64
        });
        assert!(loss(&probs, &labels, LossWeights::default()).unwrap().abs() < 1e-6);
    }

    #[test]
    fn uniform_cross_entropy_is_ln4() {
        let probs = FeatureMap::<f64>::filled([4, 2, 2, 1], 0.25);
        let w = LossWeights {
            dice_weight: 0.0,
            ce_weight: 1.0,
        };
        let l = loss(&probs, &[0, 1, 2, 4], w).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_labels_and_shapes() {
        let probs = FeatureMap::<f64>::filled([4, 2, 1, 1], 0.25);
        assert!(loss(&probs, &[0, 3], LossWeights::default()).is_err());
        assert!(loss(&probs, &[0], LossWeights::default()).is_err());
    }
}
