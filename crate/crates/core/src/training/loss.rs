//! Cross-entropy and bidirectional KL objectives.
//!
//! All losses are per-token means over the unmasked rows of a (possibly
//! stacked) [`PredictionDistribution`], in nats. Probabilities inside
//! logarithms are floored at [`PROB_FLOOR`].

use serde::{Deserialize, Serialize};

use crate::autograd::PROB_FLOOR;
use crate::error::{Error, Result};
use crate::model::PredictionDistribution;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub kl: f64,
    pub total: f64,
}

fn safe_ln(p: f64) -> f64 {
    p.max(PROB_FLOOR).ln()
}

fn unmasked_rows(pred: &PredictionDistribution) -> Result<usize> {
    if pred.mask.len() != pred.positions() {
        return Err(Error::ShapeMismatch(format!(
            "mask has {} entries for {} rows",
            pred.mask.len(),
            pred.positions()
        )));
    }
    match pred.mask.iter().filter(|&&m| m).count() {
        0 => Err(Error::EmptyInput(
            "prediction (no unmasked positions)".into(),
        )),
        n => Ok(n),
    }
}

/// Mean negative log-likelihood of `targets` per unmasked position.
pub fn ce_loss_single(pred: &PredictionDistribution, targets: &[u32]) -> Result<f64> {
    let count = unmasked_rows(pred)?;
    if targets.len() != pred.positions() {
        return Err(Error::ShapeMismatch(format!(
            "{} targets for {} positions",
            targets.len(),
            pred.positions()
        )));
    }
    let mut total = 0.0;
    for (i, (&t, &real)) in targets.iter().zip(&pred.mask).enumerate() {
        if !real {
            continue;
        }
        let p = *pred
            .probs
            .get((i, t as usize))
            .ok_or(Error::TokenOutOfRange {
                id: t,
                vocab_size: pred.vocab_size(),
            })?;
        total -= safe_ln(p);
    }
    Ok(total / count as f64)
}

/// ½ (D_KL(P₁‖P₂) + D_KL(P₂‖P₁)), averaged over unmasked positions.
pub fn kl_bidirectional(p1: &PredictionDistribution, p2: &PredictionDistribution) -> Result<f64> {
    if p1.probs.dim() != p2.probs.dim() || p1.mask != p2.mask {
        return Err(Error::ShapeMismatch(format!(
            "distributions differ in shape or mask: {:?} vs {:?}",
            p1.probs.dim(),
            p2.probs.dim()
        )));
    }
    let count = unmasked_rows(p1)?;
    let mut total = 0.0;
    for ((r1, r2), &real) in p1
        .probs
        .rows()
        .into_iter()
        .zip(p2.probs.rows())
        .zip(&p1.mask)
    {
        if !real {
            continue;
        }
        for (&a, &b) in r1.iter().zip(r2.iter()) {
            let (la, lb) = (safe_ln(a), safe_ln(b));
            total += a * (la - lb) + b * (lb - la);
        }
    }
    Ok(0.5 * total / count as f64)
}

/// Mean of the two single-pass cross-entropies.
pub fn ce_loss_dual(
    p1: &PredictionDistribution,
    p2: &PredictionDistribution,
    targets: &[u32],
) -> Result<f64> {
    Ok(0.5 * (ce_loss_single(p1, targets)? + ce_loss_single(p2, targets)?))
}

/// `ce + alpha · kl` over a pair of passes.
pub fn total_loss(
    p1: &PredictionDistribution,
    p2: &PredictionDistribution,
    targets: &[u32],
    alpha: f64,
) -> Result<LossBreakdown> {
    if alpha.is_nan() || alpha < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "alpha must be nonnegative, got {alpha}"
        )));
    }
    let ce = ce_loss_dual(p1, p2, targets)?;
    let kl = kl_bidirectional(p1, p2)?;
    Ok(LossBreakdown {
        ce,
        kl,
        total: ce + alpha * kl,
    })
}
