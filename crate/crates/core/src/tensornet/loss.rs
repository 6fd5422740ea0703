//! Segmentation losses over `[batch, ...]` probability maps.

use serde::{Deserialize, Serialize};

use super::scalar::Scalar;
use super::NetError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostFunction {
    SoftDice,
    BinaryCrossentropy,
}

pub const DICE_SMOOTH: f64 = 1.0;
const BCE_CLAMP: f64 = 1e-7;

fn check<T>(pred: &[T], target: &[T], batch: usize) -> Result<usize, NetError> {
    if pred.len() != target.len() || batch == 0 || pred.len() % batch != 0 {
        return Err(NetError::ShapeMismatch(format!(
            "prediction has {} elements, target {} (batch {batch})",
            pred.len(),
            target.len()
        )));
    }
    Ok(pred.len() / batch)
}

/// `1 − (2Σpt + s) / (Σp + Σt + s)` per sample, averaged over the batch.
/// Returns the loss and its gradient w.r.t. `pred`.
pub fn soft_dice<T: Scalar>(
    pred: &[T],
    target: &[T],
    batch: usize,
    smooth: f64,
) -> Result<(f64, Vec<T>), NetError> {
    let per = check(pred, target, batch)?;
    let s = T::from_f64(smooth);
    let inv_b = T::one() / T::from_usize(batch);
    let two = T::from_f64(2.0);
    let mut loss = T::zero();
    let mut grad = Vec::with_capacity(pred.len());
    for (p, t) in pred.chunks_exact(per).zip(target.chunks_exact(per)) {
        let inter: T = p.iter().zip(t).map(|(&a, &b)| a * b).sum();
        let total = p.iter().copied().sum::<T>() + t.iter().copied().sum::<T>() + s;
        let num = two * inter + s;
        loss = loss + (T::one() - num / total) * inv_b;
        let denom = total * total;
        grad.extend(
            t.iter()
                .map(|&tj| -(two * tj * total - num) / denom * inv_b),
        );
    }
    Ok((loss.to_f64(), grad))
}

/// Mean binary cross-entropy over every element; predictions are clamped
/// away from 0 and 1.
pub fn binary_crossentropy<T: Scalar>(
    pred: &[T],
    target: &[T],
    batch: usize,
) -> Result<(f64, Vec<T>), NetError> {
    check(pred, target, batch)?;
    let lo = T::from_f64(BCE_CLAMP);
    let hi = T::one() - lo;
    let inv_n = T::one() / T::from_usize(pred.len());
    let mut loss = T::zero();
    let mut grad = Vec::with_capacity(pred.len());
    for (&p, &t) in pred.iter().zip(target) {
        let q = p.max(lo).min(hi);
        loss = loss - (t * q.ln() + (T::one() - t) * (T::one() - q).ln()) * inv_n;
        grad.push((q - t) / (q * (T::one() - q)) * inv_n);
    }
    Ok((loss.to_f64(), grad))
}

pub fn evaluate<T: Scalar>(
    f: CostFunction,
    pred: &[T],
    target: &[T],
    batch: usize,
) -> Result<(f64, Vec<T>), NetError> {
    match f {
        CostFunction::SoftDice => soft_dice(pred, target, batch, DICE_SMOOTH),
        CostFunction::BinaryCrossentropy => binary_crossentropy(pred, target, batch),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dice_identity_and_disjoint() {
        let t = [1.0f64, 1.0, 0.0, 0.0, 1.0, 0.0];
        assert!(soft_dice(&t, &t, 1, 1.0).unwrap().0.abs() < 1e-12);
        let n = 3.0;
        let p = [0.0f64, 0.0, 1.0, 1.0, 0.0, 1.0];
        let (l, _) = soft_dice(&p, &t, 1, 1.0).unwrap();
        assert!((l - (1.0 - 1.0 / (2.0 * n + 1.0))).abs() < 1e-12);
        assert!(soft_dice(&p[..5], &t, 1, 1.0).is_err());
    }

    #[test]
    fn dice_averages_over_batch() {
        let t = [1.0f64, 0.0, 1.0, 0.0];
        let p = [1.0f64, 0.0, 0.0, 1.0];
        let (l, _) = soft_dice(&p, &t, 2, 1.0).unwrap();
        assert!((l - 0.5 * (1.0 - 1.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn bce_known_value() {
        let (l, g) = binary_crossentropy(&[0.5f64, 0.5], &[1.0, 0.0], 1).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((g[0] + 1.0).abs() < 1e-12 && (g[1] - 1.0).abs() < 1e-12);
    }
}
