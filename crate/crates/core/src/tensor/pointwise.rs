use crate::error::{Error, Result};

/// Probabilities are clamped to `[BCE_EPS, 1 - BCE_EPS]` before the loss.
pub const BCE_EPS: f64 = 1e-7;

#[inline]
pub(crate) fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
fn sigmoid64(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean class-weighted BCE on logits and its gradient w.r.t. the logits.
///
/// Per cell: `pos_weight·t·softplus(-z) + (1-t)·softplus(z)`, which equals
/// `-[pos_weight·t·ln σ(z) + (1-t)·ln(1-σ(z))]`.
pub(crate) fn bce_logits(logits: &[f32], target: &[f32], pos_weight: f32) -> (f64, Vec<f32>) {
    let n = logits.len() as f64;
    let pw = pos_weight as f64;
    let mut loss = 0.0f64;
    let mut grad = Vec::with_capacity(logits.len());
    for (&z, &t) in logits.iter().zip(target) {
        let (z, t) = (z as f64, t as f64);
        loss += pw * t * softplus(-z) + (1.0 - t) * softplus(z);
        let s = sigmoid64(z);
        grad.push(((pw * t * (s - 1.0) + (1.0 - t) * s) / n) as f32);
    }
    (loss / n, grad)
}

fn check_bce(pred: &[f32], target: &[f32], pos_weight: f64) -> Result<()> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::Shape(format!(
            "bce over {} predictions and {} targets",
            pred.len(),
            target.len()
        )));
    }
    if !(pos_weight > 0.0) {
        return Err(Error::InvalidConfig(format!("pos_weight must be > 0, got {pos_weight}")));
    }
    Ok(())
}

/// Mean class-weighted binary cross entropy on probabilities, with its
/// gradient w.r.t. `pred`.
///
/// Probabilities are clamped to `[ε, 1-ε]` and converted to logits so the
/// loss is evaluated in the stable softplus form.
pub fn weighted_bce(pred: &[f32], target: &[f32], pos_weight: f64) -> Result<(f64, Vec<f64>)> {
    check_bce(pred, target, pos_weight)?;
    let n = pred.len() as f64;
    let mut loss = 0.0f64;
    let mut grad = Vec::with_capacity(pred.len());
    for (&p, &t) in pred.iter().zip(target) {
        let p = (p as f64).clamp(BCE_EPS, 1.0 - BCE_EPS);
        let t = t as f64;
        let z = (p / (1.0 - p)).ln();
        loss += pos_weight * t * softplus(-z) + (1.0 - t) * softplus(z);
        grad.push((-pos_weight * t / p + (1.0 - t) / (1.0 - p)) / n);
    }
    Ok((loss / n, grad))
}

/// Unweighted binary cross entropy.
pub fn bce(pred: &[f32], target: &[f32]) -> Result<(f64, Vec<f64>)> {
    weighted_bce(pred, target, 1.0)
}
