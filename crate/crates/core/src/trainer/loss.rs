use crate::error::{Error, Result};
use crate::render::Rgb;

/// Clamp applied to object probabilities before taking logs.
pub const GC_EPS: f64 = 1e-6;

fn check_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::LengthMismatch { left: a, right: b });
    }
    Ok(())
}

/// Mean over rays of the squared L2 color error.
pub fn color_loss(predicted: &[Rgb], target: &[Rgb]) -> Result<f64> {
    check_len(predicted.len(), target.len())?;
    if predicted.is_empty() {
        return Err(Error::invalid("color loss needs at least one ray"));
    }
    let sum: f64 = predicted
        .iter()
        .zip(target)
        .map(|(p, t)| (0..3).map(|k| (p[k] - t[k]).powi(2)).sum::<f64>())
        .sum();
    Ok(sum / predicted.len() as f64)
}

/// Mean absolute depth error over valid rays; 0 without valid rays.
pub fn depth_loss(predicted: &[f64], target: &[f64], valid: &[bool]) -> Result<f64> {
    check_len(predicted.len(), target.len())?;
    check_len(predicted.len(), valid.len())?;
    let (sum, n) = predicted
        .iter()
        .zip(target)
        .zip(valid)
        .filter(|(_, v)| **v)
        .fold((0.0, 0usize), |(s, n), ((p, t), _)| (s + (p - t).abs(), n + 1));
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

/// Per-ray cross-entropy term and its derivative w.r.t. the unclamped probability.
pub fn gc_term(p: f64, foreground: bool) -> (f64, f64) {
    let clamped = p.clamp(GC_EPS, 1.0 - GC_EPS);
    let inside = clamped == p;
    if foreground {
        (-clamped.ln(), if inside { -1.0 / clamped } else { 0.0 })
    } else {
        (-(-clamped).ln_1p(), if inside { 1.0 / (1.0 - clamped) } else { 0.0 })
    }
}

/// Mean binary cross-entropy of object probabilities against mask labels:
/// foreground rays pay `-log P`, background rays `-log(1 - P)`.
pub fn gc_loss(object_prob: &[f64], mask_label: &[bool]) -> Result<f64> {
    check_len(object_prob.len(), mask_label.len())?;
    if object_prob.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = object_prob.iter().zip(mask_label).map(|(p, l)| gc_term(*p, *l).0).sum();
    Ok(sum / object_prob.len() as f64)
}
