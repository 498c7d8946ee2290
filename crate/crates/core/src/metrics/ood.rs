use alloc::vec::Vec;

use crate::error::{domain_err, Result};
use crate::tensor::Tensor;

/// Histogram bins used by [`overlap_area`] when the caller has no preference.
pub const DEFAULT_BINS: usize = 50;

/// Fraction of pairs `(sim_to_target, sim_to_source)` whose first entry is
/// strictly larger.
pub fn clip_acc(pairs: &[(f64, f64)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(domain_err!("CLIP accuracy of an empty list"));
    }
    let wins = pairs.iter().filter(|(t, s)| t > s).count();
    Ok(wins as f64 / pairs.len() as f64)
}

/// L1 norm of the gradient of the cross-entropy against a uniform target,
/// taken with respect to the weights of a linear head that produced `logits`
/// from `features`. The gradient is the outer product of the features with
/// `softmax(logits) - 1/C`, so its L1 norm factorises.
pub fn gradnorm_score(logits: &Tensor, features: &Tensor) -> Result<f64> {
    let c = logits.len();
    if c < 2 {
        return Err(domain_err!("GradNorm needs at least 2 classes, got {c}"));
    }
    if !logits.all_finite() || !features.all_finite() {
        return Err(domain_err!("GradNorm inputs must be finite"));
    }
    let z = logits.to_f64();
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = z.iter().map(|v| libm::exp(v - max)).collect();
    let sum: f64 = exp.iter().sum();
    let uniform = 1.0 / c as f64;
    let dev: f64 = exp.iter().map(|e| (e / sum - uniform).abs()).sum();
    let l1: f64 = features.data().iter().map(|v| (*v as f64).abs()).sum();
    Ok(l1 * dev)
}

/// Overlap of the normalised histograms of two samples over their shared
/// range.
pub fn overlap_area(a: &[f64], b: &[f64], bins: usize) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(domain_err!("overlap needs two non-empty samples"));
    }
    if bins == 0 {
        return Err(domain_err!("bin count must be positive"));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(domain_err!("scores must be finite"));
    }
    let lo = a.iter().chain(b).copied().fold(f64::INFINITY, f64::min);
    let hi = a.iter().chain(b).copied().fold(f64::NEG_INFINITY, f64::max);
    if hi == lo {
        return Ok(1.0);
    }
    let width = (hi - lo) / bins as f64;
    let hist = |xs: &[f64]| {
        let mut h = alloc::vec![0usize; bins];
        for &x in xs {
            let k = (((x - lo) / width) as usize).min(bins - 1);
            h[k] += 1;
        }
        h
    };
    let (ha, hb) = (hist(a), hist(b));
    let (na, nb) = (a.len() as f64, b.len() as f64);
    // density * width is the bin's probability mass
    let area: f64 = ha
        .iter()
        .zip(&hb)
        .map(|(&x, &y)| (x as f64 / na).min(y as f64 / nb))
        .sum();
    Ok(area.clamp(0.0, 1.0))
}
