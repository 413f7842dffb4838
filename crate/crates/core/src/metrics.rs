//! Gradient-stability statistics, term cosines and the editing/generation
//! quality proxies.
//!
//! `target_alignment` is the log-density of a render under the target
//! prompt's clean mixture. It stands in for a text-image alignment score and
//! is labelled as a proxy wherever it is reported.

use crate::denoiser::Condition;
use crate::error::{check_dim, LabError, Result};
use crate::gmm::PromptRegistry;
use crate::optim::TraceRecord;
use crate::vecops;

/// Fraction of leading trace records dropped before gradient statistics
/// are reported.
pub const DEFAULT_BURN_IN: f64 = 0.2;

/// Returned by [`cosine_sim`] when either vector is (numerically) zero.
pub const COSINE_SENTINEL: f64 = -2.0;

pub fn cosine_sim(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let (na, nb) = (vecops::norm(a), vecops::norm(b));
    if na < 1e-12 || nb < 1e-12 {
        return COSINE_SENTINEL;
    }
    (vecops::dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StabilityStats {
    pub mean: f64,
    pub stddev: f64,
    /// max / min of the normalized gradient norm after burn-in.
    pub max_min_ratio: f64,
    pub count: usize,
}

/// Statistics of the normalized gradient norm after dropping the leading
/// `burn_in_fraction` of records.
pub fn stability_stats(trace: &[TraceRecord], burn_in_fraction: f64) -> Result<StabilityStats> {
    if trace.is_empty() {
        return Err(LabError::InvalidConfig("empty trace".into()));
    }
    if !(0.0..1.0).contains(&burn_in_fraction) {
        return Err(LabError::InvalidConfig(format!(
            "burn-in fraction must be in [0, 1), got {burn_in_fraction}"
        )));
    }
    let skip = (trace.len() as f64 * burn_in_fraction).floor() as usize;
    let vals: Vec<f64> = trace[skip..].iter().map(|r| r.grad_norm_normalized).collect();
    if vals.is_empty() {
        return Err(LabError::InvalidConfig("burn-in consumes the whole trace".into()));
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = vals.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(StabilityStats {
        mean,
        stddev: var.sqrt(),
        max_min_ratio: if min > 0.0 { max / min } else { f64::INFINITY },
        count: vals.len(),
    })
}

/// RMS displacement of the edit over the dimensions it should leave alone.
pub fn identity_preservation(x_edit: &[f64], x_src: &[f64], frozen_dims: &[usize]) -> Result<f64> {
    check_dim(x_src.len(), x_edit.len())?;
    if frozen_dims.is_empty() {
        return Err(LabError::InvalidConfig("frozen_dims is empty".into()));
    }
    let mut acc = 0.0;
    for &i in frozen_dims {
        if i >= x_src.len() {
            return Err(LabError::InvalidConfig(format!(
                "frozen dim {i} out of range for dimension {}",
                x_src.len()
            )));
        }
        acc += (x_edit[i] - x_src[i]).powi(2);
    }
    Ok((acc / frozen_dims.len() as f64).sqrt())
}

/// Log-density of `x` under the target prompt's clean mixture (alignment proxy).
pub fn target_alignment(x: &[f64], tgt: Condition, registry: &PromptRegistry) -> Result<f64> {
    registry.resolve(tgt)?.log_density(x)
}
