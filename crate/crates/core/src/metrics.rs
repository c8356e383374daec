//! Evaluation metrics and the per-step metrics record.

use std::collections::BTreeMap;

use crate::error::Result;
use crate::grid::{DepthMap, ImageRgb};
use crate::losses::LossReport;

/// Reported when the mean squared error falls below 1e-10.
pub const PSNR_CAP: f64 = 99.0;

/// Peak signal-to-noise ratio in dB for images in [0, 1].
pub fn psnr(a: &ImageRgb, b: &ImageRgb) -> Result<f64> {
    a.ensure_dims(b, "psnr images")?;
    let mse = a
        .iter()
        .zip(b.iter())
        .map(|(x, y)| (0..3).map(|k| (x[k] - y[k]).powi(2)).sum::<f64>())
        .sum::<f64>()
        / (3 * a.len()) as f64;
    if mse < 1e-10 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// Entropy (nats) of the histogram of min-max normalized depth. Constant
/// maps score 0. A stand-in for histogram-based non-flatness scores.
pub fn nfs_surrogate(depth: &DepthMap, bins: usize) -> f64 {
    let bins = bins.max(1);
    let (lo, hi) = depth
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), d| (lo.min(*d), hi.max(*d)));
    if !(hi > lo) {
        return 0.0;
    }
    let mut counts = vec![0usize; bins];
    for d in depth.iter() {
        let t = (d - lo) / (hi - lo);
        counts[((t * bins as f64) as usize).min(bins - 1)] += 1;
    }
    let n = depth.len() as f64;
    counts
        .iter()
        .filter(|c| **c > 0)
        .map(|c| {
            let p = *c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Fraction of pixels with alpha below `tau`.
pub fn hole_coverage(alpha: &DepthMap, tau: f64) -> f64 {
    if alpha.is_empty() {
        return 0.0;
    }
    alpha.iter().filter(|a| **a < tau).count() as f64 / alpha.len() as f64
}

/// One line of the metrics log.
#[derive(Clone, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    /// `"stage1"` or `"stage2"`; `"eval"` for standalone evaluation.
    pub stage: String,
    /// `canonical`, `cycle`, `baseline` or `refine`.
    pub branch: String,
    pub scene: usize,
    pub losses: LossReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub psnr_canonical: Option<f64>,
    /// Hole coverage keyed by signed yaw in whole degrees.
    #[serde(skip_serializing_if = "BTreeMap::is_empty", default)]
    pub hole_coverage: BTreeMap<i32, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nfs_surrogate: Option<f64>,
}
