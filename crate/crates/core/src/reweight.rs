//! Score-to-weight conversions and the weighted batch gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Gradients;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase", deny_unknown_fields)]
pub enum WeightingMode {
    /// Per-batch max-min normalization into [0, 1].
    Maxmin,
    Softmax {
        temperature: f64,
    },
    /// Keep examples at or above the p-th nearest-rank percentile.
    Percentile {
        p: f64,
        /// Threshold over all stored scores instead of the current batch.
        #[serde(default)]
        full_dataset: bool,
    },
    /// Standard training: every weight is 1.
    Uniform,
    /// Diagnostic: every weight is 0.
    Zero,
}

impl WeightingMode {
    pub fn validate(&self) -> Result<()> {
        match *self {
            WeightingMode::Softmax { temperature } if !(temperature > 0.0 && temperature.is_finite()) => {
                Err(Error::Weighting(format!("temperature {temperature} must be positive")))
            }
            WeightingMode::Percentile { p, .. } if !(0.0..=100.0).contains(&p) => {
                Err(Error::Weighting(format!("percentile {p} outside [0, 100]")))
            }
            _ => Ok(()),
        }
    }

    /// Whether weights depend on scores at all.
    pub fn uses_scores(&self) -> bool {
        !matches!(self, WeightingMode::Uniform | WeightingMode::Zero)
    }

    /// Weights for one batch. `all_scores` is consulted only by a
    /// full-dataset percentile threshold.
    pub fn weights(&self, batch_scores: &[f64], all_scores: &[f64]) -> Result<Vec<f64>> {
        self.validate()?;
        match *self {
            WeightingMode::Maxmin => maxmin_weights(batch_scores),
            WeightingMode::Softmax { temperature } => softmax_weights(batch_scores, temperature),
            WeightingMode::Percentile { p, full_dataset: false } => percentile_filter(batch_scores, p),
            WeightingMode::Percentile { p, full_dataset: true } => {
                let t = nearest_rank(all_scores, p)?;
                Ok(batch_scores.iter().map(|&s| if s >= t { 1.0 } else { 0.0 }).collect())
            }
            WeightingMode::Uniform => Ok(vec![1.0; batch_scores.len()]),
            WeightingMode::Zero => Ok(vec![0.0; batch_scores.len()]),
        }
    }
}

fn check_scores(scores: &[f64]) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::Weighting("empty score list".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Weighting("non-finite score".into()));
    }
    Ok(())
}

/// w_i = (s_i − min) / (max − min); all ones when max = min.
pub fn maxmin_weights(scores: &[f64]) -> Result<Vec<f64>> {
    check_scores(scores)?;
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi == lo {
        return Ok(vec![1.0; scores.len()]);
    }
    let span = hi - lo;
    Ok(scores
        .iter()
        .map(|&s| {
            if s == hi {
                1.0
            } else {
                ((s - lo) / span).clamp(0.0, 1.0)
            }
        })
        .collect())
}

/// n · softmax(s / τ), so equal scores give weight 1 each.
pub fn softmax_weights(scores: &[f64], temperature: f64) -> Result<Vec<f64>> {
    check_scores(scores)?;
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::Weighting(format!("temperature {temperature} must be positive")));
    }
    let mx = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| ((s - mx) / temperature).exp()).collect();
    let z: f64 = e.iter().sum();
    let n = scores.len() as f64;
    Ok(e.into_iter().map(|x| n * x / z).collect())
}

/// Nearest-rank percentile: the value at 1-based rank min(n, ⌊p·n/100⌋ + 1)
/// of the ascending scores.
pub fn nearest_rank(scores: &[f64], p: f64) -> Result<f64> {
    check_scores(scores)?;
    if !(0.0..=100.0).contains(&p) {
        return Err(Error::Weighting(format!("percentile {p} outside [0, 100]")));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let n = sorted.len();
    let rank = ((p / 100.0 * n as f64).floor() as usize + 1).min(n);
    Ok(sorted[rank - 1])
}

/// 1 where the score is at or above the nearest-rank p-th percentile, else 0.
pub fn percentile_filter(scores: &[f64], p: f64) -> Result<Vec<f64>> {
    let t = nearest_rank(scores, p)?;
    Ok(scores.iter().map(|&s| if s >= t { 1.0 } else { 0.0 }).collect())
}

/// g = Σ w_i ∇ℓ_i, optionally divided by the batch size.
pub fn weighted_gradient(weights: &[f64], grads: &[Gradients], mean_normalize: bool) -> Result<Gradients> {
    if weights.len() != grads.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} weights for {} gradients",
            weights.len(),
            grads.len()
        )));
    }
    let first = grads
        .first()
        .ok_or_else(|| Error::ShapeMismatch("no gradients to combine".into()))?;
    let mut out = first.clone();
    out.data_mut().fill(0.0);
    for (w, g) in weights.iter().zip(grads) {
        if !out.is_congruent(g) {
            return Err(Error::ShapeMismatch("gradient layouts differ".into()));
        }
        out.add_scaled(g, *w);
    }
    if mean_normalize {
        out.scale(1.0 / grads.len() as f64);
    }
    Ok(out)
}

/// (min, mean, max) of a weight vector.
pub fn weight_stats(w: &[f64]) -> (f64, f64, f64) {
    let lo = w.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (lo, w.iter().sum::<f64>() / w.len() as f64, hi)
}
