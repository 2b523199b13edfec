//! Soft pruning-mask math: thresholds from target ratios, sigmoid masks,
//! masked weight application, hard finalization, and the closed-form
//! gradient factor used as an independent oracle for the autodiff path.
//!
//! The mask of a weight `w` under threshold `t` and temperature `tau` is
//! `m(w) = sigmoid((w^2 - t^2) / tau)` — the numerically stable form of the
//! two-way softmax over `[t^2, w^2] / tau`. The complement `z = 1 - m` is
//! the chance of the to-prune state; `z + m = 1` holds exactly by
//! construction, `m = 0.5` at `|w| = t`, and `m` is strictly increasing in
//! `|w|` for any `tau > 0`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::tensor::{stable_sigmoid, Graph, Tensor, TensorError, VarId};

#[derive(Debug, Clone, PartialEq)]
pub enum MaskError {
    EmptyWeights,
    RatioOutOfRange(f64),
    NonPositiveTau(f64),
    InvalidNm { n: usize, m: usize },
    Tensor(TensorError),
}

impl fmt::Display for MaskError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::EmptyWeights => write!(f, "input error: weights must be nonempty"),
            Self::RatioOutOfRange(r) => {
                write!(f, "input error: ratio {r} outside [0, 1)")
            }
            Self::NonPositiveTau(t) => write!(f, "input error: tau {t} must be positive"),
            Self::InvalidNm { n, m } => {
                write!(f, "input error: N:M requires 0 < N < M, got {n}:{m}")
            }
            Self::Tensor(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for MaskError {}

impl From<TensorError> for MaskError {
    fn from(e: TensorError) -> Self {
        Self::Tensor(e)
    }
}

/// Pruning granularity for one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PruneMode {
    Unstructured,
    Nm { n: usize, m: usize },
    Channel,
}

/// Per-entity pruning state: the current threshold, the temperature, the
/// granularity, and the effective (ramped) target ratio that produced `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskParams {
    pub threshold: f64,
    pub tau: f64,
    pub mode: PruneMode,
    pub effective_ratio: f64,
}

impl MaskParams {
    pub fn new(
        threshold: f64,
        tau: f64,
        mode: PruneMode,
        effective_ratio: f64,
    ) -> Result<Self, MaskError> {
        if !(tau > 0.0) {
            return Err(MaskError::NonPositiveTau(tau));
        }
        if threshold < 0.0 {
            return Err(MaskError::RatioOutOfRange(threshold));
        }
        if let PruneMode::Nm { n, m } = mode {
            if n == 0 || n >= m {
                return Err(MaskError::InvalidNm { n, m });
            }
        }
        Ok(Self { threshold, tau, mode, effective_ratio })
    }

    /// Unstructured params with a threshold computed elsewhere.
    pub fn unstructured(threshold: f64, tau: f64) -> Result<Self, MaskError> {
        Self::new(threshold, tau, PruneMode::Unstructured, 0.0)
    }

    /// Computes the threshold for `ratio` over `weights` and packages it.
    pub fn from_ratio(weights: &[f64], ratio: f64, tau: f64) -> Result<Self, MaskError> {
        let t = compute_threshold(weights, ratio)?;
        Self::new(t, tau, PruneMode::Unstructured, ratio)
    }
}

/// Number of weights a ratio prunes out of `n`, rounding half away from
/// zero and never consuming the whole layer.
pub(crate) fn prune_count(n: usize, ratio: f64) -> usize {
    let k = (ratio * n as f64).round() as usize;
    k.min(n.saturating_sub(1))
}

/// Threshold that separates the `k` smallest magnitudes from the rest:
/// halfway between the largest pruned and the smallest kept magnitude.
/// Magnitude ties at the boundary break by flat index (lower index lands
/// on the pruned side). Uses quickselect, not a full sort. For `k = 0`
/// the threshold sits at half the smallest magnitude so every weight is
/// comfortably on the keep side.
pub(crate) fn threshold_for_count(weights: &[f64], k: usize) -> f64 {
    debug_assert!(!weights.is_empty() && k < weights.len());
    if k == 0 {
        let min_abs = weights.iter().fold(f64::INFINITY, |m, &w| m.min(w.abs()));
        return 0.5 * min_abs;
    }
    let mut keyed: Vec<(f64, usize)> =
        weights.iter().enumerate().map(|(i, &w)| (w.abs(), i)).collect();
    let cmp = |a: &(f64, usize), b: &(f64, usize)| {
        a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
    };
    keyed.select_nth_unstable_by(k - 1, cmp);
    let max_low = keyed[k - 1].0;
    let min_high = keyed[k..].iter().map(|&(a, _)| a).fold(f64::INFINITY, f64::min);
    0.5 * (min_high + max_low)
}

/// Threshold for pruning the bottom `round(ratio·n)` magnitudes of
/// `weights`; see [`threshold_for_count`] for the selection rules.
pub fn compute_threshold(weights: &[f64], ratio: f64) -> Result<f64, MaskError> {
    if weights.is_empty() {
        return Err(MaskError::EmptyWeights);
    }
    if !(0.0..1.0).contains(&ratio) {
        return Err(MaskError::RatioOutOfRange(ratio));
    }
    Ok(threshold_for_count(weights, prune_count(weights.len(), ratio)))
}

/// m(w): the keep chance of a single weight value.
pub fn mask_value(w: f64, threshold: f64, tau: f64) -> f64 {
    let diff = w * w - threshold * threshold;
    if diff.is_nan() {
        // Both squares overflowed; decide by magnitude alone.
        let (aw, at) = (w.abs(), threshold.abs());
        return if aw > at {
            1.0
        } else if aw < at {
            0.0
        } else {
            0.5
        };
    }
    stable_sigmoid(diff / tau)
}

/// z(w) = 1 − m(w): the to-prune chance.
pub fn z_value(w: f64, threshold: f64, tau: f64) -> f64 {
    1.0 - mask_value(w, threshold, tau)
}

/// Elementwise soft mask of `w` as plain values (no graph recording).
pub fn soft_mask_values(w: &Tensor, params: &MaskParams) -> Tensor {
    let data: Vec<f64> =
        w.data().iter().map(|&v| mask_value(v, params.threshold, params.tau)).collect();
    Tensor::new(w.shape().to_vec(), data).expect("same shape")
}

/// Records the soft mask `m(w)` on the graph so gradients flow through it.
/// The threshold enters as a detached constant; no gradient reaches `t`.
pub fn soft_mask(g: &mut Graph, w: VarId, params: &MaskParams) -> Result<VarId, MaskError> {
    if !(params.tau > 0.0) {
        return Err(MaskError::NonPositiveTau(params.tau));
    }
    let sq = g.square(w);
    let t2 = g.constant(Tensor::scalar(params.threshold * params.threshold));
    let shifted = g.sub(sq, t2)?;
    let scaled = g.scale(shifted, 1.0 / params.tau);
    Ok(g.sigmoid(scaled))
}

/// ŵ = m(w) ⊙ w, fully on the graph: gradients flow to `w` through both
/// the mask and the weight factor.
pub fn apply_mask(g: &mut Graph, w: VarId, params: &MaskParams) -> Result<VarId, MaskError> {
    let m = soft_mask(g, w, params)?;
    Ok(g.mul(m, w)?)
}

/// Masked weights as plain values (eval-mode forward).
pub fn apply_mask_values(w: &Tensor, params: &MaskParams) -> Tensor {
    let data: Vec<f64> = w
        .data()
        .iter()
        .map(|&v| v * mask_value(v, params.threshold, params.tau))
        .collect();
    Tensor::new(w.shape().to_vec(), data).expect("same shape")
}

/// Closed form of dŵ/dw: `m + 2·(w²/τ)·m·(1−m)`. The second term boosts
/// movement of weights near the threshold and vanishes at both mask
/// extremes; this is the independent oracle for the autodiff route.
pub fn analytic_grad_factor(w: f64, params: &MaskParams) -> f64 {
    let m = mask_value(w, params.threshold, params.tau);
    let boost = 2.0 * (w * w / params.tau) * m * (1.0 - m);
    if boost.is_nan() {
        // w²/τ overflowed against an underflowed m·(1−m); the product is 0
        // in the saturated regimes.
        return m;
    }
    m + boost
}

/// Rounds the soft mask to {0,1} and applies it. Returns the pruned
/// weights and the binary mask; a mask value of exactly 0.5 (|w| = t,
/// only under ties) rounds up to keep.
pub fn finalize_hard(w: &Tensor, params: &MaskParams) -> (Tensor, Tensor) {
    let mask: Vec<f64> = w
        .data()
        .iter()
        .map(|&v| mask_value(v, params.threshold, params.tau).round())
        .collect();
    let pruned: Vec<f64> = w.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
    (
        Tensor::new(w.shape().to_vec(), pruned).expect("same shape"),
        Tensor::new(w.shape().to_vec(), mask).expect("same shape"),
    )
}

/// Fraction of zero entries in a binary mask.
pub fn mask_sparsity(mask: &Tensor) -> f64 {
    let zeros = mask.data().iter().filter(|&&m| m == 0.0).count();
    zeros as f64 / mask.len() as f64
}
