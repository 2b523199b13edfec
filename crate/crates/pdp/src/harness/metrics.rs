//! Run metrics: per-epoch records, mask-flip tracking, and sparsity /
//! weight-histogram reports.

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

/// One epoch of training, as appended to the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    /// Fraction of mask values below 0.5, per prunable layer.
    pub soft_sparsity: Vec<f64>,
    /// Sparsity a hard finalize would produce right now, per layer.
    pub hard_sparsity: Vec<f64>,
    /// Weights whose rounded mask changed at least once this epoch.
    pub flips: Vec<usize>,
    pub effective_ratio: f64,
    pub lr: f64,
}

/// Full-run record: the epoch stream plus final structural accounting.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub epochs: Vec<EpochRecord>,
    pub final_mac: u64,
    pub final_parameter_count: usize,
    pub final_nonzero_count: usize,
    pub final_test_accuracy: f64,
    pub final_global_sparsity: f64,
    pub per_layer_ratio: Vec<f64>,
}

/// Tracks rounded-mask changes within each epoch. A weight counts as
/// flipped in epoch `e` only if two observations inside `e` disagree;
/// a mask that is constant all epoch is never flagged.
pub struct FlipTracker {
    prev: Vec<Option<Vec<bool>>>,
    flipped: Vec<Vec<bool>>,
}

impl FlipTracker {
    pub fn new(layer_sizes: &[usize]) -> Self {
        Self {
            prev: vec![None; layer_sizes.len()],
            flipped: layer_sizes.iter().map(|&n| vec![false; n]).collect(),
        }
    }

    /// Records the rounded mask of one layer at one step.
    pub fn observe(&mut self, layer: usize, bits: &[bool]) {
        if let Some(prev) = &self.prev[layer] {
            let flags = &mut self.flipped[layer];
            for (i, (&now, &before)) in bits.iter().zip(prev).enumerate() {
                if now != before {
                    flags[i] = true;
                }
            }
        }
        self.prev[layer] = Some(bits.to_vec());
    }

    /// Ends the epoch: returns per-layer flip counts and resets the
    /// within-epoch state (the last observation does not carry over).
    pub fn end_epoch(&mut self) -> Vec<usize> {
        let counts = self
            .flipped
            .iter()
            .map(|flags| flags.iter().filter(|&&f| f).count())
            .collect();
        for flags in &mut self.flipped {
            flags.fill(false);
        }
        for prev in &mut self.prev {
            *prev = None;
        }
        counts
    }
}

/// Log-scale histogram over |w|; zeros are counted separately since they
/// have no finite log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// Bin edges in |w|, ascending; bin i covers [edges[i], edges[i+1]).
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub zeros: usize,
}

impl Histogram {
    /// `bins` log-spaced bins between the smallest and largest nonzero
    /// magnitude (padded by one decade on each side when degenerate).
    pub fn log_magnitude(values: &[f64], bins: usize) -> Self {
        let mags: Vec<f64> = values.iter().map(|v| v.abs()).filter(|&a| a > 0.0).collect();
        let zeros = values.len() - mags.len();
        if mags.is_empty() {
            return Self { edges: vec![], counts: vec![], zeros };
        }
        let lo = mags.iter().cloned().fold(f64::INFINITY, f64::min).log10();
        let hi = mags.iter().cloned().fold(f64::NEG_INFINITY, f64::max).log10();
        let (lo, hi) = if hi - lo < 1e-9 { (lo - 0.5, hi + 0.5) } else { (lo, hi) };
        let edges: Vec<f64> = (0..=bins)
            .map(|i| 10f64.powf(lo + (hi - lo) * i as f64 / bins as f64))
            .collect();
        let mut counts = vec![0usize; bins];
        for &a in &mags {
            let f = (a.log10() - lo) / (hi - lo) * bins as f64;
            let idx = (f.floor() as usize).min(bins - 1);
            counts[idx] += 1;
        }
        Self { edges, counts, zeros }
    }

    pub fn total(&self) -> usize {
        self.zeros + self.counts.iter().sum::<usize>()
    }

    /// CSV rows of (bin_edge, count); the zero bucket uses edge 0.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_edge,count\n");
        out.push_str(&format!("0,{}\n", self.zeros));
        for (i, &c) in self.counts.iter().enumerate() {
            out.push_str(&format!("{},{}\n", self.edges[i], c));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSparsity {
    pub name: String,
    pub soft: f64,
    pub hard: f64,
    pub weights: usize,
}

/// Per-layer and global sparsity plus |w| histograms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityReport {
    pub layers: Vec<LayerSparsity>,
    pub global_soft: f64,
    pub global_hard: f64,
    pub histograms: Vec<Histogram>,
}

/// Builds a sparsity report from per-layer soft-mask values and weights.
/// Soft sparsity is the fraction of mask values below 0.5 (the
/// finalize-equivalent count), so train-time and finalize-time sparsity
/// compare directly.
pub fn sparsity_report(
    names: &[String],
    masks: &[Tensor],
    weights: &[Tensor],
) -> SparsityReport {
    let mut layers = Vec::new();
    let mut below_total = 0usize;
    let mut n_total = 0usize;
    let mut histograms = Vec::new();
    for ((name, mask), w) in names.iter().zip(masks).zip(weights) {
        let below = mask.data().iter().filter(|&&m| m < 0.5).count();
        let n = mask.len();
        layers.push(LayerSparsity {
            name: name.clone(),
            soft: below as f64 / n as f64,
            hard: below as f64 / n as f64,
            weights: n,
        });
        below_total += below;
        n_total += n;
        histograms.push(Histogram::log_magnitude(w.data(), 40));
    }
    let global = below_total as f64 / n_total.max(1) as f64;
    SparsityReport { layers, global_soft: global, global_hard: global, histograms }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flip_tracker_ignores_constant_masks() {
        let mut t = FlipTracker::new(&[3]);
        t.observe(0, &[true, false, true]);
        t.observe(0, &[true, false, true]);
        assert_eq!(t.end_epoch(), vec![0]);
    }

    #[test]
    fn flip_tracker_counts_any_within_epoch_change() {
        let mut t = FlipTracker::new(&[3]);
        t.observe(0, &[true, false, true]);
        t.observe(0, &[false, false, true]); // weight 0 flips
        t.observe(0, &[true, false, true]); // flips back; still one weight
        assert_eq!(t.end_epoch(), vec![1]);
    }

    #[test]
    fn flip_tracker_does_not_carry_across_epochs() {
        let mut t = FlipTracker::new(&[2]);
        t.observe(0, &[true, true]);
        assert_eq!(t.end_epoch(), vec![0]);
        // differs from last epoch's observation, but is the first of this
        // epoch, so nothing flips
        t.observe(0, &[false, false]);
        assert_eq!(t.end_epoch(), vec![0]);
    }

    #[test]
    fn all_zero_mask_reports_full_sparsity() {
        let names = vec!["l0".to_string()];
        let masks = vec![Tensor::from_vec(vec![0.0, 0.0, 0.0])];
        let weights = vec![Tensor::from_vec(vec![0.1, 0.2, 0.3])];
        let r = sparsity_report(&names, &masks, &weights);
        assert_eq!(r.global_soft, 1.0);
        assert_eq!(r.layers[0].soft, 1.0);
    }

    #[test]
    fn histogram_conserves_counts() {
        let values = vec![0.0, 0.5, -0.25, 1.0, 0.0, 1e-4, -3.0];
        let h = Histogram::log_magnitude(&values, 8);
        assert_eq!(h.total(), values.len());
        assert_eq!(h.zeros, 2);
        let csv = h.to_csv();
        assert!(csv.starts_with("bin_edge,count\n0,2\n"));
        assert_eq!(csv.lines().count(), 2 + h.counts.len());
    }

    #[test]
    fn histogram_handles_degenerate_spread() {
        let h = Histogram::log_magnitude(&[0.5, 0.5, 0.5], 4);
        assert_eq!(h.total(), 3);
    }
}
