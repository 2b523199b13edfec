//! Hard-mask magnitude baseline: a binary mask at the current ratio,
//! applied as a constant so pruned weights receive zero gradient. A pruned
//! weight can only be revived by threshold motion, never by learning —
//! the contrast case for soft masking.

use crate::mask::prune_count;
use crate::tensor::{Graph, Tensor, TensorError, VarId};

/// Keep bits for the top `n − round(ratio·n)` magnitudes; ties at the
/// boundary prune the lower flat index first, mirroring the threshold
/// selection rule.
pub fn hard_mask_bits(weights: &[f64], ratio: f64) -> Vec<bool> {
    let n = weights.len();
    let k = prune_count(n, ratio);
    if k == 0 {
        return vec![true; n];
    }
    let mut keyed: Vec<(f64, usize)> =
        weights.iter().enumerate().map(|(i, &w)| (w.abs(), i)).collect();
    keyed.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut bits = vec![true; n];
    for &(_, idx) in &keyed[..k] {
        bits[idx] = false;
    }
    bits
}

/// Binary magnitude mask as a {0,1} tensor.
pub fn hard_mask_tensor(w: &Tensor, ratio: f64) -> Tensor {
    let bits = hard_mask_bits(w.data(), ratio);
    let data: Vec<f64> = bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    Tensor::new(w.shape().to_vec(), data).expect("same shape")
}

/// Records the hard-masked forward of `w` at `ratio`: the mask enters the
/// graph as a constant, so backward multiplies incoming gradients by the
/// same binary mask and pruned weights get exactly zero update.
pub fn hard_baseline_step(
    g: &mut Graph,
    w: VarId,
    ratio: f64,
) -> Result<(VarId, Tensor), TensorError> {
    let mask = hard_mask_tensor(g.value(w), ratio);
    let m = g.constant(mask.clone());
    let masked = g.mul(m, w)?;
    Ok((masked, mask))
}
