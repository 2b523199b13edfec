//! Multiply-accumulate accounting under binary masks. A weight costs MACs
//! only if it is nonzero *and* its input channel/feature still carries
//! signal; all-zero output channels propagate dead inputs downstream, so
//! channel pruning shrinks the layers after it.
//!
//! Conventions: a linear weight costs 1 MAC per sample; a conv weight
//! costs one MAC per output spatial position (padded taps included).

use crate::harness::model::{LayerSpec, ModelSpec};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Clone, PartialEq)]
pub struct MacReport {
    pub per_layer: Vec<(String, u64)>,
    pub total: u64,
}

/// Liveness of the signal entering a layer.
enum Live {
    Flat(Vec<bool>),
    Channels { live: Vec<bool>, h: usize, w: usize },
}

/// Per-sample MAC count of `spec` under per-weight-layer binary `masks`.
/// Pass all-ones masks for the dense count.
pub fn mac_count(
    spec: &ModelSpec,
    input_shape: &[usize],
    masks: &[Tensor],
) -> Result<MacReport, TensorError> {
    if masks.len() != spec.weight_layer_count() {
        return Err(TensorError::Input(format!(
            "{} masks for {} weight layers",
            masks.len(),
            spec.weight_layer_count()
        )));
    }
    let names = spec.weight_layer_names();
    let mut live = match input_shape {
        [f] => Live::Flat(vec![true; *f]),
        [c, h, w] => Live::Channels { live: vec![true; *c], h: *h, w: *w },
        other => {
            return Err(TensorError::Input(format!("unsupported input shape {other:?}")))
        }
    };
    let mut per_layer = Vec::new();
    let mut wi = 0usize;
    for layer in &spec.layers {
        match *layer {
            LayerSpec::Linear { inp, out } => {
                let in_live = flat_liveness(&live, inp)?;
                let mask = &masks[wi];
                if mask.shape() != [out, inp] {
                    return Err(TensorError::ShapeMismatch {
                        expected: vec![out, inp],
                        got: mask.shape().to_vec(),
                    });
                }
                let mut macs = 0u64;
                let mut out_live = vec![false; out];
                for j in 0..out {
                    for i in 0..inp {
                        if mask.data()[j * inp + i] != 0.0 && in_live[i] {
                            macs += 1;
                            out_live[j] = true;
                        }
                    }
                }
                per_layer.push((names[wi].clone(), macs));
                live = Live::Flat(out_live);
                wi += 1;
            }
            LayerSpec::Conv2d { c_in, c_out, kernel, stride, padding } => {
                let (in_live, h, w) = channel_liveness(&live, c_in)?;
                let mask = &masks[wi];
                if mask.shape() != [c_out, c_in, kernel, kernel] {
                    return Err(TensorError::ShapeMismatch {
                        expected: vec![c_out, c_in, kernel, kernel],
                        got: mask.shape().to_vec(),
                    });
                }
                let ho = (h + 2 * padding - kernel) / stride + 1;
                let wo = (w + 2 * padding - kernel) / stride + 1;
                let positions = (ho * wo) as u64;
                let mut macs = 0u64;
                let mut out_live = vec![false; c_out];
                let per_ci = kernel * kernel;
                for co in 0..c_out {
                    for ci in 0..c_in {
                        if !in_live[ci] {
                            continue;
                        }
                        let base = (co * c_in + ci) * per_ci;
                        let nnz = mask.data()[base..base + per_ci]
                            .iter()
                            .filter(|&&m| m != 0.0)
                            .count() as u64;
                        if nnz > 0 {
                            macs += nnz * positions;
                            out_live[co] = true;
                        }
                    }
                }
                per_layer.push((names[wi].clone(), macs));
                live = Live::Channels { live: out_live, h: ho, w: wo };
                wi += 1;
            }
            LayerSpec::Relu => {}
            LayerSpec::Flatten => {
                if let Live::Channels { live: ch, h, w } = &live {
                    let mut flat = Vec::with_capacity(ch.len() * h * w);
                    for &c_live in ch {
                        flat.extend(std::iter::repeat(c_live).take(h * w));
                    }
                    live = Live::Flat(flat);
                }
            }
        }
    }
    let total = per_layer.iter().map(|(_, m)| m).sum();
    Ok(MacReport { per_layer, total })
}

fn flat_liveness(live: &Live, expected: usize) -> Result<Vec<bool>, TensorError> {
    let flat = match live {
        Live::Flat(f) => f.clone(),
        Live::Channels { live: ch, h, w } => {
            let mut flat = Vec::with_capacity(ch.len() * h * w);
            for &c_live in ch {
                flat.extend(std::iter::repeat(c_live).take(h * w));
            }
            flat
        }
    };
    if flat.len() != expected {
        return Err(TensorError::Dimension(format!(
            "{} live features flowing into a layer expecting {expected}",
            flat.len()
        )));
    }
    Ok(flat)
}

fn channel_liveness(live: &Live, c_in: usize) -> Result<(Vec<bool>, usize, usize), TensorError> {
    match live {
        Live::Channels { live: ch, h, w } if ch.len() == c_in => Ok((ch.clone(), *h, *w)),
        Live::Flat(f) if f.len() % c_in == 0 => {
            let hw = f.len() / c_in;
            let side = (hw as f64).sqrt().round() as usize;
            if side * side != hw {
                return Err(TensorError::Dimension(format!("{hw} pixels is not square")));
            }
            // a channel is live if any of its pixels is
            let ch: Vec<bool> =
                f.chunks(hw).map(|px| px.iter().any(|&b| b)).collect();
            Ok((ch, side, side))
        }
        _ => Err(TensorError::Dimension("liveness does not match conv input".into())),
    }
}

/// All-ones masks for every weight layer of a spec.
pub fn dense_masks(spec: &ModelSpec) -> Vec<Tensor> {
    spec.layers
        .iter()
        .filter_map(|layer| match *layer {
            LayerSpec::Linear { inp, out } => {
                Some(Tensor::new(vec![out, inp], vec![1.0; out * inp]).unwrap())
            }
            LayerSpec::Conv2d { c_in, c_out, kernel, .. } => Some(
                Tensor::new(
                    vec![c_out, c_in, kernel, kernel],
                    vec![1.0; c_out * c_in * kernel * kernel],
                )
                .unwrap(),
            ),
            _ => None,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::model::ModelSpec;

    fn linear_only(inp: usize, out: usize) -> ModelSpec {
        ModelSpec {
            name: "lin".into(),
            layers: vec![LayerSpec::Linear { inp, out }],
            prunable: vec![true],
            init_seed: 0,
        }
    }

    #[test]
    fn dense_linear_macs() {
        let spec = linear_only(100, 10);
        let report = mac_count(&spec, &[100], &dense_masks(&spec)).unwrap();
        assert_eq!(report.total, 1000);
    }

    #[test]
    fn dense_conv_macs() {
        let spec = ModelSpec {
            name: "conv".into(),
            layers: vec![LayerSpec::Conv2d { c_in: 1, c_out: 1, kernel: 3, stride: 1, padding: 0 }],
            prunable: vec![true],
            init_seed: 0,
        };
        // 3x3 kernel on 5x5 input → 9 weights × 9 positions
        let report = mac_count(&spec, &[1, 5, 5], &dense_masks(&spec)).unwrap();
        assert_eq!(report.total, 81);
    }

    #[test]
    fn masked_linear_counts_nonzeros() {
        let spec = linear_only(4, 2);
        let mask = Tensor::new(vec![2, 4], vec![1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let report = mac_count(&spec, &[4], &[mask]).unwrap();
        assert_eq!(report.total, 3);
    }

    #[test]
    fn dead_channel_kills_downstream_macs() {
        let spec = ModelSpec {
            name: "two_conv".into(),
            layers: vec![
                LayerSpec::Conv2d { c_in: 1, c_out: 2, kernel: 3, stride: 1, padding: 1 },
                LayerSpec::Relu,
                LayerSpec::Conv2d { c_in: 2, c_out: 2, kernel: 3, stride: 1, padding: 1 },
            ],
            prunable: vec![true, true],
            init_seed: 0,
        };
        let mut masks = dense_masks(&spec);
        // kill output channel 1 of the first conv
        masks[0].data_mut()[9..18].fill(0.0);
        let report = mac_count(&spec, &[1, 4, 4], &masks).unwrap();
        // conv0: 9 live weights × 16 positions; conv1: input channel 1 is
        // dead, so only 2 output channels × 9 weights over channel 0 count
        assert_eq!(report.per_layer[0].1, 9 * 16);
        assert_eq!(report.per_layer[1].1, 2 * 9 * 16);
    }

    #[test]
    fn totals_are_sums() {
        let spec = ModelSpec::mlp(0);
        let report = mac_count(&spec, &[784], &dense_masks(&spec)).unwrap();
        let sum: u64 = report.per_layer.iter().map(|(_, m)| m).sum();
        assert_eq!(report.total, sum);
        assert_eq!(report.total, (256 * 784 + 128 * 256 + 10 * 128) as u64);
    }
}
