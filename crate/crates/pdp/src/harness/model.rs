//! Model zoo: layer specs that compose by shape, seeded initialization,
//! and a forward builder that threads pruning masks into the graph.

use serde::{Deserialize, Serialize};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::mask::MaskParams;
use crate::structured::{self, NmConfig};
use crate::tensor::{Graph, Tensor, TensorError, VarId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "layer")]
pub enum LayerSpec {
    Linear { inp: usize, out: usize },
    Conv2d { c_in: usize, c_out: usize, kernel: usize, stride: usize, padding: usize },
    Relu,
    Flatten,
}

impl LayerSpec {
    pub fn has_weights(&self) -> bool {
        matches!(self, LayerSpec::Linear { .. } | LayerSpec::Conv2d { .. })
    }
}

/// Ordered layer list plus prunability flags for each weight-bearing
/// layer (biases are never pruned).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub layers: Vec<LayerSpec>,
    /// One flag per weight-bearing layer, in order.
    pub prunable: Vec<bool>,
    pub init_seed: u64,
}

impl ModelSpec {
    /// The classification MLP used throughout: 784-256-128-10.
    pub fn mlp(seed: u64) -> Self {
        Self {
            name: "mlp".to_string(),
            layers: vec![
                LayerSpec::Linear { inp: 784, out: 256 },
                LayerSpec::Relu,
                LayerSpec::Linear { inp: 256, out: 128 },
                LayerSpec::Relu,
                LayerSpec::Linear { inp: 128, out: 10 },
            ],
            prunable: vec![true, true, true],
            init_seed: seed,
        }
    }

    /// A downsized MLP for fast property runs.
    pub fn tiny_mlp(inp: usize, hidden: usize, classes: usize, seed: u64) -> Self {
        Self {
            name: "tiny_mlp".to_string(),
            layers: vec![
                LayerSpec::Linear { inp, out: hidden },
                LayerSpec::Relu,
                LayerSpec::Linear { inp: hidden, out: classes },
            ],
            prunable: vec![true, true],
            init_seed: seed,
        }
    }

    /// Two-conv CNN over 1×28×28 inputs; exercises channel and N:M modes.
    pub fn cnn(seed: u64) -> Self {
        Self {
            name: "cnn".to_string(),
            layers: vec![
                LayerSpec::Conv2d { c_in: 1, c_out: 8, kernel: 3, stride: 2, padding: 1 },
                LayerSpec::Relu,
                LayerSpec::Conv2d { c_in: 8, c_out: 16, kernel: 3, stride: 2, padding: 1 },
                LayerSpec::Relu,
                LayerSpec::Flatten,
                LayerSpec::Linear { inp: 16 * 7 * 7, out: 10 },
            ],
            prunable: vec![true, true, true],
            init_seed: seed,
        }
    }

    pub fn by_name(name: &str, seed: u64) -> Option<Self> {
        match name {
            "mlp" => Some(Self::mlp(seed)),
            "cnn" => Some(Self::cnn(seed)),
            _ => None,
        }
    }

    /// Output shape after all layers, or a composition error.
    pub fn output_shape(&self, input_shape: &[usize]) -> Result<Vec<usize>, TensorError> {
        let mut shape = input_shape.to_vec();
        for layer in &self.layers {
            shape = layer_output_shape(layer, &shape)?;
        }
        Ok(shape)
    }

    pub fn weight_layer_count(&self) -> usize {
        self.layers.iter().filter(|l| l.has_weights()).count()
    }

    /// Names like `linear0`, `conv1`, indexed by weight-layer order.
    pub fn weight_layer_names(&self) -> Vec<String> {
        self.layers
            .iter()
            .filter(|l| l.has_weights())
            .enumerate()
            .map(|(i, l)| match l {
                LayerSpec::Linear { .. } => format!("linear{i}"),
                LayerSpec::Conv2d { .. } => format!("conv{i}"),
                _ => unreachable!(),
            })
            .collect()
    }

    pub fn validate(&self, input_shape: &[usize]) -> Result<(), TensorError> {
        if self.prunable.len() != self.weight_layer_count() {
            return Err(TensorError::Input(format!(
                "{} prunable flags for {} weight layers",
                self.prunable.len(),
                self.weight_layer_count()
            )));
        }
        self.output_shape(input_shape).map(|_| ())
    }
}

/// Per-sample output shape of one layer (no batch axis).
fn layer_output_shape(layer: &LayerSpec, shape: &[usize]) -> Result<Vec<usize>, TensorError> {
    match *layer {
        LayerSpec::Linear { inp, out } => {
            if shape != [inp] {
                return Err(TensorError::ShapeMismatch { expected: vec![inp], got: shape.to_vec() });
            }
            Ok(vec![out])
        }
        LayerSpec::Conv2d { c_in, c_out, kernel, stride, padding } => {
            if shape.len() != 3 || shape[0] != c_in {
                return Err(TensorError::ShapeMismatch {
                    expected: vec![c_in, 0, 0],
                    got: shape.to_vec(),
                });
            }
            let (h, w) = (shape[1], shape[2]);
            if kernel > h + 2 * padding || kernel > w + 2 * padding {
                return Err(TensorError::Dimension("conv kernel exceeds padded input".into()));
            }
            let ho = (h + 2 * padding - kernel) / stride + 1;
            let wo = (w + 2 * padding - kernel) / stride + 1;
            Ok(vec![c_out, ho, wo])
        }
        LayerSpec::Relu => Ok(shape.to_vec()),
        LayerSpec::Flatten => Ok(vec![shape.iter().product()]),
    }
}

/// How one prunable layer's weights are transformed during a forward pass.
#[derive(Debug, Clone)]
pub enum LayerMask {
    /// Dense: weights pass through untouched.
    None,
    /// Differentiable sigmoid mask at the given unstructured params.
    Soft(MaskParams),
    /// Differentiable N:M group mask.
    SoftNm { cfg: NmConfig, tau: f64 },
    /// Differentiable channel mask at the given effective ratio.
    SoftChannel { ratio: f64, tau: f64 },
    /// Constant binary mask; pruned weights get zero gradient.
    Binary(Tensor),
}

/// Instantiated parameters for a [`ModelSpec`].
pub struct Model {
    pub spec: ModelSpec,
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
}

impl Model {
    /// He-uniform initialization, deterministic per `spec.init_seed`.
    pub fn init(spec: ModelSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.init_seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for layer in &spec.layers {
            match *layer {
                LayerSpec::Linear { inp, out } => {
                    let bound = (6.0 / inp as f64).sqrt();
                    let data: Vec<f64> =
                        (0..out * inp).map(|_| rng.gen_range(-bound..bound)).collect();
                    weights.push(Tensor::new(vec![out, inp], data).unwrap().with_grad());
                    biases.push(Tensor::new(vec![out], vec![0.0; out]).unwrap().with_grad());
                }
                LayerSpec::Conv2d { c_in, c_out, kernel, .. } => {
                    let fan_in = c_in * kernel * kernel;
                    let bound = (6.0 / fan_in as f64).sqrt();
                    let data: Vec<f64> =
                        (0..c_out * fan_in).map(|_| rng.gen_range(-bound..bound)).collect();
                    weights.push(
                        Tensor::new(vec![c_out, c_in, kernel, kernel], data).unwrap().with_grad(),
                    );
                    biases.push(Tensor::new(vec![c_out], vec![0.0; c_out]).unwrap().with_grad());
                }
                _ => {}
            }
        }
        Self { spec, weights, biases }
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.iter().map(Tensor::len).sum::<usize>()
            + self.biases.iter().map(Tensor::len).sum::<usize>()
    }

    pub fn weight_count(&self) -> usize {
        self.weights.iter().map(Tensor::len).sum()
    }

    /// Builds the forward pass on `g` from a batch input leaf, applying
    /// `masks[i]` to the i-th weight-bearing layer. The input is expected
    /// as `[B, features]` and is reshaped to `[B, C, H, W]` in front of
    /// conv layers as needed. Returns the logits plus the (weight, bias)
    /// leaf ids per layer so callers can read gradients back out.
    pub fn forward_with_params(
        &self,
        g: &mut Graph,
        input: VarId,
        input_shape: &[usize],
        masks: &[LayerMask],
    ) -> Result<ForwardPass, TensorError> {
        let batch = g.value(input).shape()[0];
        let mut x = input;
        let mut shape = input_shape.to_vec();
        let mut wi = 0usize;
        let mut params = Vec::new();
        for layer in &self.spec.layers {
            match *layer {
                LayerSpec::Linear { inp, out } => {
                    if shape != [inp] {
                        // collapse any leading structure (e.g. after conv)
                        let flat: usize = shape.iter().product();
                        if flat != inp {
                            return Err(TensorError::ShapeMismatch {
                                expected: vec![inp],
                                got: shape.clone(),
                            });
                        }
                        x = g.reshape(x, vec![batch, inp])?;
                    }
                    let w = g.leaf(&self.weights[wi]);
                    let b = g.leaf(&self.biases[wi]);
                    params.push((w, b));
                    let w_eff = apply_layer_mask(g, w, &masks[wi])?;
                    let y = g.matmul_nt(x, w_eff)?;
                    x = g.add_row_bias(y, b)?;
                    shape = vec![out];
                    wi += 1;
                }
                LayerSpec::Conv2d { c_in, c_out, stride, padding, .. } => {
                    if shape.len() != 3 {
                        let (h, w2) = infer_square(&shape, c_in)?;
                        x = g.reshape(x, vec![batch, c_in, h, w2])?;
                    } else {
                        x = g.reshape(x, {
                            let mut s = vec![batch];
                            s.extend_from_slice(&shape);
                            s
                        })?;
                    }
                    let w = g.leaf(&self.weights[wi]);
                    let b = g.leaf(&self.biases[wi]);
                    params.push((w, b));
                    let w_eff = apply_layer_mask(g, w, &masks[wi])?;
                    let y = g.conv2d(x, w_eff, stride, padding)?;
                    let y = g.add_channel_bias(y, b)?;
                    let so = g.value(y).shape().to_vec();
                    shape = vec![c_out, so[2], so[3]];
                    x = y;
                    wi += 1;
                }
                LayerSpec::Relu => {
                    x = g.relu(x);
                }
                LayerSpec::Flatten => {
                    let flat: usize = shape.iter().product();
                    x = g.reshape(x, vec![batch, flat])?;
                    shape = vec![flat];
                }
            }
        }
        Ok(ForwardPass { logits: x, params })
    }

    /// Forward pass when only the logits are needed.
    pub fn forward(
        &self,
        g: &mut Graph,
        input: VarId,
        input_shape: &[usize],
        masks: &[LayerMask],
    ) -> Result<VarId, TensorError> {
        Ok(self.forward_with_params(g, input, input_shape, masks)?.logits)
    }
}

/// Logits plus the (weight, bias) leaf ids recorded during a forward.
pub struct ForwardPass {
    pub logits: VarId,
    pub params: Vec<(VarId, VarId)>,
}

fn infer_square(shape: &[usize], c_in: usize) -> Result<(usize, usize), TensorError> {
    let flat: usize = shape.iter().product();
    if flat % c_in != 0 {
        return Err(TensorError::Dimension(format!(
            "cannot reshape {flat} features into {c_in} channels"
        )));
    }
    let hw = flat / c_in;
    let side = (hw as f64).sqrt().round() as usize;
    if side * side != hw {
        return Err(TensorError::Dimension(format!("{hw} pixels is not square")));
    }
    Ok((side, side))
}

fn apply_layer_mask(g: &mut Graph, w: VarId, mask: &LayerMask) -> Result<VarId, TensorError> {
    match mask {
        LayerMask::None => Ok(w),
        LayerMask::Soft(params) => crate::mask::apply_mask(g, w, params)
            .map_err(|e| TensorError::Input(e.to_string())),
        LayerMask::SoftNm { cfg, tau } => {
            let m = structured::nm_soft_mask(g, w, cfg, *tau)
                .map_err(|e| TensorError::Input(e.to_string()))?;
            g.mul(m, w)
        }
        LayerMask::SoftChannel { ratio, tau } => {
            let (m, _) = structured::channel_soft_mask(g, w, *ratio, *tau)
                .map_err(|e| TensorError::Input(e.to_string()))?;
            g.mul(m, w)
        }
        LayerMask::Binary(mask) => {
            let m = g.constant(mask.clone());
            g.mul(m, w)
        }
    }
}
