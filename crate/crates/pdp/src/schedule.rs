//! End-to-end training flow: dense warm-up, one-time global sparsity
//! allocation, epoch-wise sparsity ramp, per-batch threshold refresh with
//! soft-masked forwards, and final hard pruning.

use std::fmt;
use std::path::{Path, PathBuf};

use crate::harness::metrics::{EpochRecord, FlipTracker, RunMetrics};
use crate::harness::model::{LayerMask, Model};
use crate::harness::{mac, Dataset};
use crate::mask::{self, MaskError, MaskParams, PruneMode};
use crate::structured::{self, NmConfig, StructuredError};
use crate::tensor::{Graph, LrSchedule, Sgd, Tensor, TensorError};

#[derive(Debug)]
pub enum ScheduleError {
    RatioOutOfRange(f64),
    NonPositiveRampStep(f64),
    WarmupBeyondTotal { warmup: usize, total: usize },
    AllocationMismatch(String),
    Diverged { epoch: usize, batch: usize, diagnostics: String },
    Io(std::io::Error),
    Parse(String),
    Mask(MaskError),
    Structured(StructuredError),
    Tensor(TensorError),
}

impl fmt::Display for ScheduleError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::RatioOutOfRange(r) => write!(f, "input error: ratio {r} outside [0, 1)"),
            Self::NonPositiveRampStep(e) => {
                write!(f, "input error: ramp step {e} must be positive")
            }
            Self::WarmupBeyondTotal { warmup, total } => {
                write!(f, "input error: warm-up {warmup} exceeds total epochs {total}")
            }
            Self::AllocationMismatch(msg) => write!(f, "input error: {msg}"),
            Self::Diverged { epoch, batch, diagnostics } => {
                write!(f, "training diverged at epoch {epoch}, batch {batch}: {diagnostics}")
            }
            Self::Io(e) => write!(f, "io error: {e}"),
            Self::Parse(msg) => write!(f, "format error: {msg}"),
            Self::Mask(e) => write!(f, "{e}"),
            Self::Structured(e) => write!(f, "{e}"),
            Self::Tensor(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for ScheduleError {}

impl From<std::io::Error> for ScheduleError {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e)
    }
}

impl From<MaskError> for ScheduleError {
    fn from(e: MaskError) -> Self {
        Self::Mask(e)
    }
}

impl From<StructuredError> for ScheduleError {
    fn from(e: StructuredError) -> Self {
        Self::Structured(e)
    }
}

impl From<TensorError> for ScheduleError {
    fn from(e: TensorError) -> Self {
        Self::Tensor(e)
    }
}

/// Global target ratio, warm-up length, per-epoch ramp step, and the
/// per-layer ratios frozen at the end of warm-up.
#[derive(Debug, Clone, PartialEq)]
pub struct SparsitySchedule {
    pub global_ratio: f64,
    pub warmup_epochs: usize,
    pub ramp_step: f64,
    pub total_epochs: usize,
    /// Frozen at epoch `warmup_epochs`; empty until then.
    pub per_layer_ratios: Vec<f64>,
}

impl SparsitySchedule {
    pub fn new(
        global_ratio: f64,
        warmup_epochs: usize,
        ramp_step: f64,
        total_epochs: usize,
    ) -> Result<Self, ScheduleError> {
        if !(0.0..1.0).contains(&global_ratio) {
            return Err(ScheduleError::RatioOutOfRange(global_ratio));
        }
        if !(ramp_step > 0.0) {
            return Err(ScheduleError::NonPositiveRampStep(ramp_step));
        }
        if warmup_epochs > total_epochs || total_epochs == 0 {
            return Err(ScheduleError::WarmupBeyondTotal {
                warmup: warmup_epochs,
                total: total_epochs.max(1),
            });
        }
        Ok(Self {
            global_ratio,
            warmup_epochs,
            ramp_step,
            total_epochs,
            per_layer_ratios: Vec::new(),
        })
    }

    /// min(1, ε·(e−s)); zero during warm-up.
    pub fn ramp_scale(&self, epoch: usize) -> f64 {
        if epoch < self.warmup_epochs {
            0.0
        } else {
            (self.ramp_step * (epoch - self.warmup_epochs) as f64).min(1.0)
        }
    }

    /// First epoch at which the ramp reaches the full target.
    pub fn full_ramp_epoch(&self) -> usize {
        self.warmup_epochs + (1.0 / self.ramp_step).ceil() as usize
    }
}

/// Where per-layer ratios come from at the end of warm-up.
#[derive(Debug, Clone, PartialEq)]
pub enum AllocationSource {
    /// Bottom r·n(W) magnitudes selected globally (the default).
    GlobalMagnitude,
    /// User-provided ratios, one per prunable layer.
    Manual(Vec<f64>),
    /// Ratios imported from an allocation file of `name ratio` lines.
    FromFile(PathBuf),
}

/// Converts a global ratio into per-layer ratios by selecting the
/// `round(r·n_total)` smallest magnitudes across all layers; ratio of
/// layer i is the fraction of its weights in that set. Boundary ties
/// break by (layer, flat index) order.
pub fn allocate_per_layer(
    layer_weights: &[&[f64]],
    global_ratio: f64,
) -> Result<Vec<f64>, ScheduleError> {
    if !(0.0..1.0).contains(&global_ratio) {
        return Err(ScheduleError::RatioOutOfRange(global_ratio));
    }
    let n_total: usize = layer_weights.iter().map(|w| w.len()).sum();
    if n_total == 0 {
        return Err(ScheduleError::AllocationMismatch("no prunable weights".into()));
    }
    let k = (global_ratio * n_total as f64).round() as usize;
    let mut counts = vec![0usize; layer_weights.len()];
    if k > 0 {
        let mut keyed: Vec<(f64, usize)> = Vec::with_capacity(n_total);
        for (li, w) in layer_weights.iter().enumerate() {
            for &v in *w {
                keyed.push((v.abs(), li));
            }
        }
        // global index order is the push order, so (abs, position) ties
        // resolve by layer then flat index; the sort key index is implicit
        // in select_nth's stability workaround below
        let mut idx: Vec<usize> = (0..n_total).collect();
        idx.select_nth_unstable_by(k - 1, |&a, &b| {
            keyed[a].0.total_cmp(&keyed[b].0).then(a.cmp(&b))
        });
        for &i in &idx[..k] {
            counts[keyed[i].1] += 1;
        }
    }
    Ok(layer_weights
        .iter()
        .zip(&counts)
        .map(|(w, &c)| c as f64 / w.len() as f64)
        .collect())
}

/// Writes `name ratio` lines; `#` starts a comment.
pub fn write_allocation(
    path: &Path,
    names: &[String],
    ratios: &[f64],
) -> Result<(), ScheduleError> {
    let mut out = String::from("# per-layer pruning ratios\n");
    for (name, r) in names.iter().zip(ratios) {
        out.push_str(&format!("{name} {r}\n"));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Reads an allocation file of `name ratio` lines.
pub fn read_allocation(path: &Path) -> Result<Vec<(String, f64)>, ScheduleError> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let name = parts
            .next()
            .ok_or_else(|| ScheduleError::Parse(format!("line {}: missing name", lineno + 1)))?;
        let ratio: f64 = parts
            .next()
            .ok_or_else(|| ScheduleError::Parse(format!("line {}: missing ratio", lineno + 1)))?
            .parse()
            .map_err(|e| ScheduleError::Parse(format!("line {}: {e}", lineno + 1)))?;
        if !(0.0..=1.0).contains(&ratio) {
            return Err(ScheduleError::Parse(format!(
                "line {}: ratio {ratio} outside [0, 1]",
                lineno + 1
            )));
        }
        out.push((name.to_string(), ratio));
    }
    Ok(out)
}

/// Advisory warm-up suggestion: the first epoch after `skip_epochs` from
/// which validation accuracy exceeded half the accuracy upper bound for 5
/// consecutive epochs; the suggestion is the epoch after that window.
pub fn warmup_heuristic(
    val_accuracy: &[f64],
    upper_bound: f64,
    skip_epochs: usize,
) -> Option<usize> {
    const WINDOW: usize = 5;
    let bar = 0.5 * upper_bound;
    let mut run = 0usize;
    for (epoch, &acc) in val_accuracy.iter().enumerate().skip(skip_epochs) {
        if acc > bar {
            run += 1;
            if run == WINDOW {
                return Some(epoch + 1);
            }
        } else {
            run = 0;
        }
    }
    None
}

/// Pruning method under the shared schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// Differentiable soft masks recomputed per batch.
    Pdp,
    /// Binary magnitude masks at the same ramped ratios; pruned weights
    /// receive zero gradient.
    HardBaseline,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_schedule: LrSchedule,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { lr: 0.1, momentum: 0.9, weight_decay: 1e-4, lr_schedule: LrSchedule::Constant }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub schedule: SparsitySchedule,
    pub allocation: AllocationSource,
    /// One mode per weight-bearing layer; ignored for non-prunable layers.
    pub modes: Vec<PruneMode>,
    pub optimizer: OptimizerConfig,
    pub tau: f64,
    pub seed: u64,
    pub batch_size: usize,
    pub method: Method,
    /// If set, a copy of the raw weights is taken right when this many
    /// epochs have completed (before any masking of the next epoch).
    pub snapshot_epoch: Option<usize>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub metrics: RunMetrics,
    /// Binary mask per weight-bearing layer (all ones where not pruned).
    pub final_masks: Vec<Tensor>,
    /// Frozen per-layer ratios over prunable layers.
    pub per_layer_ratios: Vec<f64>,
    /// Raw weights captured at `snapshot_epoch`, when requested.
    pub snapshot: Option<Vec<Tensor>>,
}

/// Runs the full training flow on `model`, mutating its weights in place
/// (the final weights are hard-pruned). Epochs before `warmup_epochs`
/// are bit-identical to a dense run under the same seed.
pub fn train_with_pdp(
    model: &mut Model,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, ScheduleError> {
    let n_layers = model.weights.len();
    if cfg.modes.len() != n_layers {
        return Err(ScheduleError::AllocationMismatch(format!(
            "{} modes for {} weight layers",
            cfg.modes.len(),
            n_layers
        )));
    }
    if !(cfg.tau > 0.0) {
        return Err(ScheduleError::Mask(MaskError::NonPositiveTau(cfg.tau)));
    }
    let mut schedule = cfg.schedule.clone();
    let prunable = model.spec.prunable.clone();
    let input_shape = vec![train.n_features];
    let mut sgd = Sgd::new(cfg.optimizer.momentum, cfg.optimizer.weight_decay);
    let mut tracker = FlipTracker::new(
        &model.weights.iter().map(Tensor::len).collect::<Vec<_>>(),
    );
    let mut metrics = RunMetrics::default();
    let mut ratios: Option<Vec<f64>> = None;
    let mut snapshot: Option<Vec<Tensor>> = None;

    for epoch in 0..schedule.total_epochs {
        if cfg.snapshot_epoch == Some(epoch) {
            snapshot = Some(model.weights.clone());
        }
        let lr = cfg.optimizer.lr_schedule.lr_at(
            cfg.optimizer.lr,
            epoch,
            schedule.total_epochs,
        );
        if epoch == schedule.warmup_epochs {
            let frozen = resolve_allocation(model, &prunable, cfg, &schedule)?;
            schedule.per_layer_ratios = frozen.clone();
            ratios = Some(frozen);
        }
        let scale = schedule.ramp_scale(epoch);
        let effective: Vec<f64> = match &ratios {
            Some(r) => r.iter().map(|ri| scale * ri).collect(),
            None => vec![0.0; n_layers],
        };

        let indices = train.shuffled_indices(cfg.seed.wrapping_add(epoch as u64));
        let mut epoch_loss = 0.0;
        let mut correct = 0usize;
        let mut batches = 0usize;
        for (bi, chunk) in indices.chunks(cfg.batch_size).enumerate() {
            let masks = build_masks(model, cfg, epoch, &effective, &prunable)?;
            observe_flips(&mut tracker, model, &masks, &prunable);

            let (feats, labels) = train.gather(chunk);
            let mut g = Graph::new();
            let input =
                g.constant(Tensor::new(vec![chunk.len(), train.n_features], feats)?);
            let pass = model.forward_with_params(&mut g, input, &input_shape, &masks)?;
            correct += count_correct(g.value(pass.logits), &labels);
            let loss = g.softmax_cross_entropy(pass.logits, &labels)?;
            let loss_value = g.scalar_value(loss);
            if !loss_value.is_finite() {
                return Err(ScheduleError::Diverged {
                    epoch,
                    batch: bi,
                    diagnostics: diagnostics(model, loss_value),
                });
            }
            epoch_loss += loss_value;
            batches += 1;
            g.backward(loss)?;

            for (li, &(wid, bid)) in pass.params.iter().enumerate() {
                let w_grad = g.grad(wid).expect("weight requires grad").to_vec();
                let b_grad = g.grad(bid).expect("bias requires grad").to_vec();
                model.weights[li].set_grad(w_grad)?;
                model.biases[li].set_grad(b_grad)?;
            }
            let mut params: Vec<&mut Tensor> = Vec::with_capacity(2 * n_layers);
            for (w, b) in model.weights.iter_mut().zip(model.biases.iter_mut()) {
                params.push(w);
                params.push(b);
            }
            sgd.step(&mut params, lr)?;
        }

        let flips = tracker.end_epoch();
        let masks = build_masks(model, cfg, epoch, &effective, &prunable)?;
        let (soft_sp, hard_sp) = sparsity_under_masks(model, &masks);
        let val_accuracy = evaluate(model, val, &masks, cfg.batch_size)?;
        metrics.epochs.push(EpochRecord {
            epoch,
            loss: epoch_loss / batches.max(1) as f64,
            train_accuracy: correct as f64 / indices.len() as f64,
            val_accuracy,
            soft_sparsity: soft_sp,
            hard_sparsity: hard_sp,
            flips,
            effective_ratio: scale * schedule.global_ratio,
            lr,
        });
    }

    if cfg.snapshot_epoch == Some(schedule.total_epochs) {
        snapshot = Some(model.weights.clone());
    }

    // If training never reached the allocation epoch, nothing is pruned.
    let last_scale = schedule.ramp_scale(schedule.total_epochs.saturating_sub(1));
    let frozen = ratios.unwrap_or_else(|| vec![0.0; n_layers]);
    let final_masks = finalize_model(model, cfg, &frozen, last_scale, &prunable)?;

    let none_masks: Vec<LayerMask> = vec![LayerMask::None; n_layers];
    metrics.final_test_accuracy = evaluate(model, val, &none_masks, cfg.batch_size)?;
    metrics.final_mac = mac::mac_count(&model.spec, &input_shape, &final_masks)?.total;
    metrics.final_parameter_count = model.parameter_count();
    let (nonzero, prunable_total, prunable_zeros) = nonzero_stats(model, &prunable);
    metrics.final_nonzero_count = nonzero;
    metrics.final_global_sparsity = prunable_zeros as f64 / prunable_total.max(1) as f64;
    metrics.per_layer_ratio = frozen
        .iter()
        .zip(&prunable)
        .filter(|(_, &p)| p)
        .map(|(&r, _)| r)
        .collect();

    Ok(TrainOutcome { metrics, final_masks, per_layer_ratios: frozen, snapshot })
}

fn resolve_allocation(
    model: &Model,
    prunable: &[bool],
    cfg: &TrainConfig,
    schedule: &SparsitySchedule,
) -> Result<Vec<f64>, ScheduleError> {
    let n_layers = model.weights.len();
    let prunable_weights: Vec<&[f64]> = model
        .weights
        .iter()
        .zip(prunable)
        .filter(|(_, &p)| p)
        .map(|(w, _)| w.data())
        .collect();
    let prunable_ratios: Vec<f64> = match &cfg.allocation {
        AllocationSource::GlobalMagnitude => {
            allocate_per_layer(&prunable_weights, schedule.global_ratio)?
        }
        AllocationSource::Manual(r) => {
            if r.len() != prunable_weights.len() {
                return Err(ScheduleError::AllocationMismatch(format!(
                    "{} manual ratios for {} prunable layers",
                    r.len(),
                    prunable_weights.len()
                )));
            }
            if let Some(&bad) = r.iter().find(|&&x| !(0.0..=1.0).contains(&x)) {
                return Err(ScheduleError::RatioOutOfRange(bad));
            }
            r.clone()
        }
        AllocationSource::FromFile(path) => {
            let by_name = read_allocation(path)?;
            let names = model.spec.weight_layer_names();
            let prunable_names: Vec<&String> =
                names.iter().zip(prunable).filter(|(_, &p)| p).map(|(n, _)| n).collect();
            prunable_names
                .iter()
                .map(|n| {
                    by_name
                        .iter()
                        .find(|(name, _)| name == *n)
                        .map(|(_, r)| *r)
                        .ok_or_else(|| {
                            ScheduleError::AllocationMismatch(format!(
                                "allocation file missing layer {n}"
                            ))
                        })
                })
                .collect::<Result<_, _>>()?
        }
    };
    // expand back to all weight layers; non-prunable stay at 0
    let mut all = vec![0.0; n_layers];
    let mut pi = 0;
    for (li, &p) in prunable.iter().enumerate() {
        if p {
            all[li] = prunable_ratios[pi];
            pi += 1;
        }
    }
    Ok(all)
}

fn build_masks(
    model: &Model,
    cfg: &TrainConfig,
    epoch: usize,
    effective: &[f64],
    prunable: &[bool],
) -> Result<Vec<LayerMask>, ScheduleError> {
    let mut masks = Vec::with_capacity(model.weights.len());
    for (li, w) in model.weights.iter().enumerate() {
        if epoch < cfg.schedule.warmup_epochs || !prunable[li] {
            masks.push(LayerMask::None);
            continue;
        }
        match cfg.method {
            Method::HardBaseline => {
                masks.push(LayerMask::Binary(crate::harness::baseline::hard_mask_tensor(
                    w,
                    effective[li],
                )));
            }
            Method::Pdp => match cfg.modes[li] {
                PruneMode::Unstructured => {
                    let params = MaskParams::from_ratio(w.data(), effective[li], cfg.tau)?;
                    masks.push(LayerMask::Soft(params));
                }
                PruneMode::Nm { n, m } => {
                    let nm = NmConfig::new(n, m)?;
                    masks.push(LayerMask::SoftNm { cfg: nm, tau: cfg.tau });
                }
                PruneMode::Channel => {
                    masks.push(LayerMask::SoftChannel { ratio: effective[li], tau: cfg.tau });
                }
            },
        }
    }
    Ok(masks)
}

fn observe_flips(
    tracker: &mut FlipTracker,
    model: &Model,
    masks: &[LayerMask],
    prunable: &[bool],
) {
    for (li, mask) in masks.iter().enumerate() {
        if !prunable[li] {
            continue;
        }
        let bits = match mask {
            LayerMask::None => continue,
            LayerMask::Soft(params) => model.weights[li]
                .data()
                .iter()
                .map(|&v| v.abs() >= params.threshold)
                .collect::<Vec<bool>>(),
            LayerMask::SoftNm { cfg, tau } => {
                match structured::nm_soft_mask_values(&model.weights[li], cfg, *tau) {
                    Ok(m) => m.data().iter().map(|&v| v >= 0.5).collect(),
                    Err(_) => continue,
                }
            }
            LayerMask::SoftChannel { ratio, tau } => {
                match structured::channel_soft_mask_values(&model.weights[li], *ratio, *tau) {
                    Ok(m) => m.data().iter().map(|&v| v >= 0.5).collect(),
                    Err(_) => continue,
                }
            }
            LayerMask::Binary(m) => m.data().iter().map(|&v| v != 0.0).collect(),
        };
        tracker.observe(li, &bits);
    }
}

fn sparsity_under_masks(model: &Model, masks: &[LayerMask]) -> (Vec<f64>, Vec<f64>) {
    let mut soft = Vec::new();
    let mut hard = Vec::new();
    for (li, mask) in masks.iter().enumerate() {
        let w = &model.weights[li];
        let below = match mask {
            LayerMask::None => 0,
            LayerMask::Soft(params) => {
                mask::soft_mask_values(w, params).data().iter().filter(|&&m| m < 0.5).count()
            }
            LayerMask::SoftNm { cfg, tau } => structured::nm_soft_mask_values(w, cfg, *tau)
                .map(|m| m.data().iter().filter(|&&v| v < 0.5).count())
                .unwrap_or(0),
            LayerMask::SoftChannel { ratio, tau } => {
                structured::channel_soft_mask_values(w, *ratio, *tau)
                    .map(|m| m.data().iter().filter(|&&v| v < 0.5).count())
                    .unwrap_or(0)
            }
            LayerMask::Binary(m) => m.data().iter().filter(|&&v| v == 0.0).count(),
        };
        soft.push(below as f64 / w.len() as f64);
        hard.push(below as f64 / w.len() as f64);
    }
    (soft, hard)
}

fn count_correct(logits: &Tensor, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    labels
        .iter()
        .enumerate()
        .filter(|(row, &label)| {
            let r = &logits.data()[row * k..(row + 1) * k];
            let mut best = 0;
            for (j, &v) in r.iter().enumerate() {
                if v > r[best] {
                    best = j;
                }
            }
            best == label
        })
        .count()
}

/// Accuracy of the model on `data` under the given masks, batched.
pub fn evaluate(
    model: &Model,
    data: &Dataset,
    masks: &[LayerMask],
    batch_size: usize,
) -> Result<f64, ScheduleError> {
    let input_shape = vec![data.n_features];
    let indices: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0usize;
    for chunk in indices.chunks(batch_size.max(1)) {
        let (feats, labels) = data.gather(chunk);
        let mut g = Graph::new();
        let input = g.constant(Tensor::new(vec![chunk.len(), data.n_features], feats)?);
        let logits = eval_forward(model, &mut g, input, &input_shape, masks)?;
        correct += count_correct(g.value(logits), &labels);
    }
    Ok(correct as f64 / data.len().max(1) as f64)
}

/// Forward with weights recorded as constants (no gradient bookkeeping).
fn eval_forward(
    model: &Model,
    g: &mut Graph,
    input: crate::tensor::VarId,
    input_shape: &[usize],
    masks: &[LayerMask],
) -> Result<crate::tensor::VarId, ScheduleError> {
    // Reuse Model::forward; leaves of a graph without backward cost only
    // their clone.
    Ok(model.forward(g, input, input_shape, masks)?)
}

fn diagnostics(model: &Model, loss: f64) -> String {
    let mut out = format!("loss={loss}");
    for (li, w) in model.weights.iter().enumerate() {
        let finite = w.is_finite();
        let max = w.data().iter().fold(0.0f64, |m, &v| m.max(v.abs()));
        out.push_str(&format!("; layer{li}: finite={finite} max|w|={max:.3e}"));
    }
    out
}

/// Hard-finalizes every layer per its mode: unstructured and channel at
/// the last ramped ratio, N:M at its structural pattern. Mutates the
/// model weights and returns the binary masks.
fn finalize_model(
    model: &mut Model,
    cfg: &TrainConfig,
    frozen: &[f64],
    last_scale: f64,
    prunable: &[bool],
) -> Result<Vec<Tensor>, ScheduleError> {
    let mut final_masks = Vec::with_capacity(model.weights.len());
    for li in 0..model.weights.len() {
        let w = model.weights[li].clone();
        if !prunable[li] || cfg.schedule.warmup_epochs >= cfg.schedule.total_epochs {
            final_masks.push(Tensor::new(w.shape().to_vec(), vec![1.0; w.len()])?);
            continue;
        }
        let ratio = last_scale * frozen[li];
        let (pruned, mask) = match cfg.method {
            Method::HardBaseline => {
                let mask = crate::harness::baseline::hard_mask_tensor(&w, ratio);
                let pruned: Vec<f64> =
                    w.data().iter().zip(mask.data()).map(|(&v, &m)| v * m).collect();
                (Tensor::new(w.shape().to_vec(), pruned)?, mask)
            }
            Method::Pdp => match cfg.modes[li] {
                PruneMode::Unstructured => {
                    let params = MaskParams::from_ratio(w.data(), ratio, cfg.tau)?;
                    mask::finalize_hard(&w, &params)
                }
                PruneMode::Nm { n, m } => {
                    let nm = NmConfig::new(n, m)?;
                    structured::finalize_nm(&w, &nm)?
                }
                PruneMode::Channel => structured::finalize_channel(&w, ratio)?,
            },
        };
        let grad_state = model.weights[li].requires_grad();
        model.weights[li] = if grad_state { pruned.with_grad() } else { pruned };
        final_masks.push(mask);
    }
    Ok(final_masks)
}

fn nonzero_stats(model: &Model, prunable: &[bool]) -> (usize, usize, usize) {
    let mut nonzero = 0usize;
    let mut prunable_total = 0usize;
    let mut prunable_zeros = 0usize;
    for (li, w) in model.weights.iter().enumerate() {
        let zeros = w.data().iter().filter(|&&v| v == 0.0).count();
        nonzero += w.len() - zeros;
        if prunable[li] {
            prunable_total += w.len();
            prunable_zeros += zeros;
        }
    }
    (nonzero, prunable_total, prunable_zeros)
}
