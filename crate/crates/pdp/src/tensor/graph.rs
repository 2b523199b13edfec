//! Reverse-mode automatic differentiation over an append-only tape.
//!
//! Each training step builds a fresh [`Graph`]: leaves are copied in, ops
//! are recorded in execution order (which is already a topological order),
//! and `backward` walks the tape once in reverse. Shapes must match exactly
//! except for the documented scalar-with-tensor broadcast in `add`/`sub`/
//! `mul`; the bias and channel helpers carry their own reduction rules.

use super::{stable_sigmoid, Tensor, TensorError};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: VarId, b: VarId },
    /// C = A · Bᵀ with A[m×k], B[n×k]; the natural layout for row-major
    /// linear weights whose rows are output units.
    MatMulNT { a: VarId, b: VarId },
    Conv2d { input: VarId, kernel: VarId, stride: usize, padding: usize },
    Add { a: VarId, b: VarId },
    Sub { a: VarId, b: VarId },
    Mul { a: VarId, b: VarId },
    Relu { x: VarId },
    Square { x: VarId },
    Sigmoid { x: VarId },
    Exp { x: VarId },
    Scale { x: VarId, c: f64 },
    Reshape { x: VarId },
    Sum { x: VarId },
    /// x[B×F] + bias[F], broadcast over rows.
    AddRowBias { x: VarId, bias: VarId },
    /// x[N×C×H×W] + bias[C], broadcast over batch and spatial positions.
    AddChannelBias { x: VarId, bias: VarId },
    /// Per-output-channel sum of squares over axis 0: w[C×rest] → [C].
    ChannelSqNorm { x: VarId },
    /// w[C×rest] scaled per channel by s[C].
    ChannelScale { x: VarId, s: VarId },
    SoftmaxCrossEntropy { logits: VarId, labels: Vec<usize>, probs: Vec<f64> },
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Append-only computation tape; single-threaded per training step.
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), backward_done: false }
    }

    /// Records a leaf, inheriting the tensor's `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor) -> VarId {
        self.push(t.clone(), t.requires_grad(), Op::Leaf)
    }

    /// Records a non-differentiable constant.
    pub fn constant(&mut self, t: Tensor) -> VarId {
        self.push(t, false, Op::Leaf)
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// The scalar payload of a single-element value.
    pub fn scalar_value(&self, id: VarId) -> f64 {
        self.nodes[id.0].value.data()[0]
    }

    /// Gradient buffer of a node after `backward`; `None` when the node
    /// does not require grad.
    pub fn grad(&self, id: VarId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> VarId {
        let id = VarId(self.nodes.len());
        self.nodes.push(Node { value, grad: None, requires_grad, op });
        id
    }

    fn needs_grad(&self, ids: &[VarId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId, TensorError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch { expected: sa.to_vec(), got: sb.to_vec() });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(value, rg, Op::MatMul { a, b }))
    }

    /// C[m×n] = A[m×k] · B[n×k]ᵀ.
    pub fn matmul_nt(&mut self, a: VarId, b: VarId) -> Result<VarId, TensorError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(TensorError::ShapeMismatch { expected: sa.to_vec(), got: sb.to_vec() });
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &da[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &db[j * k..(j + 1) * k];
                out[i * n + j] = dot(arow, brow);
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(value, rg, Op::MatMulNT { a, b }))
    }

    /// Cross-correlation with zero padding. Input [N×C_in×H×W], kernel
    /// [C_out×C_in×kH×kW]; output extent floor((H+2p−kH)/stride)+1.
    pub fn conv2d(
        &mut self,
        input: VarId,
        kernel: VarId,
        stride: usize,
        padding: usize,
    ) -> Result<VarId, TensorError> {
        let (si, sk) = (self.value(input).shape(), self.value(kernel).shape());
        if si.len() != 4 || sk.len() != 4 || si[1] != sk[1] {
            return Err(TensorError::ShapeMismatch { expected: si.to_vec(), got: sk.to_vec() });
        }
        if stride == 0 {
            return Err(TensorError::Input("stride must be positive".into()));
        }
        let (n, c_in, h, w) = (si[0], si[1], si[2], si[3]);
        let (c_out, kh, kw) = (sk[0], sk[2], sk[3]);
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(TensorError::Dimension(format!(
                "kernel {kh}x{kw} exceeds padded input {}x{}",
                h + 2 * padding,
                w + 2 * padding
            )));
        }
        let ho = (h + 2 * padding - kh) / stride + 1;
        let wo = (w + 2 * padding - kw) / stride + 1;
        let value = conv2d_raw(
            self.value(input).data(),
            self.value(kernel).data(),
            n, c_in, h, w, c_out, kh, kw, stride, padding, ho, wo,
        );
        let value = Tensor::new(vec![n, c_out, ho, wo], value)?;
        let rg = self.needs_grad(&[input, kernel]);
        Ok(self.push(value, rg, Op::Conv2d { input, kernel, stride, padding }))
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId, TensorError> {
        self.binary_ew(a, b, |x, y| x + y, |a, b| Op::Add { a, b })
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId, TensorError> {
        self.binary_ew(a, b, |x, y| x - y, |a, b| Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId, TensorError> {
        self.binary_ew(a, b, |x, y| x * y, |a, b| Op::Mul { a, b })
    }

    /// Elementwise binary op with exact shape match or single-element
    /// broadcast on either side; anything else is rejected.
    fn binary_ew(
        &mut self,
        a: VarId,
        b: VarId,
        f: impl Fn(f64, f64) -> f64,
        mk: impl Fn(VarId, VarId) -> Op,
    ) -> Result<VarId, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = if ta.shape() == tb.shape() {
            ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect::<Vec<_>>()
        } else if tb.len() == 1 {
            let y = tb.data()[0];
            ta.data().iter().map(|&x| f(x, y)).collect()
        } else if ta.len() == 1 {
            let x = ta.data()[0];
            tb.data().iter().map(|&y| f(x, y)).collect()
        } else {
            return Err(TensorError::ShapeMismatch {
                expected: ta.shape().to_vec(),
                got: tb.shape().to_vec(),
            });
        };
        let shape = if ta.len() >= tb.len() { ta.shape().to_vec() } else { tb.shape().to_vec() };
        let value = Tensor::new(shape, data)?;
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(value, rg, mk(a, b)))
    }

    pub fn relu(&mut self, x: VarId) -> VarId {
        self.unary(x, |v| v.max(0.0), |x| Op::Relu { x })
    }

    pub fn square(&mut self, x: VarId) -> VarId {
        self.unary(x, |v| v * v, |x| Op::Square { x })
    }

    pub fn sigmoid(&mut self, x: VarId) -> VarId {
        self.unary(x, stable_sigmoid, |x| Op::Sigmoid { x })
    }

    pub fn exp(&mut self, x: VarId) -> VarId {
        self.unary(x, f64::exp, |x| Op::Exp { x })
    }

    pub fn scale(&mut self, x: VarId, c: f64) -> VarId {
        self.unary(x, |v| v * c, |x| Op::Scale { x, c })
    }

    fn unary(&mut self, x: VarId, f: impl Fn(f64) -> f64, mk: impl Fn(VarId) -> Op) -> VarId {
        let t = self.value(x);
        let data: Vec<f64> = t.data().iter().map(|&v| f(v)).collect();
        let shape = t.shape().to_vec();
        let rg = self.nodes[x.0].requires_grad;
        self.push(Tensor::new(shape, data).expect("same shape"), rg, mk(x))
    }

    pub fn reshape(&mut self, x: VarId, shape: Vec<usize>) -> Result<VarId, TensorError> {
        let value = self.value(x).reshape(shape)?;
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(value, rg, Op::Reshape { x }))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: VarId) -> VarId {
        let s: f64 = self.value(x).data().iter().sum();
        let rg = self.nodes[x.0].requires_grad;
        self.push(Tensor::scalar(s), rg, Op::Sum { x })
    }

    pub fn add_row_bias(&mut self, x: VarId, bias: VarId) -> Result<VarId, TensorError> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tx.shape().len() != 2 || tb.shape() != [tx.shape()[1]] {
            return Err(TensorError::ShapeMismatch {
                expected: tx.shape().to_vec(),
                got: tb.shape().to_vec(),
            });
        }
        let cols = tx.shape()[1];
        let data: Vec<f64> =
            tx.data().iter().enumerate().map(|(i, &v)| v + tb.data()[i % cols]).collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.needs_grad(&[x, bias]);
        Ok(self.push(value, rg, Op::AddRowBias { x, bias }))
    }

    pub fn add_channel_bias(&mut self, x: VarId, bias: VarId) -> Result<VarId, TensorError> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tx.shape().len() != 4 || tb.shape() != [tx.shape()[1]] {
            return Err(TensorError::ShapeMismatch {
                expected: tx.shape().to_vec(),
                got: tb.shape().to_vec(),
            });
        }
        let (c, hw) = (tx.shape()[1], tx.shape()[2] * tx.shape()[3]);
        let data: Vec<f64> = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + tb.data()[(i / hw) % c])
            .collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.needs_grad(&[x, bias]);
        Ok(self.push(value, rg, Op::AddChannelBias { x, bias }))
    }

    /// Sum of squares per output channel (axis 0); the square of each
    /// channel's L2 norm, kept differentiable for channel masks.
    pub fn channel_sq_norm(&mut self, x: VarId) -> Result<VarId, TensorError> {
        let t = self.value(x);
        if t.shape().is_empty() {
            return Err(TensorError::Dimension("need at least one axis".into()));
        }
        let c = t.shape()[0];
        let per = t.len() / c;
        let mut out = vec![0.0; c];
        for (ci, chunk) in t.data().chunks(per).enumerate() {
            out[ci] = chunk.iter().map(|&v| v * v).sum();
        }
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(Tensor::from_vec(out), rg, Op::ChannelSqNorm { x }))
    }

    /// Scales every element of channel `c` (axis 0) by `s[c]`.
    pub fn channel_scale(&mut self, x: VarId, s: VarId) -> Result<VarId, TensorError> {
        let (tx, ts) = (self.value(x), self.value(s));
        if tx.shape().is_empty() || ts.shape() != [tx.shape()[0]] {
            return Err(TensorError::ShapeMismatch {
                expected: tx.shape().to_vec(),
                got: ts.shape().to_vec(),
            });
        }
        let per = tx.len() / tx.shape()[0];
        let data: Vec<f64> =
            tx.data().iter().enumerate().map(|(i, &v)| v * ts.data()[i / per]).collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.needs_grad(&[x, s]);
        Ok(self.push(value, rg, Op::ChannelScale { x, s }))
    }

    /// Mean over the batch of −log softmax(logits)[label], stabilized by
    /// max subtraction. Labels index rows of `logits[B×K]`.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: VarId,
        labels: &[usize],
    ) -> Result<VarId, TensorError> {
        let t = self.value(logits);
        if t.shape().len() != 2 || t.shape()[0] != labels.len() {
            return Err(TensorError::ShapeMismatch {
                expected: vec![labels.len(), 0],
                got: t.shape().to_vec(),
            });
        }
        let (b, k) = (t.shape()[0], t.shape()[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(TensorError::Input(format!("label {bad} out of range 0..{k}")));
        }
        let mut probs = vec![0.0; b * k];
        let mut loss = 0.0;
        for (row, &label) in labels.iter().enumerate() {
            let r = &t.data()[row * k..(row + 1) * k];
            let max = r.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let mut denom = 0.0;
            for (j, &v) in r.iter().enumerate() {
                let e = (v - max).exp();
                probs[row * k + j] = e;
                denom += e;
            }
            for p in &mut probs[row * k..(row + 1) * k] {
                *p /= denom;
            }
            loss += denom.ln() - (r[label] - max);
        }
        let value = Tensor::scalar(loss / b as f64);
        let rg = self.nodes[logits.0].requires_grad;
        Ok(self.push(value, rg, Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec(), probs }))
    }

    /// Fills gradient buffers by a single reverse sweep from a scalar loss.
    /// Every `requires_grad` leaf receives dLoss/dLeaf (zeros if unused).
    pub fn backward(&mut self, loss: VarId) -> Result<(), TensorError> {
        if self.backward_done {
            return Err(TensorError::State("backward already ran on this graph".into()));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(TensorError::Input("backward requires a scalar loss".into()));
        }
        self.backward_done = true;
        self.nodes[loss.0].grad = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let g = self.nodes[i].grad.clone().expect("checked above");
            self.propagate(i, &op, &g);
        }

        // Unused grad-requiring leaves still get a (zero) gradient.
        for node in &mut self.nodes {
            if node.requires_grad && node.grad.is_none() {
                node.grad = Some(vec![0.0; node.value.len()]);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, id: VarId, contrib: &[f64]) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        let n = self.nodes[id.0].value.len();
        let buf = self.nodes[id.0].grad.get_or_insert_with(|| vec![0.0; n]);
        if contrib.len() == buf.len() {
            for (b, &c) in buf.iter_mut().zip(contrib) {
                *b += c;
            }
        } else {
            // Scalar operand fed into a broadcast op: reduce by summation.
            debug_assert_eq!(buf.len(), 1);
            buf[0] += contrib.iter().sum::<f64>();
        }
    }

    fn propagate(&mut self, out: usize, op: &Op, g: &[f64]) {
        match op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (sa, sb) = (self.value(*a).shape().to_vec(), self.value(*b).shape().to_vec());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (da, db) = (self.value(*a).data().to_vec(), self.value(*b).data().to_vec());
                // dA[i,p] = Σ_j g[i,j]·B[p,j]
                let mut ga = vec![0.0; m * k];
                for i in 0..m {
                    for p in 0..k {
                        ga[i * k + p] = dot(&g[i * n..(i + 1) * n], &db[p * n..(p + 1) * n]);
                    }
                }
                // dB[p,j] = Σ_i A[i,p]·g[i,j]
                let mut gb = vec![0.0; k * n];
                for i in 0..m {
                    for p in 0..k {
                        let av = da[i * k + p];
                        if av != 0.0 {
                            let grow = &g[i * n..(i + 1) * n];
                            let brow = &mut gb[p * n..(p + 1) * n];
                            for (bv, &gv) in brow.iter_mut().zip(grow) {
                                *bv += av * gv;
                            }
                        }
                    }
                }
                self.accumulate(*a, &ga);
                self.accumulate(*b, &gb);
            }
            Op::MatMulNT { a, b } => {
                let (sa, sb) = (self.value(*a).shape().to_vec(), self.value(*b).shape().to_vec());
                let (m, k, n) = (sa[0], sa[1], sb[0]);
                let (da, db) = (self.value(*a).data().to_vec(), self.value(*b).data().to_vec());
                // dA[i,p] = Σ_j g[i,j]·B[j,p]
                let mut ga = vec![0.0; m * k];
                for i in 0..m {
                    for j in 0..n {
                        let gv = g[i * n + j];
                        if gv != 0.0 {
                            let brow = &db[j * k..(j + 1) * k];
                            let arow = &mut ga[i * k..(i + 1) * k];
                            for (av, &bv) in arow.iter_mut().zip(brow) {
                                *av += gv * bv;
                            }
                        }
                    }
                }
                // dB[j,p] = Σ_i g[i,j]·A[i,p]
                let mut gb = vec![0.0; n * k];
                for i in 0..m {
                    let arow = &da[i * k..(i + 1) * k];
                    for j in 0..n {
                        let gv = g[i * n + j];
                        if gv != 0.0 {
                            let brow = &mut gb[j * k..(j + 1) * k];
                            for (bv, &av) in brow.iter_mut().zip(arow) {
                                *bv += gv * av;
                            }
                        }
                    }
                }
                self.accumulate(*a, &ga);
                self.accumulate(*b, &gb);
            }
            Op::Conv2d { input, kernel, stride, padding } => {
                let si = self.value(*input).shape().to_vec();
                let sk = self.value(*kernel).shape().to_vec();
                let (n, c_in, h, w) = (si[0], si[1], si[2], si[3]);
                let (c_out, kh, kw) = (sk[0], sk[2], sk[3]);
                let so = self.nodes[out].value.shape().to_vec();
                let (ho, wo) = (so[2], so[3]);
                let din = self.value(*input).data().to_vec();
                let dker = self.value(*kernel).data().to_vec();
                let mut gi = vec![0.0; din.len()];
                let mut gk = vec![0.0; dker.len()];
                for ni in 0..n {
                    for co in 0..c_out {
                        for oh in 0..ho {
                            for ow in 0..wo {
                                let gv = g[((ni * c_out + co) * ho + oh) * wo + ow];
                                if gv == 0.0 {
                                    continue;
                                }
                                for ci in 0..c_in {
                                    for r in 0..kh {
                                        let ih = (oh * stride + r) as isize - *padding as isize;
                                        if ih < 0 || ih >= h as isize {
                                            continue;
                                        }
                                        for cc in 0..kw {
                                            let iw =
                                                (ow * stride + cc) as isize - *padding as isize;
                                            if iw < 0 || iw >= w as isize {
                                                continue;
                                            }
                                            let ii = ((ni * c_in + ci) * h + ih as usize) * w
                                                + iw as usize;
                                            let ki = ((co * c_in + ci) * kh + r) * kw + cc;
                                            gi[ii] += dker[ki] * gv;
                                            gk[ki] += din[ii] * gv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                self.accumulate(*input, &gi);
                self.accumulate(*kernel, &gk);
            }
            Op::Add { a, b } => {
                self.accumulate(*a, g);
                self.accumulate(*b, g);
            }
            Op::Sub { a, b } => {
                self.accumulate(*a, g);
                let neg: Vec<f64> = g.iter().map(|&v| -v).collect();
                self.accumulate(*b, &neg);
            }
            Op::Mul { a, b } => {
                let (ta, tb) = (self.value(*a).data().to_vec(), self.value(*b).data().to_vec());
                let ga: Vec<f64> = if tb.len() == g.len() {
                    g.iter().zip(&tb).map(|(&gv, &bv)| gv * bv).collect()
                } else {
                    g.iter().map(|&gv| gv * tb[0]).collect()
                };
                let gb: Vec<f64> = if ta.len() == g.len() {
                    g.iter().zip(&ta).map(|(&gv, &av)| gv * av).collect()
                } else {
                    g.iter().map(|&gv| gv * ta[0]).collect()
                };
                self.accumulate(*a, &ga);
                self.accumulate(*b, &gb);
            }
            Op::Relu { x } => {
                let dx: Vec<f64> = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                    .collect();
                self.accumulate(*x, &dx);
            }
            Op::Square { x } => {
                let dx: Vec<f64> =
                    self.value(*x).data().iter().zip(g).map(|(&v, &gv)| 2.0 * v * gv).collect();
                self.accumulate(*x, &dx);
            }
            Op::Sigmoid { x } => {
                let y = self.nodes[out].value.data().to_vec();
                let dx: Vec<f64> = y.iter().zip(g).map(|(&yv, &gv)| yv * (1.0 - yv) * gv).collect();
                self.accumulate(*x, &dx);
            }
            Op::Exp { x } => {
                let y = self.nodes[out].value.data().to_vec();
                let dx: Vec<f64> = y.iter().zip(g).map(|(&yv, &gv)| yv * gv).collect();
                self.accumulate(*x, &dx);
            }
            Op::Scale { x, c } => {
                let dx: Vec<f64> = g.iter().map(|&gv| gv * c).collect();
                self.accumulate(*x, &dx);
            }
            Op::Reshape { x } => {
                self.accumulate(*x, g);
            }
            Op::Sum { x } => {
                let n = self.value(*x).len();
                self.accumulate(*x, &vec![g[0]; n]);
            }
            Op::AddRowBias { x, bias } => {
                self.accumulate(*x, g);
                let cols = self.value(*bias).len();
                let mut gb = vec![0.0; cols];
                for (i, &gv) in g.iter().enumerate() {
                    gb[i % cols] += gv;
                }
                self.accumulate(*bias, &gb);
            }
            Op::AddChannelBias { x, bias } => {
                self.accumulate(*x, g);
                let sx = self.value(*x).shape().to_vec();
                let (c, hw) = (sx[1], sx[2] * sx[3]);
                let mut gb = vec![0.0; c];
                for (i, &gv) in g.iter().enumerate() {
                    gb[(i / hw) % c] += gv;
                }
                self.accumulate(*bias, &gb);
            }
            Op::ChannelSqNorm { x } => {
                let t = self.value(*x);
                let per = t.len() / t.shape()[0];
                let dx: Vec<f64> = t
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| 2.0 * v * g[i / per])
                    .collect();
                self.accumulate(*x, &dx);
            }
            Op::ChannelScale { x, s } => {
                let tx = self.value(*x).data().to_vec();
                let ts = self.value(*s).data().to_vec();
                let per = tx.len() / ts.len();
                let gx: Vec<f64> =
                    g.iter().enumerate().map(|(i, &gv)| gv * ts[i / per]).collect();
                let mut gs = vec![0.0; ts.len()];
                for (i, &gv) in g.iter().enumerate() {
                    gs[i / per] += gv * tx[i];
                }
                self.accumulate(*x, &gx);
                self.accumulate(*s, &gs);
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let b = labels.len();
                let k = probs.len() / b;
                let scale = g[0] / b as f64;
                let mut gl = probs.clone();
                for (row, &label) in labels.iter().enumerate() {
                    gl[row * k + label] -= 1.0;
                }
                for v in &mut gl {
                    *v *= scale;
                }
                self.accumulate(*logits, &gl);
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

#[allow(clippy::too_many_arguments)]
fn conv2d_raw(
    input: &[f64],
    kernel: &[f64],
    n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; n * c_out * ho * wo];
    for ni in 0..n {
        for co in 0..c_out {
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut acc = 0.0;
                    for ci in 0..c_in {
                        for r in 0..kh {
                            let ih = (oh * stride + r) as isize - padding as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            for cc in 0..kw {
                                let iw = (ow * stride + cc) as isize - padding as isize;
                                if iw < 0 || iw >= w as isize {
                                    continue;
                                }
                                let ii = ((ni * c_in + ci) * h + ih as usize) * w + iw as usize;
                                let ki = ((co * c_in + ci) * kh + r) * kw + cc;
                                acc += input[ii] * kernel[ki];
                            }
                        }
                    }
                    out[((ni * c_out + co) * ho + oh) * wo + ow] = acc;
                }
            }
        }
    }
    out
}
