//! Reverse-mode automatic differentiation over a flat operation tape.
//!
//! A forward pass appends one [`Node`] per primitive; `backward` walks the
//! tape in exact reverse order, accumulating gradients into per-tensor slots.
//! The tape is append-only during forward and is cleared by `backward`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Identifier of a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

impl TensorId {
    /// Position of the tensor in tape order.
    pub fn index(self) -> usize {
        self.0
    }
}

/// Zero-padding rule for 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    /// Output spatial size is `ceil(in / stride)`; zero padding is symmetric
    /// with the extra pixel on the bottom/right when the total is odd.
    Same,
    /// No padding; the kernel must fit inside the input.
    Valid,
}

/// Fixed coefficients of the quadratic ReLU approximation `0.00047x^2 + 0.5x`.
pub const APPROX_RELU_A: f64 = 0.00047;
pub const APPROX_RELU_B: f64 = 0.5;

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub ph: usize,
    pub pw: usize,
    pub out_h: usize,
    pub out_w: usize,
}

/// Per-channel batch statistics observed by a train-mode batch-norm op.
#[derive(Debug, Clone)]
pub struct BnBatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance, as used for the normalization itself.
    pub var_biased: Vec<f64>,
    /// Number of elements reduced per channel (batch * h * w).
    pub count: usize,
}

#[derive(Debug)]
enum Node {
    Leaf,
    Dense {
        x: TensorId,
        w: TensorId,
        b: TensorId,
    },
    Conv2d {
        x: TensorId,
        k: TensorId,
        b: TensorId,
        geom: ConvGeom,
        /// Zero-padded input, cached for the backward pass.
        padded: Vec<f64>,
    },
    AvgPool {
        x: TensorId,
        window: (usize, usize),
        stride: usize,
    },
    MaxPool {
        x: TensorId,
        /// Flat input index of the maximum for every output cell.
        argmax: Vec<usize>,
    },
    BatchNormTrain {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        channels: usize,
        count: usize,
    },
    BatchNormEval {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        channels: usize,
    },
    Relu {
        x: TensorId,
    },
    Square {
        x: TensorId,
    },
    ApproxRelu {
        x: TensorId,
    },
    PolyAct {
        x: TensorId,
        a: TensorId,
        b: TensorId,
    },
    WeightedAct {
        x: TensorId,
        a: TensorId,
        b: TensorId,
        lambda: f64,
    },
    Dropout {
        x: TensorId,
        /// Per-element keep mask, pre-scaled by 1/(1-p).
        mask: Vec<f64>,
    },
    Flatten {
        x: TensorId,
    },
    OffsetPlane {
        x: TensorId,
    },
    Add {
        lhs: TensorId,
        rhs: TensorId,
    },
    Mul {
        lhs: TensorId,
        rhs: TensorId,
    },
    Scale {
        x: TensorId,
        factor: f64,
    },
    Sum {
        x: TensorId,
    },
    Mean {
        x: TensorId,
    },
    SoftmaxXent {
        logits: TensorId,
        /// Row-stochastic target distribution, flattened `[batch * classes]`.
        targets: Vec<f64>,
        tau: f64,
        probs: Vec<f64>,
    },
}

impl Node {
    fn inputs(&self) -> Vec<TensorId> {
        match self {
            Node::Leaf => vec![],
            Node::Dense { x, w, b } => vec![*x, *w, *b],
            Node::Conv2d { x, k, b, .. } => vec![*x, *k, *b],
            Node::AvgPool { x, .. }
            | Node::MaxPool { x, .. }
            | Node::Relu { x }
            | Node::Square { x }
            | Node::ApproxRelu { x }
            | Node::Dropout { x, .. }
            | Node::Flatten { x }
            | Node::OffsetPlane { x }
            | Node::Scale { x, .. }
            | Node::Sum { x }
            | Node::Mean { x } => vec![*x],
            Node::BatchNormTrain { x, gamma, beta, .. }
            | Node::BatchNormEval { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Node::PolyAct { x, a, b } => vec![*x, *a, *b],
            Node::WeightedAct { x, a, b, .. } => vec![*x, *a, *b],
            Node::Add { lhs, rhs } | Node::Mul { lhs, rhs } => vec![*lhs, *rhs],
            Node::SoftmaxXent { logits, .. } => vec![*logits],
        }
    }
}

struct Entry {
    value: Tensor,
    node: Node,
}

/// Gradients produced by [`Tape::backward`], indexed by [`TensorId`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: TensorId) -> Option<&[f64]> {
        self.grads.get(id.index()).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, id: TensorId) -> Option<Vec<f64>> {
        self.grads.get_mut(id.index()).and_then(|g| g.take())
    }
}

/// Append-only record of a forward pass.
#[derive(Default)]
pub struct Tape {
    entries: Vec<Entry>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Registers an input or parameter tensor.
    pub fn leaf(&mut self, value: Tensor) -> TensorId {
        self.push(value, Node::Leaf)
    }

    /// Value recorded for `id`. Panics if the tape was already consumed.
    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.entries[id.index()].value
    }

    /// Checks that every node's inputs precede it in tape order.
    pub fn validate_topology(&self) -> Result<()> {
        for (i, e) in self.entries.iter().enumerate() {
            for input in e.node.inputs() {
                if input.index() >= i {
                    return Err(Error::Invariant(format!(
                        "node {i} consumes tensor {} which does not precede it",
                        input.index()
                    )));
                }
            }
        }
        Ok(())
    }

    fn push(&mut self, value: Tensor, node: Node) -> TensorId {
        let id = TensorId(self.entries.len());
        self.entries.push(Entry { value, node });
        id
    }

    fn shape(&self, id: TensorId) -> &[usize] {
        self.entries[id.index()].value.shape()
    }

    fn data(&self, id: TensorId) -> &[f64] {
        self.entries[id.index()].value.data()
    }

    // ── Linear layers ───────────────────────────────────────────────

    /// Fully connected layer: `y[i,j] = sum_k W[j,k] * x[i,k] + b[j]`.
    pub fn dense(&mut self, x: TensorId, w: TensorId, b: TensorId) -> Result<TensorId> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        let bs = self.shape(b);
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 {
            return Err(Error::Dim(format!(
                "dense expects x[batch,in], W[out,in], b[out]; got {xs:?}, {ws:?}, {bs:?}"
            )));
        }
        let (batch, n_in) = (xs[0], xs[1]);
        let (n_out, w_in) = (ws[0], ws[1]);
        if w_in != n_in || bs[0] != n_out {
            return Err(Error::Dim(format!(
                "dense shape mismatch: x[{batch},{n_in}] vs W[{n_out},{w_in}], b[{}]",
                bs[0]
            )));
        }
        let xd = self.data(x);
        let wd = self.data(w);
        let bd = self.data(b);
        let mut out = vec![0.0; batch * n_out];
        for i in 0..batch {
            let xrow = &xd[i * n_in..(i + 1) * n_in];
            let orow = &mut out[i * n_out..(i + 1) * n_out];
            for (j, o) in orow.iter_mut().enumerate() {
                let wrow = &wd[j * n_in..(j + 1) * n_in];
                let mut acc = bd[j];
                for k in 0..n_in {
                    acc += wrow[k] * xrow[k];
                }
                *o = acc;
            }
        }
        let value = Tensor::new(vec![batch, n_out], out)?;
        Ok(self.push(value, Node::Dense { x, w, b }))
    }

    /// 2-D cross-correlation with per-output-channel bias.
    pub fn conv2d(
        &mut self,
        x: TensorId,
        k: TensorId,
        b: TensorId,
        stride: usize,
        padding: Padding,
    ) -> Result<TensorId> {
        let geom = conv_geometry(self.shape(x), self.shape(k), self.shape(b), stride, padding)?;
        let padded = pad_input(self.data(x), &geom);
        let out = conv_forward(&padded, self.data(k), self.data(b), &geom);
        let value = Tensor::new(vec![geom.batch, geom.c_out, geom.out_h, geom.out_w], out)?;
        Ok(self.push(
            value,
            Node::Conv2d {
                x,
                k,
                b,
                geom,
                padded,
            },
        ))
    }

    // ── Pooling ─────────────────────────────────────────────────────

    pub fn avg_pool(
        &mut self,
        x: TensorId,
        window: (usize, usize),
        stride: usize,
    ) -> Result<TensorId> {
        let (n, c, h, w, out_h, out_w) = pool_geometry(self.shape(x), window, stride)?;
        let xd = self.data(x);
        let (kh, kw) = window;
        let inv = 1.0 / (kh * kw) as f64;
        let mut out = vec![0.0; n * c * out_h * out_w];
        let mut oi = 0;
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * h * w;
                for oy in 0..out_h {
                    for ox in 0..out_w {
                        let mut acc = 0.0;
                        for p in 0..kh {
                            let row = base + (oy * stride + p) * w + ox * stride;
                            for q in 0..kw {
                                acc += xd[row + q];
                            }
                        }
                        out[oi] = acc * inv;
                        oi += 1;
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, c, out_h, out_w], out)?;
        Ok(self.push(value, Node::AvgPool { x, window, stride }))
    }

    pub fn max_pool(
        &mut self,
        x: TensorId,
        window: (usize, usize),
        stride: usize,
    ) -> Result<TensorId> {
        let (n, c, h, w, out_h, out_w) = pool_geometry(self.shape(x), window, stride)?;
        let xd = self.data(x);
        let (kh, kw) = window;
        let mut out = vec![0.0; n * c * out_h * out_w];
        let mut argmax = vec![0usize; out.len()];
        let mut oi = 0;
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * h * w;
                for oy in 0..out_h {
                    for ox in 0..out_w {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = 0;
                        for p in 0..kh {
                            let row = base + (oy * stride + p) * w + ox * stride;
                            for q in 0..kw {
                                let v = xd[row + q];
                                if v > best {
                                    best = v;
                                    best_idx = row + q;
                                }
                            }
                        }
                        out[oi] = best;
                        argmax[oi] = best_idx;
                        oi += 1;
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, c, out_h, out_w], out)?;
        Ok(self.push(value, Node::MaxPool { x, argmax }))
    }

    // ── Batch normalization ─────────────────────────────────────────

    /// Train-mode batch norm over `[batch, c, h, w]`, normalizing with batch
    /// statistics. Returns the observed statistics so the caller can update
    /// running averages.
    pub fn batch_norm_train(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    ) -> Result<(TensorId, BnBatchStats)> {
        let (n, c, h, w) = bn_geometry(self.shape(x), self.shape(gamma), self.shape(beta))?;
        if eps < 0.0 {
            return Err(Error::Contract(format!(
                "batch-norm eps must be >= 0, got {eps}"
            )));
        }
        let xd = self.data(x);
        let count = n * h * w;
        let hw = h * w;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * hw;
                let mut s = 0.0;
                for v in &xd[base..base + hw] {
                    s += *v;
                }
                mean[ch] += s;
            }
        }
        for m in mean.iter_mut() {
            *m /= count as f64;
        }
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * hw;
                let mu = mean[ch];
                let mut s = 0.0;
                for v in &xd[base..base + hw] {
                    let d = *v - mu;
                    s += d * d;
                }
                var[ch] += s;
            }
        }
        for v in var.iter_mut() {
            *v /= count as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();

        let gd = self.data(gamma).to_vec();
        let bd = self.data(beta).to_vec();
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * hw;
                let (mu, inv, g, be) = (mean[ch], inv_std[ch], gd[ch], bd[ch]);
                for i in base..base + hw {
                    let xh = (xd[i] - mu) * inv;
                    xhat[i] = xh;
                    out[i] = g * xh + be;
                }
            }
        }
        let stats = BnBatchStats {
            mean,
            var_biased: var,
            count,
        };
        let value = Tensor::new(vec![n, c, h, w], out)?;
        let id = self.push(
            value,
            Node::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                channels: c,
                count,
            },
        );
        Ok((id, stats))
    }

    /// Eval-mode batch norm: `y = gamma * (x - mean) / sqrt(var + eps) + beta`
    /// with fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        running_mean: &Tensor,
        running_var: &Tensor,
        eps: f64,
    ) -> Result<TensorId> {
        let (n, c, h, w) = bn_geometry(self.shape(x), self.shape(gamma), self.shape(beta))?;
        if eps < 0.0 {
            return Err(Error::Contract(format!(
                "batch-norm eps must be >= 0, got {eps}"
            )));
        }
        if running_mean.shape() != [c] || running_var.shape() != [c] {
            return Err(Error::Dim(format!(
                "running stats must have shape [{c}], got {:?} and {:?}",
                running_mean.shape(),
                running_var.shape()
            )));
        }
        if let Some(v) = running_var.data().iter().find(|v| **v < 0.0) {
            return Err(Error::Invariant(format!(
                "running variance must be non-negative, found {v}"
            )));
        }
        let inv_std: Vec<f64> = running_var
            .data()
            .iter()
            .map(|v| 1.0 / (v + eps).sqrt())
            .collect();
        let mu = running_mean.data().to_vec();
        let xd = self.data(x);
        let gd = self.data(gamma).to_vec();
        let bd = self.data(beta).to_vec();
        let hw = h * w;
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * hw;
                for i in base..base + hw {
                    let xh = (xd[i] - mu[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = gd[ch] * xh + bd[ch];
                }
            }
        }
        let value = Tensor::new(vec![n, c, h, w], out)?;
        Ok(self.push(
            value,
            Node::BatchNormEval {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                channels: c,
            },
        ))
    }

    // ── Activations ─────────────────────────────────────────────────

    /// Elementwise `max(0, x)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, x: TensorId) -> TensorId {
        let out: Vec<f64> = self
            .data(x)
            .iter()
            .map(|&v| if v > 0.0 { v } else { 0.0 })
            .collect();
        let shape = self.shape(x).to_vec();
        self.push(
            Tensor::new(shape, out).expect("same shape"),
            Node::Relu { x },
        )
    }

    /// Elementwise `x^2`.
    pub fn square(&mut self, x: TensorId) -> TensorId {
        let out: Vec<f64> = self.data(x).iter().map(|&v| v * v).collect();
        let shape = self.shape(x).to_vec();
        self.push(
            Tensor::new(shape, out).expect("same shape"),
            Node::Square { x },
        )
    }

    /// Elementwise `0.00047x^2 + 0.5x` with fixed coefficients.
    pub fn approx_relu(&mut self, x: TensorId) -> TensorId {
        let out: Vec<f64> = self
            .data(x)
            .iter()
            .map(|&v| APPROX_RELU_A * v * v + APPROX_RELU_B * v)
            .collect();
        let shape = self.shape(x).to_vec();
        self.push(
            Tensor::new(shape, out).expect("same shape"),
            Node::ApproxRelu { x },
        )
    }

    /// Elementwise `a*x^2 + b*x` with trainable scalar coefficients.
    ///
    /// Backward routes `sum(g * x^2)` to `a` and `sum(g * x)` to `b`.
    pub fn poly_act(&mut self, x: TensorId, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_scalar_coeff(a, "a")?;
        self.check_scalar_coeff(b, "b")?;
        let av = self.data(a)[0];
        let bv = self.data(b)[0];
        let out: Vec<f64> = self.data(x).iter().map(|&v| av * v * v + bv * v).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Node::PolyAct { x, a, b }))
    }

    /// `(1 - lambda) * relu(x) + lambda * (a*x^2 + b*x)`.
    pub fn weighted_act(
        &mut self,
        x: TensorId,
        a: TensorId,
        b: TensorId,
        lambda: f64,
    ) -> Result<TensorId> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::Contract(format!(
                "blend weight lambda must lie in [0, 1], got {lambda}"
            )));
        }
        self.check_scalar_coeff(a, "a")?;
        self.check_scalar_coeff(b, "b")?;
        let av = self.data(a)[0];
        let bv = self.data(b)[0];
        let out: Vec<f64> = self
            .data(x)
            .iter()
            .map(|&v| {
                let relu = if v > 0.0 { v } else { 0.0 };
                (1.0 - lambda) * relu + lambda * (av * v * v + bv * v)
            })
            .collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            Tensor::new(shape, out)?,
            Node::WeightedAct { x, a, b, lambda },
        ))
    }

    fn check_scalar_coeff(&self, id: TensorId, name: &str) -> Result<()> {
        if self.shape(id) != [1] {
            return Err(Error::Dim(format!(
                "activation coefficient {name} must be a scalar tensor of shape [1], got {:?}",
                self.shape(id)
            )));
        }
        Ok(())
    }

    // ── Regularization / shape ──────────────────────────────────────

    /// Inverted dropout: keeps each element with probability `1-p`, scaling
    /// kept elements by `1/(1-p)`.
    pub fn dropout<R: Rng>(&mut self, x: TensorId, p: f64, rng: &mut R) -> Result<TensorId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!(
                "dropout p must lie in [0, 1), got {p}"
            )));
        }
        let keep = 1.0 - p;
        let mask: Vec<f64> = (0..self.data(x).len())
            .map(|_| {
                if rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        self.dropout_with_mask(x, mask)
    }

    /// Dropout with a caller-supplied mask (entries are 0 or 1/(1-p)).
    pub fn dropout_with_mask(&mut self, x: TensorId, mask: Vec<f64>) -> Result<TensorId> {
        if mask.len() != self.data(x).len() {
            return Err(Error::Dim("dropout mask length mismatch".into()));
        }
        let out: Vec<f64> = self.data(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Node::Dropout { x, mask }))
    }

    /// Adds a constant plane to every batch element: `y[n, ..] = x[n, ..] + plane`.
    ///
    /// The plane is a constant: no gradient is produced for it. Used for the
    /// per-position bias terms created by batch-norm folding.
    pub fn offset_plane(&mut self, x: TensorId, plane: &Tensor) -> Result<TensorId> {
        let s = self.shape(x);
        if s.len() < 2 || &s[1..] != plane.shape() {
            return Err(Error::Dim(format!(
                "offset plane of shape {:?} cannot apply to {s:?}",
                plane.shape()
            )));
        }
        let per = plane.numel();
        let out: Vec<f64> = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v + plane.data()[i % per])
            .collect();
        let shape = s.to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Node::OffsetPlane { x }))
    }

    /// Collapses all trailing dims: `[batch, rest..] -> [batch, prod(rest)]`.
    pub fn flatten(&mut self, x: TensorId) -> Result<TensorId> {
        let s = self.shape(x);
        if s.len() < 2 {
            return Err(Error::Dim(format!(
                "flatten expects a batch dim, got {s:?}"
            )));
        }
        let batch = s[0];
        let rest: usize = s[1..].iter().product();
        let value = Tensor::new(vec![batch, rest], self.data(x).to_vec())?;
        Ok(self.push(value, Node::Flatten { x }))
    }

    // ── Elementwise arithmetic and reductions ───────────────────────

    pub fn add(&mut self, lhs: TensorId, rhs: TensorId) -> Result<TensorId> {
        if self.shape(lhs) != self.shape(rhs) {
            return Err(Error::Dim(format!(
                "add shape mismatch: {:?} vs {:?}",
                self.shape(lhs),
                self.shape(rhs)
            )));
        }
        let out: Vec<f64> = self
            .data(lhs)
            .iter()
            .zip(self.data(rhs))
            .map(|(a, b)| a + b)
            .collect();
        let shape = self.shape(lhs).to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Node::Add { lhs, rhs }))
    }

    pub fn mul(&mut self, lhs: TensorId, rhs: TensorId) -> Result<TensorId> {
        if self.shape(lhs) != self.shape(rhs) {
            return Err(Error::Dim(format!(
                "mul shape mismatch: {:?} vs {:?}",
                self.shape(lhs),
                self.shape(rhs)
            )));
        }
        let out: Vec<f64> = self
            .data(lhs)
            .iter()
            .zip(self.data(rhs))
            .map(|(a, b)| a * b)
            .collect();
        let shape = self.shape(lhs).to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Node::Mul { lhs, rhs }))
    }

    pub fn scale(&mut self, x: TensorId, factor: f64) -> TensorId {
        let out: Vec<f64> = self.data(x).iter().map(|v| v * factor).collect();
        let shape = self.shape(x).to_vec();
        self.push(
            Tensor::new(shape, out).expect("same shape"),
            Node::Scale { x, factor },
        )
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, x: TensorId) -> TensorId {
        let s: f64 = self.data(x).iter().sum();
        self.push(Tensor::scalar(s), Node::Sum { x })
    }

    /// Mean of all elements, as a `[1]` tensor.
    pub fn mean(&mut self, x: TensorId) -> TensorId {
        let d = self.data(x);
        let m = d.iter().sum::<f64>() / d.len() as f64;
        self.push(Tensor::scalar(m), Node::Mean { x })
    }

    // ── Loss ────────────────────────────────────────────────────────

    /// Batch-mean cross-entropy `-sum_i t[i] * log softmax(z/tau)[i]` against
    /// a fixed target distribution (one row per sample, rows sum to 1).
    ///
    /// Computed with row-max subtraction. The targets are constants: no
    /// gradient flows to them.
    pub fn softmax_xent(
        &mut self,
        logits: TensorId,
        targets: Vec<f64>,
        tau: f64,
    ) -> Result<TensorId> {
        if tau <= 0.0 {
            return Err(Error::Contract(format!(
                "temperature must be > 0, got {tau}"
            )));
        }
        let s = self.shape(logits);
        if s.len() != 2 {
            return Err(Error::Dim(format!(
                "loss expects logits [batch, classes], got {s:?}"
            )));
        }
        let (batch, classes) = (s[0], s[1]);
        if targets.len() != batch * classes {
            return Err(Error::Dim(format!(
                "targets length {} != batch*classes {}",
                targets.len(),
                batch * classes
            )));
        }
        let zd = self.data(logits);
        let mut probs = vec![0.0; zd.len()];
        let mut loss = 0.0;
        for i in 0..batch {
            let row = &zd[i * classes..(i + 1) * classes];
            let trow = &targets[i * classes..(i + 1) * classes];
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v / tau));
            let mut denom = 0.0;
            for &v in row {
                denom += (v / tau - max).exp();
            }
            let log_denom = denom.ln();
            for (j, &v) in row.iter().enumerate() {
                let logit = v / tau - max;
                probs[i * classes + j] = (logit - log_denom).exp();
                loss -= trow[j] * (logit - log_denom);
            }
        }
        loss /= batch as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Node::SoftmaxXent {
                logits,
                targets,
                tau,
                probs,
            },
        ))
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar loss. Consumes the tape: after this
    /// call the tape is empty and ready for reuse.
    ///
    /// Any non-finite gradient aborts with the offending tape node id.
    pub fn backward(&mut self, loss: TensorId) -> Result<Gradients> {
        let entries = std::mem::take(&mut self.entries);
        if loss.index() >= entries.len() {
            return Err(Error::Contract("loss tensor is not on this tape".into()));
        }
        if entries[loss.index()].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "loss must be scalar, got shape {:?}",
                entries[loss.index()].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = entries.iter().map(|_| None).collect();
        grads[loss.index()] = Some(vec![1.0]);

        for i in (0..entries.len()).rev() {
            let Some(g) = grads[i].take() else { continue };
            let entry = &entries[i];
            backprop_node(i, entry, &g, &entries, &mut grads)?;
            // Leaves keep their gradient for the caller.
            if matches!(entry.node, Node::Leaf) {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize, contribution: &[f64]) {
    let g = slot.get_or_insert_with(|| vec![0.0; len]);
    for (dst, src) in g.iter_mut().zip(contribution) {
        *dst += *src;
    }
}

fn check_finite(node: usize, what: &str, values: &[f64]) -> Result<()> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric {
            node,
            message: format!("non-finite gradient for {what}"),
        });
    }
    Ok(())
}

#[allow(clippy::too_many_lines)]
fn backprop_node(
    idx: usize,
    entry: &Entry,
    g: &[f64],
    entries: &[Entry],
    grads: &mut [Option<Vec<f64>>],
) -> Result<()> {
    let val = |id: TensorId| -> &Tensor { &entries[id.index()].value };
    match &entry.node {
        Node::Leaf => {}

        Node::Dense { x, w, b } => {
            let xs = val(*x).shape();
            let (batch, n_in) = (xs[0], xs[1]);
            let n_out = val(*w).shape()[0];
            let xd = val(*x).data();
            let wd = val(*w).data();
            let mut dx = vec![0.0; batch * n_in];
            let mut dw = vec![0.0; n_out * n_in];
            let mut db = vec![0.0; n_out];
            for i in 0..batch {
                let grow = &g[i * n_out..(i + 1) * n_out];
                let xrow = &xd[i * n_in..(i + 1) * n_in];
                let dxrow = &mut dx[i * n_in..(i + 1) * n_in];
                for j in 0..n_out {
                    let gij = grow[j];
                    db[j] += gij;
                    let wrow = &wd[j * n_in..(j + 1) * n_in];
                    let dwrow = &mut dw[j * n_in..(j + 1) * n_in];
                    for k in 0..n_in {
                        dxrow[k] += gij * wrow[k];
                        dwrow[k] += gij * xrow[k];
                    }
                }
            }
            check_finite(idx, "dense input", &dx)?;
            check_finite(idx, "dense weight", &dw)?;
            check_finite(idx, "dense bias", &db)?;
            accumulate(&mut grads[x.index()], dx.len(), &dx);
            accumulate(&mut grads[w.index()], dw.len(), &dw);
            accumulate(&mut grads[b.index()], db.len(), &db);
        }

        Node::Conv2d {
            x,
            k,
            b,
            geom,
            padded,
        } => {
            let kd = val(*k).data();
            let (mut dpadded, mut dk, mut db) = conv_backward(g, padded, kd, geom);
            check_finite(idx, "conv input", &dpadded)?;
            check_finite(idx, "conv kernel", &dk)?;
            check_finite(idx, "conv bias", &db)?;
            let dx = unpad_input(&dpadded, geom);
            accumulate(&mut grads[x.index()], dx.len(), &dx);
            accumulate(&mut grads[k.index()], dk.len(), &dk);
            accumulate(&mut grads[b.index()], db.len(), &db);
            dpadded.clear();
            dk.clear();
            db.clear();
        }

        Node::AvgPool { x, window, stride } => {
            let xs = val(*x).shape();
            let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
            let os = entry.value.shape();
            let (out_h, out_w) = (os[2], os[3]);
            let (kh, kw) = *window;
            let inv = 1.0 / (kh * kw) as f64;
            let mut dx = vec![0.0; n * c * h * w];
            let mut oi = 0;
            for b in 0..n {
                for ch in 0..c {
                    let base = (b * c + ch) * h * w;
                    for oy in 0..out_h {
                        for ox in 0..out_w {
                            let go = g[oi] * inv;
                            for p in 0..kh {
                                let row = base + (oy * stride + p) * w + ox * stride;
                                for q in 0..kw {
                                    dx[row + q] += go;
                                }
                            }
                            oi += 1;
                        }
                    }
                }
            }
            check_finite(idx, "avg-pool input", &dx)?;
            accumulate(&mut grads[x.index()], dx.len(), &dx);
        }

        Node::MaxPool { x, argmax, .. } => {
            let mut dx = vec![0.0; val(*x).numel()];
            for (gi, &src) in g.iter().zip(argmax) {
                dx[src] += *gi;
            }
            check_finite(idx, "max-pool input", &dx)?;
            accumulate(&mut grads[x.index()], dx.len(), &dx);
        }

        Node::BatchNormTrain {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            channels,
            count,
        } => {
            let xs = val(*x).shape();
            let (n, c, hw) = (xs[0], *channels, xs[2] * xs[3]);
            let gd = val(*gamma).data();
            let nf = *count as f64;
            let mut sum_g = vec![0.0; c];
            let mut sum_gx = vec![0.0; c];
            for b in 0..n {
                for ch in 0..c {
                    let base = (b * c + ch) * hw;
                    for i in base..base + hw {
                        sum_g[ch] += g[i];
                        sum_gx[ch] += g[i] * xhat[i];
                    }
                }
            }
            let mut dx = vec![0.0; g.len()];
            for b in 0..n {
                for ch in 0..c {
                    let base = (b * c + ch) * hw;
                    let coef = gd[ch] * inv_std[ch];
                    let mg = sum_g[ch] / nf;
                    let mgx = sum_gx[ch] / nf;
                    for i in base..base + hw {
                        dx[i] = coef * (g[i] - mg - xhat[i] * mgx);
                    }
                }
            }
            check_finite(idx, "batch-norm input", &dx)?;
            check_finite(idx, "batch-norm gamma", &sum_gx)?;
            check_finite(idx, "batch-norm beta", &sum_g)?;
            accumulate(&mut grads[x.index()], dx.len(), &dx);
            accumulate(&mut grads[gamma.index()], c, &sum_gx);
            accumulate(&mut grads[beta.index()], c, &sum_g);
        }

        Node::BatchNormEval {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            channels,
        } => {
            let xs = val(*x).shape();
            let (n, c, hw) = (xs[0], *channels, xs[2] * xs[3]);
            let gd = val(*gamma).data();
            let mut dx = vec![0.0; g.len()];
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            for b in 0..n {
                for ch in 0..c {
                    let base = (b * c + ch) * hw;
                    let coef = gd[ch] * inv_std[ch];
                    for i in base..base + hw {
                        dx[i] = g[i] * coef;
                        dgamma[ch] += g[i] * xhat[i];
                        dbeta[ch] += g[i];
                    }
                }
            }
            check_finite(idx, "batch-norm input", &dx)?;
            accumulate(&mut grads[x.index()], dx.len(), &dx);
            accumulate(&mut grads[gamma.index()], c, &dgamma);
            accumulate(&mut grads[beta.index()], c, &dbeta);
        }

        Node::Relu { x } => {
            let xd = val(*x).data();
            let dx: Vec<f64> = g
                .iter()
                .zip(xd)
                .map(|(gi, &v)| if v > 0.0 { *gi } else { 0.0 })
                .collect();
            check_finite(idx, "relu input", &dx)?;
            accumulate(&mut grads[x.index()], dx.len(), &dx);
        }

        Node::Square { x } => {
            let xd = val(*x).data();
            let dx: Vec<f64> = g.iter().zip(xd).map(|(gi, &v)| 2.0 * v * gi).collect();
            check_finite(idx, "square input", &dx)?;
            accumulate(&mut grads[x.index()], dx.len(), &dx);
        }

        Node::ApproxRelu { x } => {
            let xd = val(*x).data();
            let dx: Vec<f64> = g
                .iter()
                .zip(xd)
                .map(|(gi, &v)| (2.0 * APPROX_RELU_A * v + APPROX_RELU_B) * gi)
                .collect();
            check_finite(idx, "approx-relu input", &dx)?;
            accumulate(&mut grads[x.index()], dx.len(), &dx);
        }

        Node::PolyAct { x, a, b } => {
            let xd = val(*x).data();
            let av = val(*a).data()[0];
            let bv = val(*b).data()[0];
            let mut da = 0.0;
            let mut db = 0.0;
            let mut dx = vec![0.0; xd.len()];
            for i in 0..xd.len() {
                let (gi, v) = (g[i], xd[i]);
                dx[i] = gi * (2.0 * av * v + bv);
                da += gi * v * v;
                db += gi * v;
            }
            check_finite(idx, "poly input", &dx)?;
            check_finite(idx, "poly coefficients", &[da, db])?;
            accumulate(&mut grads[x.index()], dx.len(), &dx);
            accumulate(&mut grads[a.index()], 1, &[da]);
            accumulate(&mut grads[b.index()], 1, &[db]);
        }

        Node::WeightedAct { x, a, b, lambda } => {
            let xd = val(*x).data();
            let av = val(*a).data()[0];
            let bv = val(*b).data()[0];
            let l = *lambda;
            let mut da = 0.0;
            let mut db = 0.0;
            let mut dx = vec![0.0; xd.len()];
            for i in 0..xd.len() {
                let (gi, v) = (g[i], xd[i]);
                let relu_grad = if v > 0.0 { 1.0 } else { 0.0 };
                dx[i] = gi * ((1.0 - l) * relu_grad + l * (2.0 * av * v + bv));
                da += l * gi * v * v;
                db += l * gi * v;
            }
            check_finite(idx, "weighted-act input", &dx)?;
            check_finite(idx, "weighted-act coefficients", &[da, db])?;
            accumulate(&mut grads[x.index()], dx.len(), &dx);
            accumulate(&mut grads[a.index()], 1, &[da]);
            accumulate(&mut grads[b.index()], 1, &[db]);
        }

        Node::Dropout { x, mask } => {
            let dx: Vec<f64> = g.iter().zip(mask).map(|(gi, m)| gi * m).collect();
            check_finite(idx, "dropout input", &dx)?;
            accumulate(&mut grads[x.index()], dx.len(), &dx);
        }

        Node::Flatten { x } | Node::OffsetPlane { x } => {
            check_finite(idx, "pass-through input", g)?;
            accumulate(&mut grads[x.index()], g.len(), g);
        }

        Node::Add { lhs, rhs } => {
            check_finite(idx, "add input", g)?;
            accumulate(&mut grads[lhs.index()], g.len(), g);
            accumulate(&mut grads[rhs.index()], g.len(), g);
        }

        Node::Mul { lhs, rhs } => {
            let ld = val(*lhs).data();
            let rd = val(*rhs).data();
            let dl: Vec<f64> = g.iter().zip(rd).map(|(gi, r)| gi * r).collect();
            let dr: Vec<f64> = g.iter().zip(ld).map(|(gi, l)| gi * l).collect();
            check_finite(idx, "mul lhs", &dl)?;
            check_finite(idx, "mul rhs", &dr)?;
            accumulate(&mut grads[lhs.index()], dl.len(), &dl);
            accumulate(&mut grads[rhs.index()], dr.len(), &dr);
        }

        Node::Scale { x, factor } => {
            let dx: Vec<f64> = g.iter().map(|gi| gi * factor).collect();
            check_finite(idx, "scale input", &dx)?;
            accumulate(&mut grads[x.index()], dx.len(), &dx);
        }

        Node::Sum { x } => {
            let n = val(*x).numel();
            let dx = vec![g[0]; n];
            check_finite(idx, "sum input", &dx)?;
            accumulate(&mut grads[x.index()], n, &dx);
        }

        Node::Mean { x } => {
            let n = val(*x).numel();
            let dx = vec![g[0] / n as f64; n];
            check_finite(idx, "mean input", &dx)?;
            accumulate(&mut grads[x.index()], n, &dx);
        }

        Node::SoftmaxXent {
            logits,
            targets,
            tau,
            probs,
        } => {
            let s = val(*logits).shape();
            let (batch, classes) = (s[0], s[1]);
            let scale = g[0] / (*tau * batch as f64);
            let mut dz = vec![0.0; probs.len()];
            for i in 0..batch {
                for j in 0..classes {
                    let k = i * classes + j;
                    dz[k] = scale * (probs[k] - targets[k]);
                }
            }
            check_finite(idx, "loss logits", &dz)?;
            accumulate(&mut grads[logits.index()], dz.len(), &dz);
        }
    }
    Ok(())
}

// ── Convolution helpers ─────────────────────────────────────────────

fn conv_geometry(
    xs: &[usize],
    ks: &[usize],
    bs: &[usize],
    stride: usize,
    padding: Padding,
) -> Result<ConvGeom> {
    if xs.len() != 4 || ks.len() != 4 || bs.len() != 1 {
        return Err(Error::Dim(format!(
            "conv2d expects x[b,c,h,w], K[co,ci,kh,kw], b[co]; got {xs:?}, {ks:?}, {bs:?}"
        )));
    }
    if stride == 0 {
        return Err(Error::Contract("conv2d stride must be >= 1".into()));
    }
    let (batch, c_in, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (c_out, kc, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
    if kc != c_in {
        return Err(Error::Dim(format!(
            "kernel expects {kc} input channels but input has {c_in}"
        )));
    }
    if bs[0] != c_out {
        return Err(Error::Dim(format!(
            "bias has {} entries, kernel {c_out}",
            bs[0]
        )));
    }
    let (out_h, out_w, pad_top, pad_left, ph, pw) = match padding {
        Padding::Valid => {
            if kh > h || kw > w {
                return Err(Error::Dim(format!(
                    "kernel {kh}x{kw} larger than input {h}x{w} with valid padding"
                )));
            }
            ((h - kh) / stride + 1, (w - kw) / stride + 1, 0, 0, h, w)
        }
        Padding::Same => {
            let out_h = h.div_ceil(stride);
            let out_w = w.div_ceil(stride);
            let pad_h = ((out_h - 1) * stride + kh).saturating_sub(h);
            let pad_w = ((out_w - 1) * stride + kw).saturating_sub(w);
            (out_h, out_w, pad_h / 2, pad_w / 2, h + pad_h, w + pad_w)
        }
    };
    Ok(ConvGeom {
        batch,
        c_in,
        h,
        w,
        c_out,
        kh,
        kw,
        stride,
        pad_top,
        pad_left,
        ph,
        pw,
        out_h,
        out_w,
    })
}

fn pad_input(xd: &[f64], geom: &ConvGeom) -> Vec<f64> {
    let ConvGeom {
        batch,
        c_in,
        h,
        w,
        ph,
        pw,
        pad_top,
        pad_left,
        ..
    } = *geom;
    if ph == h && pw == w {
        return xd.to_vec();
    }
    let mut padded = vec![0.0; batch * c_in * ph * pw];
    for b in 0..batch {
        for c in 0..c_in {
            let src = (b * c_in + c) * h * w;
            let dst = (b * c_in + c) * ph * pw;
            for y in 0..h {
                let srow = src + y * w;
                let drow = dst + (y + pad_top) * pw + pad_left;
                padded[drow..drow + w].copy_from_slice(&xd[srow..srow + w]);
            }
        }
    }
    padded
}

fn unpad_input(dpadded: &[f64], geom: &ConvGeom) -> Vec<f64> {
    let ConvGeom {
        batch,
        c_in,
        h,
        w,
        ph,
        pw,
        pad_top,
        pad_left,
        ..
    } = *geom;
    if ph == h && pw == w {
        return dpadded.to_vec();
    }
    let mut dx = vec![0.0; batch * c_in * h * w];
    for b in 0..batch {
        for c in 0..c_in {
            let dst = (b * c_in + c) * h * w;
            let src = (b * c_in + c) * ph * pw;
            for y in 0..h {
                let drow = dst + y * w;
                let srow = src + (y + pad_top) * pw + pad_left;
                dx[drow..drow + w].copy_from_slice(&dpadded[srow..srow + w]);
            }
        }
    }
    dx
}

fn conv_forward(padded: &[f64], kd: &[f64], bd: &[f64], geom: &ConvGeom) -> Vec<f64> {
    let ConvGeom {
        batch,
        c_in,
        c_out,
        kh,
        kw,
        stride,
        ph,
        pw,
        out_h,
        out_w,
        ..
    } = *geom;
    let mut out = vec![0.0; batch * c_out * out_h * out_w];
    for b in 0..batch {
        for o in 0..c_out {
            let obase = (b * c_out + o) * out_h * out_w;
            out[obase..obase + out_h * out_w].fill(bd[o]);
            for i in 0..c_in {
                let pbase = (b * c_in + i) * ph * pw;
                let kbase = (o * c_in + i) * kh * kw;
                for oy in 0..out_h {
                    let orow = obase + oy * out_w;
                    for p in 0..kh {
                        let prow = pbase + (oy * stride + p) * pw;
                        let krow = kbase + p * kw;
                        for ox in 0..out_w {
                            let px = prow + ox * stride;
                            let mut acc = 0.0;
                            for q in 0..kw {
                                acc += kd[krow + q] * padded[px + q];
                            }
                            out[orow + ox] += acc;
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv_backward(
    g: &[f64],
    padded: &[f64],
    kd: &[f64],
    geom: &ConvGeom,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let ConvGeom {
        batch,
        c_in,
        c_out,
        kh,
        kw,
        stride,
        ph,
        pw,
        out_h,
        out_w,
        ..
    } = *geom;
    let mut dpadded = vec![0.0; padded.len()];
    let mut dk = vec![0.0; kd.len()];
    let mut db = vec![0.0; c_out];
    for b in 0..batch {
        for o in 0..c_out {
            let obase = (b * c_out + o) * out_h * out_w;
            for oy in 0..out_h {
                for ox in 0..out_w {
                    let go = g[obase + oy * out_w + ox];
                    db[o] += go;
                    for i in 0..c_in {
                        let pbase = (b * c_in + i) * ph * pw;
                        let kbase = (o * c_in + i) * kh * kw;
                        for p in 0..kh {
                            let prow = pbase + (oy * stride + p) * pw + ox * stride;
                            let krow = kbase + p * kw;
                            for q in 0..kw {
                                dk[krow + q] += go * padded[prow + q];
                                dpadded[prow + q] += go * kd[krow + q];
                            }
                        }
                    }
                }
            }
        }
    }
    (dpadded, dk, db)
}

/// Output spatial size of a conv2d, shared with graph shape inference.
pub(crate) fn conv_output_hw(
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: Padding,
) -> Result<(usize, usize)> {
    let g = conv_geometry(&[1, 1, h, w], &[1, 1, kh, kw], &[1], stride, padding)?;
    Ok((g.out_h, g.out_w))
}

/// Output spatial size of a pooling window, shared with graph shape inference.
pub(crate) fn pool_output_hw(
    h: usize,
    w: usize,
    window: (usize, usize),
    stride: usize,
) -> Result<(usize, usize)> {
    let (_, _, _, _, oh, ow) = pool_geometry(&[1, 1, h, w], window, stride)?;
    Ok((oh, ow))
}

fn pool_geometry(
    xs: &[usize],
    window: (usize, usize),
    stride: usize,
) -> Result<(usize, usize, usize, usize, usize, usize)> {
    if xs.len() != 4 {
        return Err(Error::Dim(format!(
            "pooling expects x[b,c,h,w], got {xs:?}"
        )));
    }
    if stride == 0 {
        return Err(Error::Contract("pool stride must be >= 1".into()));
    }
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (kh, kw) = window;
    if kh == 0 || kw == 0 || kh > h || kw > w {
        return Err(Error::Dim(format!(
            "pooling window {kh}x{kw} does not fit input {h}x{w}"
        )));
    }
    Ok((n, c, h, w, (h - kh) / stride + 1, (w - kw) / stride + 1))
}

fn bn_geometry(xs: &[usize], gs: &[usize], bs: &[usize]) -> Result<(usize, usize, usize, usize)> {
    if xs.len() != 4 {
        return Err(Error::Dim(format!(
            "batch norm expects x[b,c,h,w], got {xs:?}"
        )));
    }
    let c = xs[1];
    if gs != [c] || bs != [c] {
        return Err(Error::Dim(format!(
            "batch-norm gamma/beta must have shape [{c}], got {gs:?} and {bs:?}"
        )));
    }
    Ok((xs[0], c, xs[2], xs[3]))
}
