//! Sequential model graphs: typed layer nodes with parameters, shape
//! inference, and forward passes recorded on an autodiff tape.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::activation::ActivationKind;
use crate::error::{Error, Result};
use crate::tape::{BnBatchStats, Gradients, Padding, Tape, TensorId};
use crate::tensor::Tensor;

/// Whether batch norm uses batch statistics (train) or running statistics
/// (eval), and whether dropout is active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

/// One node of a sequential model graph.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    Conv2d {
        stride: usize,
        padding: Padding,
        /// `[c_out, c_in, kh, kw]`
        weight: Tensor,
        /// `[c_out]`
        bias: Tensor,
        /// Optional per-position additive constant `[c_out, out_h, out_w]`,
        /// produced by batch-norm folding under zero padding. Not trainable.
        bias_plane: Option<Tensor>,
    },
    Dense {
        /// `[out, in]`
        weight: Tensor,
        /// `[out]`
        bias: Tensor,
    },
    Activation(ActivationKind),
    AvgPool {
        window: (usize, usize),
        stride: usize,
    },
    MaxPool {
        window: (usize, usize),
        stride: usize,
    },
    BatchNorm {
        eps: f64,
        /// EMA momentum for running statistics (PyTorch convention).
        momentum: f64,
        gamma: Tensor,
        beta: Tensor,
        running_mean: Tensor,
        running_var: Tensor,
    },
    Dropout {
        p: f64,
    },
    Flatten,
}

impl LayerKind {
    /// Stable lowercase tag used by configs, reports, and depth conventions.
    pub fn tag(&self) -> &'static str {
        match self {
            LayerKind::Conv2d { .. } => "conv2d",
            LayerKind::Dense { .. } => "dense",
            LayerKind::Activation(a) => a.name(),
            LayerKind::AvgPool { .. } => "avg_pool",
            LayerKind::MaxPool { .. } => "max_pool",
            LayerKind::BatchNorm { .. } => "batch_norm",
            LayerKind::Dropout { .. } => "dropout",
            LayerKind::Flatten => "flatten",
        }
    }

    /// Shape-only nodes that are ignored by the layer-counting rule.
    pub fn is_counting_exempt(&self) -> bool {
        matches!(self, LayerKind::Dropout { .. } | LayerKind::Flatten)
    }
}

/// Named layer in a [`ModelGraph`].
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNode {
    pub name: String,
    pub kind: LayerKind,
}

/// Ordered sequential graph of layers. List order is execution order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    pub name: String,
    input_shape: Vec<usize>,
    layers: Vec<LayerNode>,
    mode: Mode,
}

/// Handles produced by a tape forward pass.
pub struct ForwardPass {
    /// Tape id of the graph output.
    pub output: TensorId,
    /// `(parameter name, tape id)` for every trainable parameter, in the
    /// same order as [`ModelGraph::trainable_params`].
    pub bindings: Vec<(String, TensorId)>,
    /// Batch statistics observed by train-mode batch-norm layers.
    pub bn_stats: Vec<(String, BnBatchStats)>,
}

impl ModelGraph {
    pub fn new(
        name: impl Into<String>,
        input_shape: Vec<usize>,
        layers: Vec<LayerNode>,
    ) -> Result<Self> {
        let graph = ModelGraph {
            name: name.into(),
            input_shape,
            layers,
            mode: Mode::Train,
        };
        graph.validate()?;
        Ok(graph)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[LayerNode] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut Vec<LayerNode> {
        &mut self.layers
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn layer(&self, name: &str) -> Option<&LayerNode> {
        self.layers.iter().find(|l| l.name == name)
    }

    /// Unique names and an end-to-end shape check for the declared input.
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for l in &self.layers {
            if !seen.insert(l.name.as_str()) {
                return Err(Error::Invariant(format!(
                    "duplicate layer name '{}'",
                    l.name
                )));
            }
        }
        self.infer_shapes()?;
        Ok(())
    }

    /// Output shape (without the batch dimension) after every layer.
    pub fn infer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shape = self.input_shape.clone();
        let mut out = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            shape = layer_output_shape(&l.kind, &shape, &l.name)?;
            out.push(shape.clone());
        }
        Ok(out)
    }

    pub fn output_shape(&self) -> Result<Vec<usize>> {
        Ok(self
            .infer_shapes()?
            .last()
            .cloned()
            .unwrap_or_else(|| self.input_shape.clone()))
    }

    /// Number of classes produced by the final layer (1-D output required).
    pub fn num_classes(&self) -> Result<usize> {
        let out = self.output_shape()?;
        if out.len() != 1 {
            return Err(Error::Contract(format!(
                "classifier output must be 1-D, got {out:?}"
            )));
        }
        Ok(out[0])
    }

    /// Trainable parameters in deterministic order: running statistics and
    /// folded bias planes are buffers, not parameters.
    pub fn trainable_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for l in &self.layers {
            match &l.kind {
                LayerKind::Conv2d { weight, bias, .. } | LayerKind::Dense { weight, bias } => {
                    out.push((format!("{}.weight", l.name), weight));
                    out.push((format!("{}.bias", l.name), bias));
                }
                LayerKind::BatchNorm { gamma, beta, .. } => {
                    out.push((format!("{}.gamma", l.name), gamma));
                    out.push((format!("{}.beta", l.name), beta));
                }
                LayerKind::Activation(
                    ActivationKind::TrainablePoly { coeffs }
                    | ActivationKind::Weighted { coeffs, .. },
                ) => {
                    out.push((format!("{}.a", l.name), coeffs.a_tensor()));
                    out.push((format!("{}.b", l.name), coeffs.b_tensor()));
                }
                _ => {}
            }
        }
        out
    }

    pub fn trainable_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            let name = l.name.clone();
            match &mut l.kind {
                LayerKind::Conv2d { weight, bias, .. } | LayerKind::Dense { weight, bias } => {
                    out.push((format!("{name}.weight"), &mut *weight));
                    out.push((format!("{name}.bias"), &mut *bias));
                }
                LayerKind::BatchNorm { gamma, beta, .. } => {
                    out.push((format!("{name}.gamma"), &mut *gamma));
                    out.push((format!("{name}.beta"), &mut *beta));
                }
                LayerKind::Activation(
                    ActivationKind::TrainablePoly { coeffs }
                    | ActivationKind::Weighted { coeffs, .. },
                ) => {
                    let (a, b) = coeffs.tensors_mut();
                    out.push((format!("{name}.a"), a));
                    out.push((format!("{name}.b"), b));
                }
                _ => {}
            }
        }
        out
    }

    /// Every tensor in the graph (parameters and buffers), for checkpoints.
    pub fn all_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for l in &self.layers {
            match &l.kind {
                LayerKind::Conv2d {
                    weight,
                    bias,
                    bias_plane,
                    ..
                } => {
                    out.push((format!("{}.weight", l.name), weight));
                    out.push((format!("{}.bias", l.name), bias));
                    if let Some(plane) = bias_plane {
                        out.push((format!("{}.bias_plane", l.name), plane));
                    }
                }
                LayerKind::Dense { weight, bias } => {
                    out.push((format!("{}.weight", l.name), weight));
                    out.push((format!("{}.bias", l.name), bias));
                }
                LayerKind::BatchNorm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                    ..
                } => {
                    out.push((format!("{}.gamma", l.name), gamma));
                    out.push((format!("{}.beta", l.name), beta));
                    out.push((format!("{}.running_mean", l.name), running_mean));
                    out.push((format!("{}.running_var", l.name), running_var));
                }
                LayerKind::Activation(
                    ActivationKind::TrainablePoly { coeffs }
                    | ActivationKind::Weighted { coeffs, .. },
                ) => {
                    out.push((format!("{}.a", l.name), coeffs.a_tensor()));
                    out.push((format!("{}.b", l.name), coeffs.b_tensor()));
                }
                _ => {}
            }
        }
        out
    }

    /// Copies values into parameters/buffers matched by name. Unknown names
    /// are errors; missing names are left at their current values.
    pub fn load_tensors(&mut self, values: &[(String, Tensor)]) -> Result<()> {
        for (name, value) in values {
            let target = self.tensor_by_name_mut(name).ok_or_else(|| {
                Error::Format(format!(
                    "checkpoint parameter '{name}' not present in graph"
                ))
            })?;
            if target.shape() != value.shape() {
                return Err(Error::Dim(format!(
                    "parameter '{name}': expected shape {:?}, got {:?}",
                    target.shape(),
                    value.shape()
                )));
            }
            *target = value.clone();
        }
        Ok(())
    }

    /// Copies every tensor from `source` whose name and shape match one of
    /// this graph's tensors (warm starting). Returns the number copied;
    /// non-matching tensors on either side are ignored.
    pub fn copy_matching_tensors(&mut self, source: &ModelGraph) -> usize {
        let values: Vec<(String, Tensor)> = source
            .all_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect();
        let mut copied = 0;
        for (name, value) in values {
            if let Some(target) = self.tensor_by_name_mut(&name) {
                if target.shape() == value.shape() {
                    *target = value;
                    copied += 1;
                }
            }
        }
        copied
    }

    fn tensor_by_name_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let (layer_name, field) = name.rsplit_once('.')?;
        let layer = self.layers.iter_mut().find(|l| l.name == layer_name)?;
        match (&mut layer.kind, field) {
            (LayerKind::Conv2d { weight, .. }, "weight") => Some(weight),
            (LayerKind::Conv2d { bias, .. }, "bias") => Some(bias),
            (LayerKind::Conv2d { bias_plane, .. }, "bias_plane") => bias_plane.as_mut(),
            (LayerKind::Dense { weight, .. }, "weight") => Some(weight),
            (LayerKind::Dense { bias, .. }, "bias") => Some(bias),
            (LayerKind::BatchNorm { gamma, .. }, "gamma") => Some(gamma),
            (LayerKind::BatchNorm { beta, .. }, "beta") => Some(beta),
            (LayerKind::BatchNorm { running_mean, .. }, "running_mean") => Some(running_mean),
            (LayerKind::BatchNorm { running_var, .. }, "running_var") => Some(running_var),
            (
                LayerKind::Activation(
                    ActivationKind::TrainablePoly { coeffs }
                    | ActivationKind::Weighted { coeffs, .. },
                ),
                "a",
            ) => Some(coeffs.a_tensor_mut()),
            (
                LayerKind::Activation(
                    ActivationKind::TrainablePoly { coeffs }
                    | ActivationKind::Weighted { coeffs, .. },
                ),
                "b",
            ) => Some(coeffs.b_tensor_mut()),
            _ => None,
        }
    }

    /// Records a forward pass on `tape`. Dropout is sampled from `rng` only
    /// in train mode and requires one there.
    pub fn forward_on_tape<R: Rng>(
        &self,
        tape: &mut Tape,
        input: &Tensor,
        rng: Option<&mut R>,
    ) -> Result<ForwardPass> {
        self.forward_internal(tape, input, rng, true)
    }

    /// Forward pass without gradient bookkeeping. Dropout is never sampled
    /// here; batch norm honours the graph's mode flag.
    pub fn forward_infer(&self, input: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let pass =
            self.forward_internal::<rand_chacha::ChaCha8Rng>(&mut tape, input, None, false)?;
        Ok(tape.value(pass.output).clone())
    }

    fn forward_internal<R: Rng>(
        &self,
        tape: &mut Tape,
        input: &Tensor,
        mut rng: Option<&mut R>,
        dropout_active: bool,
    ) -> Result<ForwardPass> {
        let s = input.shape();
        if s.len() != self.input_shape.len() + 1 || s[1..] != self.input_shape[..] {
            return Err(Error::Dim(format!(
                "graph '{}' expects input [batch, {:?}], got {s:?}",
                self.name, self.input_shape
            )));
        }
        let mut bindings = Vec::new();
        let mut bn_stats = Vec::new();
        let mut cur = tape.leaf(input.clone());
        for l in &self.layers {
            cur = match &l.kind {
                LayerKind::Conv2d {
                    stride,
                    padding,
                    weight,
                    bias,
                    bias_plane,
                } => {
                    let w = tape.leaf(weight.clone());
                    let b = tape.leaf(bias.clone());
                    bindings.push((format!("{}.weight", l.name), w));
                    bindings.push((format!("{}.bias", l.name), b));
                    let mut y = tape.conv2d(cur, w, b, *stride, *padding)?;
                    if let Some(plane) = bias_plane {
                        y = tape.offset_plane(y, plane)?;
                    }
                    y
                }
                LayerKind::Dense { weight, bias } => {
                    let w = tape.leaf(weight.clone());
                    let b = tape.leaf(bias.clone());
                    bindings.push((format!("{}.weight", l.name), w));
                    bindings.push((format!("{}.bias", l.name), b));
                    tape.dense(cur, w, b)?
                }
                LayerKind::Activation(kind) => match kind {
                    ActivationKind::Relu => tape.relu(cur),
                    ActivationKind::Square => tape.square(cur),
                    ActivationKind::ApproxRelu => tape.approx_relu(cur),
                    ActivationKind::TrainablePoly { coeffs } => {
                        let a = tape.leaf(coeffs.a_tensor().clone());
                        let b = tape.leaf(coeffs.b_tensor().clone());
                        bindings.push((format!("{}.a", l.name), a));
                        bindings.push((format!("{}.b", l.name), b));
                        tape.poly_act(cur, a, b)?
                    }
                    ActivationKind::Weighted { lambda, coeffs } => {
                        let a = tape.leaf(coeffs.a_tensor().clone());
                        let b = tape.leaf(coeffs.b_tensor().clone());
                        bindings.push((format!("{}.a", l.name), a));
                        bindings.push((format!("{}.b", l.name), b));
                        tape.weighted_act(cur, a, b, *lambda)?
                    }
                },
                LayerKind::AvgPool { window, stride } => tape.avg_pool(cur, *window, *stride)?,
                LayerKind::MaxPool { window, stride } => tape.max_pool(cur, *window, *stride)?,
                LayerKind::BatchNorm {
                    eps,
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                    ..
                } => {
                    let g = tape.leaf(gamma.clone());
                    let b = tape.leaf(beta.clone());
                    bindings.push((format!("{}.gamma", l.name), g));
                    bindings.push((format!("{}.beta", l.name), b));
                    match self.mode {
                        Mode::Train => {
                            let (y, stats) = tape.batch_norm_train(cur, g, b, *eps)?;
                            bn_stats.push((l.name.clone(), stats));
                            y
                        }
                        Mode::Eval => {
                            tape.batch_norm_eval(cur, g, b, running_mean, running_var, *eps)?
                        }
                    }
                }
                LayerKind::Dropout { p } => {
                    if dropout_active && self.mode == Mode::Train {
                        match rng.as_deref_mut() {
                            Some(r) => tape.dropout(cur, *p, r)?,
                            None => {
                                return Err(Error::Contract(format!(
                                    "dropout layer '{}' needs an rng in train mode",
                                    l.name
                                )))
                            }
                        }
                    } else {
                        cur
                    }
                }
                LayerKind::Flatten => tape.flatten(cur)?,
            };
        }
        Ok(ForwardPass {
            output: cur,
            bindings,
            bn_stats,
        })
    }

    /// Writes gradients produced by `backward` into the matching parameter
    /// tensors, in binding order.
    pub fn store_gradients(
        &mut self,
        pass_bindings: &[(String, TensorId)],
        grads: &mut Gradients,
    ) -> Result<()> {
        let mut params = self.trainable_params_mut();
        let by_name: std::collections::HashMap<String, usize> = params
            .iter()
            .enumerate()
            .map(|(i, (n, _))| (n.clone(), i))
            .collect();
        for (name, id) in pass_bindings {
            let Some(&slot) = by_name.get(name) else {
                return Err(Error::Invariant(format!(
                    "forward pass bound unknown parameter '{name}'"
                )));
            };
            if let Some(g) = grads.take(*id) {
                params[slot].1.set_grad(g)?;
            }
        }
        Ok(())
    }

    /// Applies exponential-moving-average updates to batch-norm running
    /// statistics, using the unbiased batch variance.
    pub fn update_running_stats(&mut self, stats: &[(String, BnBatchStats)]) -> Result<()> {
        for (name, s) in stats {
            let layer = self
                .layers
                .iter_mut()
                .find(|l| l.name == *name)
                .ok_or_else(|| Error::Invariant(format!("unknown batch-norm layer '{name}'")))?;
            let LayerKind::BatchNorm {
                momentum,
                running_mean,
                running_var,
                ..
            } = &mut layer.kind
            else {
                return Err(Error::Invariant(format!(
                    "layer '{name}' is not batch-norm"
                )));
            };
            let m = *momentum;
            let correction = if s.count > 1 {
                s.count as f64 / (s.count - 1) as f64
            } else {
                1.0
            };
            for (r, b) in running_mean.data_mut().iter_mut().zip(&s.mean) {
                *r = (1.0 - m) * *r + m * *b;
            }
            for (r, b) in running_var.data_mut().iter_mut().zip(&s.var_biased) {
                *r = (1.0 - m) * *r + m * (*b * correction);
            }
        }
        Ok(())
    }

    /// True if any layer is an activation layer.
    pub fn has_activation_layers(&self) -> bool {
        self.layers
            .iter()
            .any(|l| matches!(l.kind, LayerKind::Activation(_)))
    }

    /// Total trainable parameter count.
    pub fn param_count(&self) -> usize {
        self.trainable_params().iter().map(|(_, t)| t.numel()).sum()
    }
}

/// Output shape of one layer given its (batchless) input shape.
pub fn layer_output_shape(kind: &LayerKind, input: &[usize], name: &str) -> Result<Vec<usize>> {
    match kind {
        LayerKind::Conv2d {
            stride,
            padding,
            weight,
            ..
        } => {
            let ws = weight.shape();
            if input.len() != 3 {
                return Err(Error::Dim(format!(
                    "layer '{name}': conv2d expects [c,h,w] input, got {input:?}"
                )));
            }
            let (c_out, c_in, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
            if input[0] != c_in {
                return Err(Error::Dim(format!(
                    "layer '{name}': kernel expects {c_in} input channels, input has {}",
                    input[0]
                )));
            }
            let (oh, ow) =
                crate::tape::conv_output_hw(input[1], input[2], kh, kw, *stride, *padding)
                    .map_err(|e| Error::Dim(format!("layer '{name}': {e}")))?;
            Ok(vec![c_out, oh, ow])
        }
        LayerKind::Dense { weight, .. } => {
            let ws = weight.shape();
            if input.len() != 1 || input[0] != ws[1] {
                return Err(Error::Dim(format!(
                    "layer '{name}': dense expects flat input of {} features, got {input:?}",
                    ws[1]
                )));
            }
            Ok(vec![ws[0]])
        }
        LayerKind::Activation(_) | LayerKind::Dropout { .. } => Ok(input.to_vec()),
        LayerKind::AvgPool { window, stride } | LayerKind::MaxPool { window, stride } => {
            if input.len() != 3 {
                return Err(Error::Dim(format!(
                    "layer '{name}': pooling expects [c,h,w] input, got {input:?}"
                )));
            }
            let (oh, ow) = crate::tape::pool_output_hw(input[1], input[2], *window, *stride)
                .map_err(|e| Error::Dim(format!("layer '{name}': {e}")))?;
            Ok(vec![input[0], oh, ow])
        }
        LayerKind::BatchNorm { gamma, .. } => {
            if input.len() != 3 || input[0] != gamma.numel() {
                return Err(Error::Dim(format!(
                    "layer '{name}': batch norm over {} channels cannot apply to {input:?}",
                    gamma.numel()
                )));
            }
            Ok(input.to_vec())
        }
        LayerKind::Flatten => Ok(vec![input.iter().product()]),
    }
}

/// Kaiming-uniform weight initializers.
pub mod init {
    use super::*;

    pub fn conv2d<R: Rng>(
        c_in: usize,
        c_out: usize,
        kernel: (usize, usize),
        stride: usize,
        padding: Padding,
        rng: &mut R,
    ) -> LayerKind {
        let (kh, kw) = kernel;
        let fan_in = (c_in * kh * kw) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let weight = Tensor::new(
            vec![c_out, c_in, kh, kw],
            (0..c_out * c_in * kh * kw)
                .map(|_| (2.0 * rng.random::<f64>() - 1.0) * bound)
                .collect(),
        )
        .expect("consistent shape");
        LayerKind::Conv2d {
            stride,
            padding,
            weight,
            bias: Tensor::zeros(&[c_out]),
            bias_plane: None,
        }
    }

    pub fn dense<R: Rng>(n_in: usize, n_out: usize, rng: &mut R) -> LayerKind {
        let bound = (6.0 / n_in as f64).sqrt();
        let weight = Tensor::new(
            vec![n_out, n_in],
            (0..n_out * n_in)
                .map(|_| (2.0 * rng.random::<f64>() - 1.0) * bound)
                .collect(),
        )
        .expect("consistent shape");
        LayerKind::Dense {
            weight,
            bias: Tensor::zeros(&[n_out]),
        }
    }

    /// Zero-weight conv layer for static analysis, where values are irrelevant.
    pub fn conv2d_zeros(
        c_in: usize,
        c_out: usize,
        kernel: (usize, usize),
        stride: usize,
        padding: Padding,
    ) -> LayerKind {
        LayerKind::Conv2d {
            stride,
            padding,
            weight: Tensor::zeros(&[c_out, c_in, kernel.0, kernel.1]),
            bias: Tensor::zeros(&[c_out]),
            bias_plane: None,
        }
    }

    /// Zero-weight dense layer for static analysis.
    pub fn dense_zeros(n_in: usize, n_out: usize) -> LayerKind {
        LayerKind::Dense {
            weight: Tensor::zeros(&[n_out, n_in]),
            bias: Tensor::zeros(&[n_out]),
        }
    }

    pub fn batch_norm(channels: usize, eps: f64, momentum: f64) -> LayerKind {
        LayerKind::BatchNorm {
            eps,
            momentum,
            gamma: Tensor::filled(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::filled(&[channels], 1.0),
        }
    }
}
