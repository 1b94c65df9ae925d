//! Compiler-style rewrites over model graphs: batch-norm folding, max-pool
//! substitution, and HE finalization. All passes are pure; the input graph is
//! never mutated.

use crate::activation::ActivationKind;
use crate::error::{Error, Result};
use crate::graph::{LayerKind, LayerNode, Mode, ModelGraph};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Absorbs every eval-mode batch-norm node into the weights of the next
/// conv/dense layer, looking through shape-only nodes (flatten, dropout).
///
/// With per-channel scale `s = gamma / sqrt(var + eps)` and shift
/// `t = beta - mean * s`, the next layer's weights become `W' = W . diag(s)`
/// on the matching input channels and its bias absorbs `W . t`. For a conv
/// under zero padding the shift contribution is position dependent near the
/// borders, so it is stored as a constant bias plane; when it is uniform it
/// collapses back into the per-channel bias. The rewritten graph is
/// numerically equivalent to the input.
pub fn fold_batch_norm(graph: &ModelGraph) -> Result<ModelGraph> {
    if graph.mode() != Mode::Eval {
        return Err(Error::Contract(
            "fold_batch_norm requires an eval-mode graph".into(),
        ));
    }
    let layers = graph.layers();
    let shapes = graph.infer_shapes()?;

    struct Fold {
        bn_idx: usize,
        target_idx: usize,
        scale: Vec<f64>,
        shift: Vec<f64>,
        /// Shape at the batch-norm output, `[c, h, w]`.
        bn_shape: Vec<usize>,
    }

    let mut folds: Vec<Fold> = Vec::new();
    for (i, node) in layers.iter().enumerate() {
        let LayerKind::BatchNorm {
            eps,
            gamma,
            beta,
            running_mean,
            running_var,
            ..
        } = &node.kind
        else {
            continue;
        };
        if let Some(v) = running_var.data().iter().find(|v| **v < 0.0) {
            return Err(Error::Invariant(format!(
                "batch-norm '{}' has negative running variance {v}",
                node.name
            )));
        }
        let scale: Vec<f64> = gamma
            .data()
            .iter()
            .zip(running_var.data())
            .map(|(g, v)| g / (v + eps).sqrt())
            .collect();
        let shift: Vec<f64> = beta
            .data()
            .iter()
            .zip(running_mean.data())
            .zip(&scale)
            .map(|((b, m), s)| b - m * s)
            .collect();

        // Look through shape-only nodes for the layer that absorbs the fold.
        let mut j = i + 1;
        loop {
            match layers.get(j).map(|l| &l.kind) {
                Some(LayerKind::Flatten) | Some(LayerKind::Dropout { .. }) => j += 1,
                Some(LayerKind::Conv2d { .. }) | Some(LayerKind::Dense { .. }) => break,
                Some(_) => {
                    return Err(Error::Fold(format!(
                        "batch-norm '{}' is followed by '{}' ({}), which cannot absorb it",
                        node.name,
                        layers[j].name,
                        layers[j].kind.tag()
                    )))
                }
                None => {
                    return Err(Error::Fold(format!(
                        "batch-norm '{}' has no following conv/dense layer to absorb it",
                        node.name
                    )))
                }
            }
        }
        folds.push(Fold {
            bn_idx: i,
            target_idx: j,
            scale,
            shift,
            bn_shape: shapes[i].clone(),
        });
    }

    let mut out_layers: Vec<LayerNode> = Vec::with_capacity(layers.len());
    for (i, node) in layers.iter().enumerate() {
        if folds.iter().any(|f| f.bn_idx == i) {
            continue;
        }
        let node = match folds.iter().find(|f| f.target_idx == i) {
            Some(fold) => LayerNode {
                name: node.name.clone(),
                kind: fold_into_layer(node, &fold.scale, &fold.shift, &fold.bn_shape)?,
            },
            None => node.clone(),
        };
        out_layers.push(node);
    }
    let mut folded = ModelGraph::new(graph.name.clone(), graph.input_shape().to_vec(), out_layers)?;
    folded.set_mode(graph.mode());
    Ok(folded)
}

fn fold_into_layer(
    node: &LayerNode,
    scale: &[f64],
    shift: &[f64],
    bn_shape: &[usize],
) -> Result<LayerKind> {
    match &node.kind {
        LayerKind::Dense { weight, bias } => {
            let (n_out, n_in) = (weight.shape()[0], weight.shape()[1]);
            let features: usize = bn_shape.iter().product();
            if features != n_in {
                return Err(Error::Fold(format!(
                    "dense '{}' takes {n_in} features but batch-norm output has {features}",
                    node.name
                )));
            }
            // Row-major [c, h, w] flatten: feature index -> channel.
            let per_channel = features / scale.len();
            let mut w = weight.data().to_vec();
            let mut b = bias.data().to_vec();
            for (j, brow) in b.iter_mut().enumerate() {
                let row = &mut w[j * n_in..(j + 1) * n_in];
                for (f, wv) in row.iter_mut().enumerate() {
                    let c = f / per_channel;
                    *brow += *wv * shift[c];
                    *wv *= scale[c];
                }
            }
            Ok(LayerKind::Dense {
                weight: Tensor::new(vec![n_out, n_in], w)?,
                bias: Tensor::new(vec![n_out], b)?,
            })
        }
        LayerKind::Conv2d {
            stride,
            padding,
            weight,
            bias,
            bias_plane,
        } => {
            let ws = weight.shape();
            let (c_out, c_in, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
            if bn_shape.len() != 3 || bn_shape[0] != c_in {
                return Err(Error::Fold(format!(
                    "conv '{}' takes {c_in} channels but batch-norm output is {bn_shape:?}",
                    node.name
                )));
            }
            // A zero shift contributes nothing: only the channel scaling
            // applies and the existing bias terms carry over.
            if shift.iter().all(|t| *t == 0.0) {
                let mut w = weight.data().to_vec();
                for o in 0..c_out {
                    for i in 0..c_in {
                        let base = (o * c_in + i) * kh * kw;
                        for v in &mut w[base..base + kh * kw] {
                            *v *= scale[i];
                        }
                    }
                }
                return Ok(LayerKind::Conv2d {
                    stride: *stride,
                    padding: *padding,
                    weight: Tensor::new(vec![c_out, c_in, kh, kw], w)?,
                    bias: bias.clone(),
                    bias_plane: bias_plane.clone(),
                });
            }
            // Constant response of the original layer to the shift: this is
            // the exact bias term of the folded layer, position dependent
            // wherever zero padding cuts into the kernel support.
            let shift_input = Tensor::new(
                vec![1, c_in, bn_shape[1], bn_shape[2]],
                (0..c_in * bn_shape[1] * bn_shape[2])
                    .map(|i| shift[i / (bn_shape[1] * bn_shape[2])])
                    .collect(),
            )?;
            let mut tape = Tape::new();
            let x = tape.leaf(shift_input);
            let w_id = tape.leaf(weight.clone());
            let b_id = tape.leaf(bias.clone());
            let mut response = tape.conv2d(x, w_id, b_id, *stride, *padding)?;
            if let Some(plane) = bias_plane {
                response = tape.offset_plane(response, plane)?;
            }
            let response = tape.value(response).clone();
            let rs = response.shape().to_vec();
            let (out_h, out_w) = (rs[2], rs[3]);

            let mut w = weight.data().to_vec();
            for o in 0..c_out {
                for i in 0..c_in {
                    let base = (o * c_in + i) * kh * kw;
                    for v in &mut w[base..base + kh * kw] {
                        *v *= scale[i];
                    }
                }
            }
            let weight = Tensor::new(vec![c_out, c_in, kh, kw], w)?;

            // Collapse a spatially uniform response into a plain bias.
            let rd = response.data();
            let hw = out_h * out_w;
            let uniform = (0..c_out).all(|o| {
                let first = rd[o * hw];
                rd[o * hw..(o + 1) * hw].iter().all(|v| *v == first)
            });
            if uniform {
                let b: Vec<f64> = (0..c_out).map(|o| rd[o * hw]).collect();
                Ok(LayerKind::Conv2d {
                    stride: *stride,
                    padding: *padding,
                    weight,
                    bias: Tensor::new(vec![c_out], b)?,
                    bias_plane: None,
                })
            } else {
                Ok(LayerKind::Conv2d {
                    stride: *stride,
                    padding: *padding,
                    weight,
                    bias: Tensor::zeros(&[c_out]),
                    bias_plane: Some(Tensor::new(vec![c_out, out_h, out_w], rd.to_vec())?),
                })
            }
        }
        other => Err(Error::Fold(format!(
            "cannot fold batch-norm into '{}' ({})",
            node.name,
            other.tag()
        ))),
    }
}

/// Replaces every max-pool node with an avg-pool of identical window and
/// stride. Returns the new graph and the names of the replaced nodes.
pub fn replace_maxpool_with_avgpool(graph: &ModelGraph) -> Result<(ModelGraph, Vec<String>)> {
    let mut out = graph.clone();
    let mut replaced = Vec::new();
    for layer in out.layers_mut() {
        if let LayerKind::MaxPool { window, stride } = layer.kind {
            layer.kind = LayerKind::AvgPool { window, stride };
            replaced.push(layer.name.clone());
        }
    }
    Ok((out, replaced))
}

/// Rewrites a fully transitioned graph into its HE-evaluable form:
/// `Weighted(1)` activations become trainable polynomials, dropout nodes are
/// removed, the graph is switched to eval mode, and batch norm is folded
/// away. The result passes [`crate::depth::he_lint`] with zero violations and
/// keeps eval-mode outputs bit-for-bit close to the input graph.
///
/// Errors if any weighted activation still has `lambda < 1` or if a ReLU or
/// max-pool node survives.
pub fn finalize_he_friendly(graph: &ModelGraph) -> Result<ModelGraph> {
    let mut layers: Vec<LayerNode> = Vec::with_capacity(graph.layers().len());
    for node in graph.layers() {
        match &node.kind {
            LayerKind::Activation(ActivationKind::Weighted { lambda, coeffs }) => {
                if *lambda < 1.0 {
                    return Err(Error::Finalize(format!(
                        "activation '{}' still blends ReLU (lambda={lambda}); finish the transition first",
                        node.name
                    )));
                }
                layers.push(LayerNode {
                    name: node.name.clone(),
                    kind: LayerKind::Activation(ActivationKind::TrainablePoly {
                        coeffs: coeffs.clone(),
                    }),
                });
            }
            LayerKind::Activation(ActivationKind::Relu) => {
                return Err(Error::Finalize(format!(
                    "activation '{}' is ReLU; transition it to a polynomial first",
                    node.name
                )));
            }
            LayerKind::MaxPool { .. } => {
                return Err(Error::Finalize(format!(
                    "max-pool '{}' is not HE-friendly; replace it with avg-pool first",
                    node.name
                )));
            }
            LayerKind::Dropout { .. } => {}
            _ => layers.push(node.clone()),
        }
    }
    let mut out = ModelGraph::new(graph.name.clone(), graph.input_shape().to_vec(), layers)?;
    out.set_mode(Mode::Eval);
    if out
        .layers()
        .iter()
        .any(|l| matches!(l.kind, LayerKind::BatchNorm { .. }))
    {
        out = fold_batch_norm(&out)?;
    }
    Ok(out)
}
