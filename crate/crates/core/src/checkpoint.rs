//! Versioned checkpoint container.
//!
//! Layout (documented in the README and stable across releases):
//!
//! ```text
//! bytes 0..8   magic  b"HEFNET01"  (format + version)
//! bytes 8..16  u64 LE header length N
//! bytes 16..16+N  header JSON: architecture + parameter manifest
//! remainder    raw little-endian f64 blobs, one per manifest entry, in order
//! ```
//!
//! Every tensor of the graph (weights, biases, activation coefficients,
//! batch-norm running statistics, folded bias planes) is a manifest entry of
//! `name -> shape`, so parameters round-trip bit-for-bit.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::activation::{ActivationKind, PolyCoeffs};
use crate::error::{Error, Result};
use crate::graph::{LayerKind, LayerNode, Mode, ModelGraph};
use crate::tape::Padding;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"HEFNET01";

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    name: String,
    input_shape: Vec<usize>,
    mode: Mode,
    layers: Vec<LayerDesc>,
    params: Vec<ParamDesc>,
}

#[derive(Serialize, Deserialize)]
struct ParamDesc {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum LayerDesc {
    Conv2d {
        name: String,
        stride: usize,
        padding: Padding,
    },
    Dense {
        name: String,
    },
    Activation {
        name: String,
        act: ActDesc,
    },
    AvgPool {
        name: String,
        window: (usize, usize),
        stride: usize,
    },
    MaxPool {
        name: String,
        window: (usize, usize),
        stride: usize,
    },
    BatchNorm {
        name: String,
        eps: f64,
        momentum: f64,
    },
    Dropout {
        name: String,
        p: f64,
    },
    Flatten {
        name: String,
    },
}

/// Activation kind without coefficient values; the coefficients travel in
/// the parameter blobs like every other trainable value.
#[derive(Serialize, Deserialize)]
#[serde(tag = "fn", rename_all = "snake_case")]
enum ActDesc {
    Relu,
    Square,
    ApproxRelu,
    TrainablePoly,
    Weighted { lambda: f64 },
}

fn layer_desc(node: &LayerNode) -> LayerDesc {
    let name = node.name.clone();
    match &node.kind {
        LayerKind::Conv2d {
            stride, padding, ..
        } => LayerDesc::Conv2d {
            name,
            stride: *stride,
            padding: *padding,
        },
        LayerKind::Dense { .. } => LayerDesc::Dense { name },
        LayerKind::Activation(kind) => LayerDesc::Activation {
            name,
            act: match kind {
                ActivationKind::Relu => ActDesc::Relu,
                ActivationKind::Square => ActDesc::Square,
                ActivationKind::ApproxRelu => ActDesc::ApproxRelu,
                ActivationKind::TrainablePoly { .. } => ActDesc::TrainablePoly,
                ActivationKind::Weighted { lambda, .. } => ActDesc::Weighted { lambda: *lambda },
            },
        },
        LayerKind::AvgPool { window, stride } => LayerDesc::AvgPool {
            name,
            window: *window,
            stride: *stride,
        },
        LayerKind::MaxPool { window, stride } => LayerDesc::MaxPool {
            name,
            window: *window,
            stride: *stride,
        },
        LayerKind::BatchNorm { eps, momentum, .. } => LayerDesc::BatchNorm {
            name,
            eps: *eps,
            momentum: *momentum,
        },
        LayerKind::Dropout { p } => LayerDesc::Dropout { name, p: *p },
        LayerKind::Flatten => LayerDesc::Flatten { name },
    }
}

fn shape_of<'a>(params: &'a [ParamDesc], name: &str) -> Result<&'a [usize]> {
    params
        .iter()
        .find(|p| p.name == name)
        .map(|p| p.shape.as_slice())
        .ok_or_else(|| Error::Format(format!("missing parameter '{name}' in checkpoint manifest")))
}

fn rebuild_layer(desc: &LayerDesc, params: &[ParamDesc]) -> Result<LayerNode> {
    let node = match desc {
        LayerDesc::Conv2d {
            name,
            stride,
            padding,
        } => {
            let w = shape_of(params, &format!("{name}.weight"))?;
            let b = shape_of(params, &format!("{name}.bias"))?;
            let plane = params
                .iter()
                .find(|p| p.name == format!("{name}.bias_plane"))
                .map(|p| Tensor::zeros(&p.shape));
            LayerNode {
                name: name.clone(),
                kind: LayerKind::Conv2d {
                    stride: *stride,
                    padding: *padding,
                    weight: Tensor::zeros(w),
                    bias: Tensor::zeros(b),
                    bias_plane: plane,
                },
            }
        }
        LayerDesc::Dense { name } => {
            let w = shape_of(params, &format!("{name}.weight"))?;
            let b = shape_of(params, &format!("{name}.bias"))?;
            LayerNode {
                name: name.clone(),
                kind: LayerKind::Dense {
                    weight: Tensor::zeros(w),
                    bias: Tensor::zeros(b),
                },
            }
        }
        LayerDesc::Activation { name, act } => {
            let kind = match act {
                ActDesc::Relu => ActivationKind::Relu,
                ActDesc::Square => ActivationKind::Square,
                ActDesc::ApproxRelu => ActivationKind::ApproxRelu,
                ActDesc::TrainablePoly => ActivationKind::TrainablePoly {
                    coeffs: PolyCoeffs::new(0.0, 0.0),
                },
                ActDesc::Weighted { lambda } => ActivationKind::Weighted {
                    lambda: *lambda,
                    coeffs: PolyCoeffs::new(0.0, 0.0),
                },
            };
            LayerNode {
                name: name.clone(),
                kind: LayerKind::Activation(kind),
            }
        }
        LayerDesc::AvgPool {
            name,
            window,
            stride,
        } => LayerNode {
            name: name.clone(),
            kind: LayerKind::AvgPool {
                window: *window,
                stride: *stride,
            },
        },
        LayerDesc::MaxPool {
            name,
            window,
            stride,
        } => LayerNode {
            name: name.clone(),
            kind: LayerKind::MaxPool {
                window: *window,
                stride: *stride,
            },
        },
        LayerDesc::BatchNorm {
            name,
            eps,
            momentum,
        } => {
            let c = shape_of(params, &format!("{name}.gamma"))?;
            LayerNode {
                name: name.clone(),
                kind: LayerKind::BatchNorm {
                    eps: *eps,
                    momentum: *momentum,
                    gamma: Tensor::zeros(c),
                    beta: Tensor::zeros(c),
                    running_mean: Tensor::zeros(c),
                    running_var: Tensor::zeros(c),
                },
            }
        }
        LayerDesc::Dropout { name, p } => LayerNode {
            name: name.clone(),
            kind: LayerKind::Dropout { p: *p },
        },
        LayerDesc::Flatten { name } => LayerNode {
            name: name.clone(),
            kind: LayerKind::Flatten,
        },
    };
    Ok(node)
}

/// Serializes a graph into the checkpoint byte format.
pub fn to_bytes(graph: &ModelGraph) -> Result<Vec<u8>> {
    let tensors = graph.all_tensors();
    let header = Header {
        format: "hefnet-checkpoint".into(),
        version: 1,
        name: graph.name.clone(),
        input_shape: graph.input_shape().to_vec(),
        mode: graph.mode(),
        layers: graph.layers().iter().map(layer_desc).collect(),
        params: tensors
            .iter()
            .map(|(name, t)| ParamDesc {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let header_json =
        serde_json::to_vec(&header).map_err(|e| Error::Format(format!("header encode: {e}")))?;
    let blob_len: usize = tensors.iter().map(|(_, t)| t.numel() * 8).sum();
    let mut out = Vec::with_capacity(16 + header_json.len() + blob_len);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    for (_, t) in &tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Reconstructs a graph from checkpoint bytes.
pub fn from_bytes(bytes: &[u8]) -> Result<ModelGraph> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Format(
            "not a hefnet checkpoint (bad magic); expected header HEFNET01".into(),
        ));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let header_end = 16usize
        .checked_add(header_len)
        .filter(|end| *end <= bytes.len())
        .ok_or_else(|| Error::Format("truncated checkpoint header".into()))?;
    let header: Header = serde_json::from_slice(&bytes[16..header_end])
        .map_err(|e| Error::Format(format!("header decode: {e}")))?;
    if header.version != 1 {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {}",
            header.version
        )));
    }

    let layers = header
        .layers
        .iter()
        .map(|d| rebuild_layer(d, &header.params))
        .collect::<Result<Vec<_>>>()?;
    let mut graph = ModelGraph::new(header.name, header.input_shape, layers)?;
    graph.set_mode(header.mode);

    let mut offset = header_end;
    let mut values = Vec::with_capacity(header.params.len());
    for p in &header.params {
        let numel: usize = p.shape.iter().product();
        let end = offset + numel * 8;
        if end > bytes.len() {
            return Err(Error::Format(format!(
                "checkpoint truncated inside parameter '{}'",
                p.name
            )));
        }
        let data: Vec<f64> = bytes[offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        values.push((p.name.clone(), Tensor::new(p.shape.clone(), data)?));
        offset = end;
    }
    if offset != bytes.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} trailing bytes",
            bytes.len() - offset
        )));
    }
    graph.load_tensors(&values)?;
    Ok(graph)
}

pub fn save(graph: &ModelGraph, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        }
    }
    fs::write(path, to_bytes(graph)?).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load(path: impl AsRef<Path>) -> Result<ModelGraph> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    from_bytes(&bytes)
}
