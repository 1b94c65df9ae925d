//! Multiplicative-depth accounting and HE-friendliness linting.
//!
//! Leveled HE schemes budget the longest chain of sequential multiplications,
//! so every layer is assigned a depth cost; layers that cannot be expressed
//! as polynomials (ReLU, max-pool) have no cost at all and are reported as
//! violations instead.

use std::collections::BTreeMap;
use std::fmt;

use serde::Deserialize;

use crate::activation::ActivationKind;
use crate::error::{Error, Result};
use crate::graph::{LayerKind, Mode, ModelGraph};

/// Per-layer-kind multiplicative-depth cost.
///
/// The default convention charges one level to any layer that multiplies by
/// model data (conv, dense, polynomial activations, unfolded batch norm) and
/// to avg-pool's `1/n` scaling; flatten and dropout are free. ReLU and
/// max-pool deliberately have no cost: they are violations, not costed ops.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DepthConvention {
    costs: BTreeMap<String, u32>,
}

impl Default for DepthConvention {
    fn default() -> Self {
        let mut costs = BTreeMap::new();
        for kind in [
            "conv2d",
            "dense",
            "trainable_poly",
            "square",
            "approx_relu",
            "avg_pool",
            "batch_norm",
        ] {
            costs.insert(kind.to_string(), 1);
        }
        costs.insert("flatten".to_string(), 0);
        costs.insert("dropout".to_string(), 0);
        DepthConvention { costs }
    }
}

impl DepthConvention {
    /// Parses a TOML table of `kind = cost` overrides on top of the default
    /// convention, e.g. `avg_pool = 0` for schemes where the plaintext `1/n`
    /// scaling is free.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct File {
            #[serde(flatten)]
            costs: BTreeMap<String, u32>,
        }
        let file: File =
            toml::from_str(text).map_err(|e| Error::Config(format!("depth convention: {e}")))?;
        let mut convention = DepthConvention::default();
        for (kind, cost) in file.costs {
            if matches!(kind.as_str(), "relu" | "max_pool" | "weighted") {
                return Err(Error::Config(format!(
                    "'{kind}' is not a costed op; it is always an HE violation"
                )));
            }
            convention.costs.insert(kind, cost);
        }
        Ok(convention)
    }

    pub fn cost_for_tag(&self, tag: &str) -> Option<u32> {
        self.costs.get(tag).copied()
    }

    /// Cost of a concrete layer; `None` marks an uncosted (violating) kind.
    /// A fully transitioned weighted activation costs the same as the
    /// trainable polynomial it evaluates to.
    pub fn cost_for(&self, kind: &LayerKind) -> Option<u32> {
        match kind {
            LayerKind::Activation(ActivationKind::Weighted { lambda, .. }) if *lambda >= 1.0 => {
                self.cost_for_tag("trainable_poly")
            }
            other => self.cost_for_tag(other.tag()),
        }
    }
}

/// One HE-friendliness finding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub node: String,
    pub reason: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.node, self.reason)
    }
}

/// Per-node depth cost plus totals and violations.
#[derive(Debug, Clone)]
pub struct DepthReport {
    /// `(node name, kind tag, cost)`; `None` cost marks an uncosted kind.
    pub per_node: Vec<(String, String, Option<u32>)>,
    /// Sum of costs along the sequential chain.
    pub total_depth: u32,
    /// Empty iff the graph is HE-friendly.
    pub violations: Vec<Violation>,
    /// Layer count under the shipped-architecture counting rule: every node
    /// except dropout and flatten.
    pub layer_count: usize,
}

impl fmt::Display for DepthReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name_w = self
            .per_node
            .iter()
            .map(|(n, _, _)| n.len())
            .max()
            .unwrap_or(4)
            .max(4);
        writeln!(f, "{:<name_w$}  {:<16}  depth", "node", "kind")?;
        for (name, kind, cost) in &self.per_node {
            match cost {
                Some(c) => writeln!(f, "{name:<name_w$}  {kind:<16}  {c}")?,
                None => writeln!(f, "{name:<name_w$}  {kind:<16}  -")?,
            }
        }
        writeln!(f, "total multiplicative depth: {}", self.total_depth)?;
        writeln!(
            f,
            "layer count (dropout/flatten exempt): {}",
            self.layer_count
        )?;
        if self.violations.is_empty() {
            writeln!(f, "violations: none")?;
        } else {
            writeln!(f, "violations ({}):", self.violations.len())?;
            for v in &self.violations {
                writeln!(f, "  - {v}")?;
            }
        }
        Ok(())
    }
}

/// Flags every node a leveled HE scheme cannot evaluate: ReLU, max-pool,
/// partially blended activations, train-mode batch norm, and dropout.
/// An empty result means the graph is HE-friendly.
pub fn he_lint(graph: &ModelGraph) -> Vec<Violation> {
    let mut out = Vec::new();
    for node in graph.layers() {
        match &node.kind {
            LayerKind::Activation(ActivationKind::Relu) => out.push(Violation {
                node: node.name.clone(),
                reason: "relu is not a polynomial (max comparison)".into(),
            }),
            LayerKind::Activation(ActivationKind::Weighted { lambda, .. }) if *lambda < 1.0 => out
                .push(Violation {
                    node: node.name.clone(),
                    reason: format!("weighted activation keeps a ReLU branch (lambda={lambda})"),
                }),
            LayerKind::MaxPool { .. } => out.push(Violation {
                node: node.name.clone(),
                reason: "max-pool is not a polynomial (max comparison)".into(),
            }),
            LayerKind::Dropout { .. } => out.push(Violation {
                node: node.name.clone(),
                reason: "dropout is a train-time stochastic op; remove it for inference".into(),
            }),
            LayerKind::BatchNorm { .. } if graph.mode() == Mode::Train => out.push(Violation {
                node: node.name.clone(),
                reason: "train-mode batch norm depends on batch statistics".into(),
            }),
            _ => {}
        }
    }
    out
}

/// Sums per-node depth costs along the sequential chain and reports
/// violations (lint findings plus any kind the convention does not cost).
/// Violations are data, not errors.
pub fn multiplicative_depth(graph: &ModelGraph, convention: &DepthConvention) -> DepthReport {
    let mut per_node = Vec::with_capacity(graph.layers().len());
    let mut total = 0u32;
    let mut violations = he_lint(graph);
    for node in graph.layers() {
        let cost = convention.cost_for(&node.kind);
        let tag = node.kind.tag().to_string();
        if let Some(c) = cost {
            total += c;
        } else if !violations.iter().any(|v| v.node == node.name) {
            violations.push(Violation {
                node: node.name.clone(),
                reason: format!("no depth cost defined for kind '{tag}'"),
            });
        }
        per_node.push((node.name.clone(), tag, cost));
    }
    let layer_count = graph
        .layers()
        .iter()
        .filter(|l| !l.kind.is_counting_exempt())
        .count();
    DepthReport {
        per_node,
        total_depth: total,
        violations,
        layer_count,
    }
}
