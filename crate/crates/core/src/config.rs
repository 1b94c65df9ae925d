//! Human-readable TOML configuration for model architectures and training
//! runs. The model format is sequential by construction; anything outside the
//! documented keys is rejected with a clear error.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::Deserialize;

use crate::activation::{ActivationKind, PolyCoeffs};
use crate::data::DatasetSpec;
use crate::error::{Error, Result};
use crate::graph::{init, layer_output_shape, LayerKind, LayerNode, ModelGraph};
use crate::schedule::TransitionSchedule;
use crate::tape::Padding;

// ── Model configs ───────────────────────────────────────────────────

/// Raw `[[layer]]` table. Which keys apply depends on `kind`:
///
/// * `conv2d` — `filters`, `kernel`, `stride` (1), `padding` ("same"),
///   optional `activation` sugar appending `<name>_act`;
/// * `dense` — `units`, optional `activation`;
/// * `activation` — `fn` (relu | square | approx_relu | trainable_poly |
///   weighted), optional `a`/`b`, `lambda` for weighted;
/// * `avg_pool` / `max_pool` — `window`, `stride`;
/// * `batch_norm` — optional `eps` (1e-5), `momentum` (0.1);
/// * `dropout` — `p`;
/// * `flatten` — nothing.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerConfig {
    kind: String,
    name: Option<String>,
    // conv2d
    filters: Option<usize>,
    kernel: Option<[usize; 2]>,
    stride: Option<usize>,
    padding: Option<String>,
    // dense
    units: Option<usize>,
    // conv2d / dense sugar
    activation: Option<String>,
    // activation nodes
    #[serde(rename = "fn")]
    function: Option<String>,
    a: Option<f64>,
    b: Option<f64>,
    lambda: Option<f64>,
    // pooling
    window: Option<[usize; 2]>,
    // batch norm
    eps: Option<f64>,
    momentum: Option<f64>,
    // dropout
    p: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelConfigFile {
    name: String,
    /// `[channels, height, width]`.
    input: Vec<usize>,
    #[serde(rename = "layer")]
    layers: Vec<LayerConfig>,
}

/// Validated architecture description, ready to materialize.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    file: ModelConfigFile,
}

impl ModelSpec {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: ModelConfigFile =
            toml::from_str(text).map_err(|e| Error::Config(format!("model config: {e}")))?;
        if file.input.len() != 1 && file.input.len() != 3 {
            return Err(Error::Config(format!(
                "input must be [features] or [channels, height, width], got {:?}",
                file.input
            )));
        }
        if file.layers.is_empty() {
            return Err(Error::Config("model has no layers".into()));
        }
        Ok(ModelSpec { file })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text =
            fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_toml_str(&text)
    }

    pub fn name(&self) -> &str {
        &self.file.name
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.file.input
    }

    /// Same architecture at a different input signature. Layer counts,
    /// depth costs, and lint findings are resolution-invariant, so static
    /// analysis of large architectures can run at a reduced spatial size.
    pub fn with_input(&self, input: Vec<usize>) -> ModelSpec {
        let mut file = self.file.clone();
        file.input = input;
        ModelSpec { file }
    }

    /// Materializes the graph with Kaiming-uniform weights drawn from `rng`.
    /// Dense in-features and conv in-channels are inferred from the running
    /// shape, so configs only state output sizes.
    pub fn build<R: Rng>(&self, rng: &mut R) -> Result<ModelGraph> {
        self.build_impl(Some(rng))
    }

    /// Materializes the graph with zero weights. Layer counting, depth
    /// accounting, linting, and fold structure do not depend on weight
    /// values, and zero pages are much cheaper for large architectures.
    pub fn build_for_analysis(&self) -> Result<ModelGraph> {
        self.build_impl::<rand_chacha::ChaCha8Rng>(None)
    }

    fn build_impl<R: Rng>(&self, mut rng: Option<&mut R>) -> Result<ModelGraph> {
        let mut shape = self.file.input.clone();
        let mut layers: Vec<LayerNode> = Vec::new();
        let mut counters: std::collections::BTreeMap<&'static str, usize> = Default::default();
        let next_name =
            |prefix: &'static str,
             counters: &mut std::collections::BTreeMap<&'static str, usize>| {
                let c = counters.entry(prefix).or_insert(0);
                *c += 1;
                format!("{prefix}{c}")
            };

        for (idx, cfg) in self.file.layers.iter().enumerate() {
            let position = idx + 1;
            let mut push = |name: String, kind: LayerKind, shape: &mut Vec<usize>| -> Result<()> {
                *shape = layer_output_shape(&kind, shape, &name)?;
                layers.push(LayerNode { name, kind });
                Ok(())
            };
            match cfg.kind.as_str() {
                "conv2d" => {
                    let filters = cfg.filters.ok_or_else(|| {
                        Error::Config(format!("layer {position}: conv2d needs 'filters'"))
                    })?;
                    let kernel = cfg.kernel.ok_or_else(|| {
                        Error::Config(format!("layer {position}: conv2d needs 'kernel'"))
                    })?;
                    if shape.len() != 3 {
                        return Err(Error::Config(format!(
                            "layer {position}: conv2d cannot follow a flattened shape {shape:?}"
                        )));
                    }
                    let padding = parse_padding(cfg.padding.as_deref(), position)?;
                    let name = cfg
                        .name
                        .clone()
                        .unwrap_or_else(|| next_name("conv", &mut counters));
                    let kind = match rng.as_deref_mut() {
                        Some(r) => init::conv2d(
                            shape[0],
                            filters,
                            (kernel[0], kernel[1]),
                            cfg.stride.unwrap_or(1),
                            padding,
                            r,
                        ),
                        None => init::conv2d_zeros(
                            shape[0],
                            filters,
                            (kernel[0], kernel[1]),
                            cfg.stride.unwrap_or(1),
                            padding,
                        ),
                    };
                    let act = cfg.activation.clone();
                    let act_name = format!("{name}_act");
                    push(name, kind, &mut shape)?;
                    if let Some(act) = act {
                        let kind = LayerKind::Activation(parse_activation(
                            &act, None, None, None, position,
                        )?);
                        push(act_name, kind, &mut shape)?;
                    }
                }
                "dense" => {
                    let units = cfg.units.ok_or_else(|| {
                        Error::Config(format!("layer {position}: dense needs 'units'"))
                    })?;
                    if shape.len() != 1 {
                        return Err(Error::Config(format!(
                            "layer {position}: dense needs a flattened input; insert a flatten layer (shape is {shape:?})"
                        )));
                    }
                    let name = cfg
                        .name
                        .clone()
                        .unwrap_or_else(|| next_name("fc", &mut counters));
                    let kind = match rng.as_deref_mut() {
                        Some(r) => init::dense(shape[0], units, r),
                        None => init::dense_zeros(shape[0], units),
                    };
                    let act = cfg.activation.clone();
                    let act_name = format!("{name}_act");
                    push(name, kind, &mut shape)?;
                    if let Some(act) = act {
                        let kind = LayerKind::Activation(parse_activation(
                            &act, None, None, None, position,
                        )?);
                        push(act_name, kind, &mut shape)?;
                    }
                }
                "activation" => {
                    let function = cfg.function.as_deref().ok_or_else(|| {
                        Error::Config(format!("layer {position}: activation needs 'fn'"))
                    })?;
                    let name = cfg
                        .name
                        .clone()
                        .unwrap_or_else(|| next_name("act", &mut counters));
                    let kind = LayerKind::Activation(parse_activation(
                        function, cfg.a, cfg.b, cfg.lambda, position,
                    )?);
                    push(name, kind, &mut shape)?;
                }
                "avg_pool" | "max_pool" => {
                    let window = cfg.window.ok_or_else(|| {
                        Error::Config(format!("layer {position}: pooling needs 'window'"))
                    })?;
                    let stride = cfg.stride.unwrap_or(window[0]);
                    let name = cfg
                        .name
                        .clone()
                        .unwrap_or_else(|| next_name("pool", &mut counters));
                    let kind = if cfg.kind == "avg_pool" {
                        LayerKind::AvgPool {
                            window: (window[0], window[1]),
                            stride,
                        }
                    } else {
                        LayerKind::MaxPool {
                            window: (window[0], window[1]),
                            stride,
                        }
                    };
                    push(name, kind, &mut shape)?;
                }
                "batch_norm" => {
                    if shape.len() != 3 {
                        return Err(Error::Config(format!(
                            "layer {position}: batch_norm expects [c,h,w] input, got {shape:?}"
                        )));
                    }
                    let name = cfg
                        .name
                        .clone()
                        .unwrap_or_else(|| next_name("bn", &mut counters));
                    let kind = init::batch_norm(
                        shape[0],
                        cfg.eps.unwrap_or(1e-5),
                        cfg.momentum.unwrap_or(0.1),
                    );
                    push(name, kind, &mut shape)?;
                }
                "dropout" => {
                    let p = cfg.p.ok_or_else(|| {
                        Error::Config(format!("layer {position}: dropout needs 'p'"))
                    })?;
                    let name = cfg
                        .name
                        .clone()
                        .unwrap_or_else(|| next_name("drop", &mut counters));
                    push(name, LayerKind::Dropout { p }, &mut shape)?;
                }
                "flatten" => {
                    let name = cfg
                        .name
                        .clone()
                        .unwrap_or_else(|| next_name("flat", &mut counters));
                    push(name, LayerKind::Flatten, &mut shape)?;
                }
                other => {
                    return Err(Error::Config(format!(
                        "layer {position}: unknown kind '{other}' (the format is sequential; \
                         branching architectures are not expressible)"
                    )))
                }
            }
        }
        ModelGraph::new(self.file.name.clone(), self.file.input.clone(), layers)
    }
}

fn parse_padding(s: Option<&str>, position: usize) -> Result<Padding> {
    match s.unwrap_or("same") {
        "same" => Ok(Padding::Same),
        "valid" => Ok(Padding::Valid),
        other => Err(Error::Config(format!(
            "layer {position}: padding must be 'same' or 'valid', got '{other}'"
        ))),
    }
}

fn parse_activation(
    name: &str,
    a: Option<f64>,
    b: Option<f64>,
    lambda: Option<f64>,
    position: usize,
) -> Result<ActivationKind> {
    let coeffs = PolyCoeffs::new(a.unwrap_or(0.0), b.unwrap_or(1.0));
    match name {
        "relu" => Ok(ActivationKind::Relu),
        "square" => Ok(ActivationKind::Square),
        "approx_relu" => Ok(ActivationKind::ApproxRelu),
        "trainable_poly" => Ok(ActivationKind::TrainablePoly { coeffs }),
        "weighted" => Ok(ActivationKind::Weighted {
            lambda: lambda.unwrap_or(0.0),
            coeffs,
        }),
        other => Err(Error::Config(format!(
            "layer {position}: unknown activation '{other}' \
             (relu | square | approx_relu | trainable_poly | weighted)"
        ))),
    }
}

// ── Coefficient initialization presets ──────────────────────────────

/// Named initializations for the trainable polynomial coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoeffPreset {
    /// `(a, b) = (0, 1)`: the polynomial starts as the identity.
    Identity,
    /// Scaled form `s1*0.0*x^2 + s2*1.1*x` with `(s1, s2) = (0.1, 0.1)`.
    Scaled01,
    /// Scaled form with `(s1, s2) = (0.01, 0.1)`.
    Scaled001,
}

impl CoeffPreset {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(CoeffPreset::Identity),
            "scaled_0.1_0.1" => Ok(CoeffPreset::Scaled01),
            "scaled_0.01_0.1" => Ok(CoeffPreset::Scaled001),
            other => Err(Error::Config(format!(
                "unknown coefficient preset '{other}' \
                 (identity | scaled_0.1_0.1 | scaled_0.01_0.1)"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CoeffPreset::Identity => "identity",
            CoeffPreset::Scaled01 => "scaled_0.1_0.1",
            CoeffPreset::Scaled001 => "scaled_0.01_0.1",
        }
    }

    /// The `(a, b)` pair this preset assigns to a fresh activation layer.
    pub fn coeffs(self) -> PolyCoeffs {
        match self {
            CoeffPreset::Identity => PolyCoeffs::new(0.0, 1.0),
            // In the scaled form the quadratic coefficient is 0.0 scaled by
            // s1, so both presets differ from each other only through s1.
            CoeffPreset::Scaled01 => PolyCoeffs::new(0.1 * 0.0, 0.1 * 1.1),
            CoeffPreset::Scaled001 => PolyCoeffs::new(0.01 * 0.0, 0.1 * 1.1),
        }
    }
}

// ── Train configs ───────────────────────────────────────────────────

fn default_seeds() -> Vec<u64> {
    vec![111, 222, 333, 444, 555]
}

fn default_epochs() -> u32 {
    30
}

fn default_batch() -> usize {
    32
}

fn default_lr() -> f64 {
    3e-4
}

fn default_tau() -> f64 {
    10.0
}

fn default_alpha() -> f64 {
    0.1
}

fn default_start_epoch() -> u32 {
    3
}

fn default_duration() -> u32 {
    10
}

fn default_preset() -> String {
    "identity".into()
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransitionConfig {
    #[serde(default = "default_start_epoch")]
    pub start_epoch: u32,
    #[serde(default = "default_duration")]
    pub duration: u32,
}

impl Default for TransitionConfig {
    fn default() -> Self {
        TransitionConfig {
            start_epoch: default_start_epoch(),
            duration: default_duration(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KdConfig {
    #[serde(default)]
    pub enabled: Option<bool>,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Path of the frozen teacher checkpoint; `{seed}` is substituted per run.
    #[serde(default)]
    pub teacher_checkpoint: Option<String>,
    /// Hold distillation off until the transition reaches lambda = 1.
    #[serde(default)]
    pub delay_until_transitioned: bool,
}

impl Default for KdConfig {
    fn default() -> Self {
        KdConfig {
            enabled: None,
            tau: default_tau(),
            alpha: default_alpha(),
            teacher_checkpoint: None,
            delay_until_transitioned: false,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitConfig {
    /// Trainable-coefficient preset; see [`CoeffPreset`].
    #[serde(default = "default_preset")]
    pub coeff_preset: String,
    /// Checkpoint to warm-start model weights from; `{seed}` is substituted.
    #[serde(default)]
    pub warm_start: Option<String>,
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig {
            coeff_preset: default_preset(),
            warm_start: None,
        }
    }
}

/// Parsed `train` configuration file.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Path of the model config, relative to this file.
    pub model: String,
    /// Ablation arm; may be overridden on the command line.
    #[serde(default)]
    pub arm: Option<String>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_epochs")]
    pub epochs: u32,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    /// Output root; overridden by `--out` or the HEFNET_OUT variable.
    #[serde(default)]
    pub out_dir: Option<String>,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub transition: TransitionConfig,
    #[serde(default)]
    pub kd: KdConfig,
    #[serde(default)]
    pub init: InitConfig,
    /// Not parsed from the file: directory the config was loaded from.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl TrainConfig {
    pub fn from_toml_str(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut cfg: TrainConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("train config: {e}")))?;
        cfg.base_dir = base_dir.into();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text =
            fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let base = path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .to_path_buf();
        Self::from_toml_str(&text, base)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        self.dataset.validate()?;
        CoeffPreset::parse(&self.init.coeff_preset)?;
        TransitionSchedule::new(self.transition.start_epoch, self.transition.duration)?;
        Ok(())
    }

    /// Model config path resolved against this config's directory.
    pub fn model_path(&self) -> PathBuf {
        let p = Path::new(&self.model);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn schedule(&self) -> TransitionSchedule {
        TransitionSchedule::new(self.transition.start_epoch, self.transition.duration)
            .expect("validated")
    }
}

/// Substitutes `{seed}` in checkpoint path templates.
pub fn substitute_seed(template: &str, seed: u64) -> String {
    template.replace("{seed}", &seed.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const SMALL: &str = r#"
name = "tiny"
input = [1, 8, 8]

[[layer]]
kind = "conv2d"
filters = 4
kernel = [3, 3]
activation = "relu"

[[layer]]
kind = "max_pool"
window = [2, 2]
stride = 2

[[layer]]
kind = "flatten"

[[layer]]
kind = "dense"
units = 3
"#;

    #[test]
    fn model_config_builds_with_inferred_shapes() {
        let spec = ModelSpec::from_toml_str(SMALL).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = spec.build(&mut rng).unwrap();
        assert_eq!(g.num_classes().unwrap(), 3);
        let names: Vec<&str> = g.layers().iter().map(|l| l.name.as_str()).collect();
        assert_eq!(names, vec!["conv1", "conv1_act", "pool1", "flat1", "fc1"]);
    }

    #[test]
    fn unknown_keys_are_rejected_with_context() {
        let bad = SMALL.replace("units = 3", "units = 3\nbranches = 2");
        match ModelSpec::from_toml_str(&bad) {
            Err(Error::Config(msg)) => assert!(msg.contains("branches"), "{msg}"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_kind_mentions_sequential_format() {
        let bad = SMALL.replace("kind = \"flatten\"", "kind = \"fire_module\"");
        match ModelSpec::from_toml_str(&bad).and_then(|s| {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            s.build(&mut rng)
        }) {
            Err(Error::Config(msg)) => {
                assert!(
                    msg.contains("fire_module") && msg.contains("sequential"),
                    "{msg}"
                )
            }
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn dense_before_flatten_is_an_error() {
        let bad = r#"
name = "bad"
input = [1, 4, 4]

[[layer]]
kind = "dense"
units = 3
"#;
        let spec = ModelSpec::from_toml_str(bad).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(spec.build(&mut rng).is_err());
    }

    #[test]
    fn build_is_deterministic_per_rng_seed() {
        let spec = ModelSpec::from_toml_str(SMALL).unwrap();
        let g1 = spec.build(&mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let g2 = spec.build(&mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(g1, g2);
        let g3 = spec.build(&mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        assert_ne!(g1, g3);
    }

    #[test]
    fn coeff_presets() {
        assert_eq!(CoeffPreset::parse("identity").unwrap().coeffs().b(), 1.0);
        let scaled = CoeffPreset::parse("scaled_0.1_0.1").unwrap().coeffs();
        assert_eq!(scaled.a(), 0.0);
        assert!((scaled.b() - 0.11).abs() < 1e-15);
        let scaled2 = CoeffPreset::parse("scaled_0.01_0.1").unwrap().coeffs();
        assert_eq!((scaled2.a(), scaled2.b()), (scaled.a(), scaled.b()));
        assert!(CoeffPreset::parse("bogus").is_err());
    }

    #[test]
    fn train_config_defaults_follow_the_documented_values() {
        let text = r#"
model = "m.toml"

[dataset]
name = "shapes"
train = 100
validation = 10
test = 10
classes = 3
image = [1, 8, 8]
"#;
        let cfg = TrainConfig::from_toml_str(text, ".").unwrap();
        assert_eq!(cfg.seeds, vec![111, 222, 333, 444, 555]);
        assert_eq!(cfg.batch_size, 32);
        assert_eq!(cfg.transition.start_epoch, 3);
        assert_eq!(cfg.transition.duration, 10);
        assert_eq!(cfg.kd.tau, 10.0);
        assert_eq!(cfg.kd.alpha, 0.1);
        assert_eq!(cfg.epochs, 30);
    }

    #[test]
    fn seed_substitution() {
        assert_eq!(
            substitute_seed("runs/base/seed{seed}.ckpt", 111),
            "runs/base/seed111.ckpt"
        );
    }
}
