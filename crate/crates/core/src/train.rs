//! Configuration-driven training: one run per `(arm, seed)` pair, with the
//! activation-replacement policy, optional distillation, metrics, and
//! checkpoints.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::activation::ActivationKind;
use crate::checkpoint;
use crate::config::{substitute_seed, CoeffPreset, ModelSpec, TrainConfig};
use crate::data::{augment_batch, load_dataset, LoadedDataset};
use crate::distill::{cross_entropy_on_tape, kd_loss_on_tape, KdParams, TeacherHandle};
use crate::error::{Error, Result};
use crate::graph::{LayerKind, Mode, ModelGraph};
use crate::metrics::{
    evaluate, export_metrics, seed_sweep_aggregate, AggregateRecord, EpochRow, RunOutcome,
    RunRecord,
};
use crate::optim::{Adam, AdamConfig};
use crate::passes::replace_maxpool_with_avgpool;
use crate::schedule::{apply_transition, lambda_at_epoch, TransitionSchedule};
use crate::tape::Tape;

/// Ablation arms. The arm decides pooling, the activation-replacement
/// policy, and whether distillation is active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arm {
    BaselineReluMaxpool,
    BaselineReluAvgpool,
    Square,
    ApproxRelu,
    Tp,
    TpSt,
    TpStKd,
}

impl Arm {
    pub const ALL: [Arm; 7] = [
        Arm::BaselineReluMaxpool,
        Arm::BaselineReluAvgpool,
        Arm::Square,
        Arm::ApproxRelu,
        Arm::Tp,
        Arm::TpSt,
        Arm::TpStKd,
    ];

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "baseline_relu_maxpool" => Ok(Arm::BaselineReluMaxpool),
            "baseline_relu_avgpool" => Ok(Arm::BaselineReluAvgpool),
            "square" => Ok(Arm::Square),
            "approx_relu" => Ok(Arm::ApproxRelu),
            "tp" => Ok(Arm::Tp),
            "tp_st" => Ok(Arm::TpSt),
            "tp_st_kd" => Ok(Arm::TpStKd),
            other => Err(Error::Config(format!(
                "unknown arm '{other}' (baseline_relu_maxpool | baseline_relu_avgpool | \
                 square | approx_relu | tp | tp_st | tp_st_kd)"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Arm::BaselineReluMaxpool => "baseline_relu_maxpool",
            Arm::BaselineReluAvgpool => "baseline_relu_avgpool",
            Arm::Square => "square",
            Arm::ApproxRelu => "approx_relu",
            Arm::Tp => "tp",
            Arm::TpSt => "tp_st",
            Arm::TpStKd => "tp_st_kd",
        }
    }

    pub fn uses_kd(self) -> bool {
        self == Arm::TpStKd
    }

    fn keeps_maxpool(self) -> bool {
        self == Arm::BaselineReluMaxpool
    }
}

/// Blend weight for this arm at this epoch. Baselines never leave 0; arms
/// without smooth transition step from 0 to 1 at `start_epoch` (all
/// activations replaced at once); ST arms follow the piecewise ramp.
pub fn lambda_for(arm: Arm, schedule: TransitionSchedule, epoch: u32) -> f64 {
    match arm {
        Arm::BaselineReluMaxpool | Arm::BaselineReluAvgpool => 0.0,
        Arm::Square | Arm::ApproxRelu | Arm::Tp => {
            if epoch < schedule.start_epoch {
                0.0
            } else {
                1.0
            }
        }
        Arm::TpSt | Arm::TpStKd => lambda_at_epoch(schedule, epoch),
    }
}

/// Everything one training run needs, already resolved.
pub struct ResolvedRun {
    pub arm: Arm,
    pub seed: u64,
    pub model: ModelSpec,
    pub dataset: crate::data::DatasetSpec,
    pub epochs: u32,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub schedule: TransitionSchedule,
    pub preset: CoeffPreset,
    pub kd: Option<(KdParams, TeacherHandle)>,
    pub kd_delay_until_transitioned: bool,
    pub warm_start: Option<ModelGraph>,
}

fn swap_relu_activations(model: &mut ModelGraph, target: ActivationKind) {
    for l in model.layers_mut() {
        if matches!(l.kind, LayerKind::Activation(ActivationKind::Relu)) {
            l.kind = LayerKind::Activation(target.clone());
        }
    }
}

/// Trains one `(arm, seed)` run. Returns the record and, for completed runs,
/// the final model in eval mode. Non-finite losses or gradients mark the run
/// as diverged at the failing epoch rather than erroring out.
pub fn train_single(run: &ResolvedRun) -> Result<(RunRecord, Option<ModelGraph>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
    let data: LoadedDataset = load_dataset(&run.dataset, run.seed)?;
    let mut model = run.model.build(&mut rng)?;
    if !run.arm.keeps_maxpool() {
        model = replace_maxpool_with_avgpool(&model)?.0;
    }
    if let Some(source) = &run.warm_start {
        model.copy_matching_tensors(source);
    }
    model.set_mode(Mode::Train);

    let mut adam = Adam::new();
    let mut epochs = Vec::with_capacity(run.epochs as usize);
    let mut diverged_at: Option<u32> = None;
    let mut swapped = false;

    'training: for epoch in 0..run.epochs {
        let lambda = lambda_for(run.arm, run.schedule, epoch);
        match run.arm {
            Arm::Tp | Arm::TpSt | Arm::TpStKd => {
                let preset = run.preset;
                model = apply_transition(&model, lambda, || preset.coeffs())?.0;
            }
            Arm::Square | Arm::ApproxRelu if lambda >= 1.0 && !swapped => {
                let target = if run.arm == Arm::Square {
                    ActivationKind::Square
                } else {
                    ActivationKind::ApproxRelu
                };
                swap_relu_activations(&mut model, target);
                swapped = true;
            }
            _ => {}
        }

        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batch_count = 0usize;
        for chunk in order.chunks(run.batch_size) {
            let (mut x, labels) = data.train.batch(chunk)?;
            augment_batch(&mut x, &data.spec, &mut rng)?;
            let mut tape = Tape::new();
            let pass = model.forward_on_tape(&mut tape, &x, Some(&mut rng))?;
            let kd_active = run.kd.is_some() && (!run.kd_delay_until_transitioned || lambda >= 1.0);
            let loss_id = if kd_active {
                let (params, teacher) = run.kd.as_ref().expect("kd_active checked");
                let teacher_logits = teacher.logits(&x)?;
                kd_loss_on_tape(&mut tape, pass.output, &teacher_logits, &labels, *params)?
            } else {
                cross_entropy_on_tape(&mut tape, pass.output, &labels)?
            };
            let loss = tape.value(loss_id).item()?;
            if !loss.is_finite() {
                diverged_at = Some(epoch);
                break 'training;
            }
            let mut grads = match tape.backward(loss_id) {
                Ok(g) => g,
                Err(Error::Numeric { .. }) => {
                    diverged_at = Some(epoch);
                    break 'training;
                }
                Err(e) => return Err(e),
            };
            model.store_gradients(&pass.bindings, &mut grads)?;
            let mut params = model.trainable_params_mut();
            adam.step(
                &run.adam,
                params.iter_mut().map(|(n, t)| (n.as_str(), &mut **t)),
            )?;
            drop(params);
            model.update_running_stats(&pass.bn_stats)?;
            loss_sum += loss;
            batch_count += 1;
        }

        let val_accuracy = if data.validation.is_empty() {
            f64::NAN
        } else {
            model.set_mode(Mode::Eval);
            let val = evaluate(&model, &data.validation, run.batch_size)?;
            model.set_mode(Mode::Train);
            val.accuracy
        };
        epochs.push(EpochRow {
            epoch,
            lambda,
            train_loss: loss_sum / batch_count.max(1) as f64,
            val_accuracy,
        });
    }

    let arm_name = run.arm.as_str().to_string();
    if let Some(epoch) = diverged_at {
        return Ok((
            RunRecord {
                arm: arm_name,
                seed: run.seed,
                epochs,
                outcome: RunOutcome::Diverged { epoch },
            },
            None,
        ));
    }
    model.set_mode(Mode::Eval);
    let test = evaluate(&model, &data.test, run.batch_size)?;
    let record = RunRecord {
        arm: arm_name,
        seed: run.seed,
        epochs,
        outcome: RunOutcome::Completed {
            test_accuracy: test.accuracy,
            macro_f1: test.macro_f1,
            per_class_f1: test.per_class_f1,
        },
    };
    Ok((record, Some(model)))
}

/// Result of a full seed sweep for one arm.
pub struct ExperimentResult {
    pub arm: Arm,
    pub records: Vec<RunRecord>,
    pub aggregate: AggregateRecord,
    /// Checkpoints written for completed runs, when an output dir was set.
    pub checkpoints: Vec<PathBuf>,
    /// Metrics CSV path, when an output dir was set.
    pub metrics_path: Option<PathBuf>,
}

impl ExperimentResult {
    pub fn any_failed(&self) -> bool {
        self.aggregate.failed > 0
    }
}

fn load_checkpoint_for(role: &str, template: &str, seed: u64) -> Result<ModelGraph> {
    let path = substitute_seed(template, seed);
    if !Path::new(&path).exists() {
        return Err(Error::Config(format!(
            "{role} checkpoint '{path}' not found"
        )));
    }
    checkpoint::load(&path)
}

/// Runs every seed of `cfg` under its configured arm, writing checkpoints
/// and a metrics CSV under `<out_dir>/<arm>/` when an output dir is set.
pub fn run_experiment(cfg: &TrainConfig) -> Result<ExperimentResult> {
    let arm = Arm::parse(cfg.arm.as_deref().ok_or_else(|| {
        Error::Config("no arm selected; set 'arm' in the config or pass --arm".into())
    })?)?;
    match (arm.uses_kd(), cfg.kd.enabled) {
        (true, Some(false)) => {
            return Err(Error::Config(
                "arm tp_st_kd requires kd.enabled = true".into(),
            ))
        }
        (false, Some(true)) => {
            return Err(Error::Config(format!(
                "kd.enabled = true only makes sense with arm tp_st_kd, not {}",
                arm.as_str()
            )))
        }
        _ => {}
    }
    if arm.uses_kd() && cfg.kd.teacher_checkpoint.is_none() {
        return Err(Error::Config(
            "arm tp_st_kd needs kd.teacher_checkpoint (use {seed} for per-seed teachers)".into(),
        ));
    }
    let model = ModelSpec::load(cfg.model_path())?;
    let kd_params = KdParams::new(cfg.kd.tau, cfg.kd.alpha)?;
    let out_dir = cfg
        .out_dir
        .as_ref()
        .map(|d| Path::new(d).join(arm.as_str()));

    let mut records = Vec::with_capacity(cfg.seeds.len());
    let mut checkpoints = Vec::new();
    for &seed in &cfg.seeds {
        let kd = if arm.uses_kd() {
            let template = cfg.kd.teacher_checkpoint.as_deref().expect("checked above");
            let teacher = TeacherHandle::new(load_checkpoint_for("teacher", template, seed)?);
            Some((kd_params, teacher))
        } else {
            None
        };
        let warm_start = cfg
            .init
            .warm_start
            .as_deref()
            .map(|t| load_checkpoint_for("warm-start", t, seed))
            .transpose()?;
        let run = ResolvedRun {
            arm,
            seed,
            model: model.clone(),
            dataset: cfg.dataset.clone(),
            epochs: cfg.epochs,
            batch_size: cfg.batch_size,
            adam: AdamConfig::new(cfg.lr)?,
            schedule: cfg.schedule(),
            preset: CoeffPreset::parse(&cfg.init.coeff_preset)?,
            kd,
            kd_delay_until_transitioned: cfg.kd.delay_until_transitioned,
            warm_start,
        };
        let (record, trained) = train_single(&run)?;
        if let (Some(model), Some(dir)) = (trained, out_dir.as_ref()) {
            let path = dir.join(format!("seed{seed}.ckpt"));
            checkpoint::save(&model, &path)?;
            checkpoints.push(path);
        }
        records.push(record);
    }
    let aggregate = seed_sweep_aggregate(&records)?;
    let metrics_path = match out_dir.as_ref() {
        Some(dir) => {
            let path = dir.join("metrics.csv");
            export_metrics(&records, Some(&aggregate), &path)?;
            Some(path)
        }
        None => None,
    };
    Ok(ExperimentResult {
        arm,
        records,
        aggregate,
        checkpoints,
        metrics_path,
    })
}
