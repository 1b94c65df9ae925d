//! Evaluation metrics (accuracy, per-class and macro F1), seed-sweep
//! aggregation, and CSV export.

use std::fs;
use std::path::Path;

use crate::data::Split;
use crate::error::{Error, Result};
use crate::graph::{Mode, ModelGraph};

/// Scores of one model on one labeled split.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalMetrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class_f1: Vec<f64>,
    /// `confusion[actual][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

/// Argmax class per row; ties resolve to the lowest index.
pub fn predictions(logits: &crate::tensor::Tensor) -> Result<Vec<usize>> {
    let s = logits.shape();
    if s.len() != 2 {
        return Err(Error::Dim(format!(
            "predictions expect [batch, classes], got {s:?}"
        )));
    }
    let (batch, classes) = (s[0], s[1]);
    let mut out = Vec::with_capacity(batch);
    for i in 0..batch {
        let row = &logits.data()[i * classes..(i + 1) * classes];
        let mut best = 0;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        out.push(best);
    }
    Ok(out)
}

/// Builds the confusion matrix and derives accuracy and F1 scores.
///
/// Per one-vs-rest convention, a class with an empty precision or recall
/// denominator scores 0, so a class with zero predicted and zero actual
/// positives has F1 = 0.
pub fn scores_from_predictions(
    predicted: &[usize],
    actual: &[usize],
    classes: usize,
) -> Result<EvalMetrics> {
    if predicted.len() != actual.len() {
        return Err(Error::Data(format!(
            "{} predictions for {} labels",
            predicted.len(),
            actual.len()
        )));
    }
    if predicted.is_empty() {
        return Err(Error::Contract(
            "cannot score an empty evaluation set".into(),
        ));
    }
    let mut confusion = vec![vec![0usize; classes]; classes];
    let mut correct = 0usize;
    for (&p, &a) in predicted.iter().zip(actual) {
        if p >= classes || a >= classes {
            return Err(Error::Data(format!(
                "class index out of range: pred {p}, actual {a}"
            )));
        }
        confusion[a][p] += 1;
        if p == a {
            correct += 1;
        }
    }
    let mut per_class_f1 = Vec::with_capacity(classes);
    for c in 0..classes {
        let tp = confusion[c][c];
        let fp: usize = (0..classes)
            .filter(|&r| r != c)
            .map(|r| confusion[r][c])
            .sum();
        let fn_: usize = (0..classes)
            .filter(|&k| k != c)
            .map(|k| confusion[c][k])
            .sum();
        let precision = if tp + fp > 0 {
            tp as f64 / (tp + fp) as f64
        } else {
            0.0
        };
        let recall = if tp + fn_ > 0 {
            tp as f64 / (tp + fn_) as f64
        } else {
            0.0
        };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        per_class_f1.push(f1);
    }
    let macro_f1 = per_class_f1.iter().sum::<f64>() / classes as f64;
    Ok(EvalMetrics {
        accuracy: correct as f64 / predicted.len() as f64,
        macro_f1,
        per_class_f1,
        confusion,
    })
}

/// Runs the model over a split in batches and scores the predictions.
/// The model must be in eval mode.
pub fn evaluate(graph: &ModelGraph, split: &Split, batch_size: usize) -> Result<EvalMetrics> {
    if graph.mode() != Mode::Eval {
        return Err(Error::Contract(
            "evaluate requires the model in eval mode".into(),
        ));
    }
    if split.is_empty() {
        return Err(Error::Contract("cannot evaluate on an empty split".into()));
    }
    let classes = graph.num_classes()?;
    let bs = batch_size.max(1);
    let mut predicted = Vec::with_capacity(split.len());
    let indices: Vec<usize> = (0..split.len()).collect();
    for chunk in indices.chunks(bs) {
        let (x, _) = split.batch(chunk)?;
        let logits = graph.forward_infer(&x)?;
        predicted.extend(predictions(&logits)?);
    }
    scores_from_predictions(&predicted, &split.labels, classes)
}

// ── Run records ─────────────────────────────────────────────────────

/// Per-epoch training trace entry.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRow {
    pub epoch: u32,
    pub lambda: f64,
    pub train_loss: f64,
    pub val_accuracy: f64,
}

/// Terminal state of one training run.
#[derive(Debug, Clone, PartialEq)]
pub enum RunOutcome {
    Completed {
        test_accuracy: f64,
        macro_f1: f64,
        per_class_f1: Vec<f64>,
    },
    /// Loss became non-finite at this epoch; the run is kept, never dropped.
    Diverged { epoch: u32 },
}

/// Everything recorded about one `(arm, seed)` training run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub arm: String,
    pub seed: u64,
    pub epochs: Vec<EpochRow>,
    pub outcome: RunOutcome,
}

impl RunRecord {
    pub fn completed(&self) -> bool {
        matches!(self.outcome, RunOutcome::Completed { .. })
    }
}

/// Mean and sample standard deviation over the completed runs of one arm.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRecord {
    pub arm: String,
    pub completed: usize,
    pub failed: usize,
    /// `None` when every run failed: the aggregate itself is failed.
    pub stats: Option<AggregateStats>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateStats {
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub mean_macro_f1: f64,
    pub std_macro_f1: f64,
}

fn mean_and_sample_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Aggregates a seed sweep. Failed runs are counted, never silently dropped;
/// statistics cover completed runs only.
pub fn seed_sweep_aggregate(records: &[RunRecord]) -> Result<AggregateRecord> {
    let Some(first) = records.first() else {
        return Err(Error::Contract(
            "aggregate needs at least one run record".into(),
        ));
    };
    if records.iter().any(|r| r.arm != first.arm) {
        return Err(Error::Contract(
            "aggregate mixes records from different arms".into(),
        ));
    }
    let mut accs = Vec::new();
    let mut f1s = Vec::new();
    let mut failed = 0usize;
    for r in records {
        match &r.outcome {
            RunOutcome::Completed {
                test_accuracy,
                macro_f1,
                ..
            } => {
                accs.push(*test_accuracy);
                f1s.push(*macro_f1);
            }
            RunOutcome::Diverged { .. } => failed += 1,
        }
    }
    let stats = if accs.is_empty() {
        None
    } else {
        let (mean_accuracy, std_accuracy) = mean_and_sample_std(&accs);
        let (mean_macro_f1, std_macro_f1) = mean_and_sample_std(&f1s);
        Some(AggregateStats {
            mean_accuracy,
            std_accuracy,
            mean_macro_f1,
            std_macro_f1,
        })
    };
    Ok(AggregateRecord {
        arm: first.arm.clone(),
        completed: accs.len(),
        failed,
        stats,
    })
}

// ── CSV export ──────────────────────────────────────────────────────

pub const CSV_HEADER: &str = "arm,seed,epoch,lambda,train_loss,val_acc,test_acc,macro_f1,status";

/// Renders records and an optional aggregate in the fixed column order
/// `arm,seed,epoch,lambda,train_loss,val_acc,test_acc,macro_f1` plus a
/// trailing status column:
///
/// * one row per training epoch (test columns empty),
/// * one `final` row per seed carrying test accuracy and macro-F1,
/// * `mean` and `std` rows for the aggregate.
pub fn metrics_csv(records: &[RunRecord], aggregate: Option<&AggregateRecord>) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        for e in &r.epochs {
            out.push_str(&format!(
                "{},{},{},{},{},{},,,ok\n",
                r.arm, r.seed, e.epoch, e.lambda, e.train_loss, e.val_accuracy
            ));
        }
        match &r.outcome {
            RunOutcome::Completed {
                test_accuracy,
                macro_f1,
                ..
            } => {
                let (lambda, loss, val) = r
                    .epochs
                    .last()
                    .map(|e| (e.lambda, e.train_loss, e.val_accuracy))
                    .unwrap_or((0.0, f64::NAN, f64::NAN));
                out.push_str(&format!(
                    "{},{},final,{},{},{},{},{},ok\n",
                    r.arm, r.seed, lambda, loss, val, test_accuracy, macro_f1
                ));
            }
            RunOutcome::Diverged { epoch } => {
                out.push_str(&format!("{},{},final,,,,,,failed@{epoch}\n", r.arm, r.seed));
            }
        }
    }
    if let Some(agg) = aggregate {
        let status = format!("completed={};failed={}", agg.completed, agg.failed);
        match &agg.stats {
            Some(s) => {
                out.push_str(&format!(
                    "{},mean,,,,,{},{},{status}\n",
                    agg.arm, s.mean_accuracy, s.mean_macro_f1
                ));
                out.push_str(&format!(
                    "{},std,,,,,{},{},{status}\n",
                    agg.arm, s.std_accuracy, s.std_macro_f1
                ));
            }
            None => {
                out.push_str(&format!("{},mean,,,,,,,failed;{status}\n", agg.arm));
            }
        }
    }
    out
}

/// Writes the CSV to disk, creating parent directories.
pub fn export_metrics(
    records: &[RunRecord],
    aggregate: Option<&AggregateRecord>,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        }
    }
    fs::write(path, metrics_csv(records, aggregate))
        .map_err(|e| Error::io(path.display().to_string(), e))
}
