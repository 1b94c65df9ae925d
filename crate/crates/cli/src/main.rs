//! `hefnet`: train HE-friendly networks and audit model graphs.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use hefnet_core::checkpoint;
use hefnet_core::config::{ModelSpec, TrainConfig};
use hefnet_core::data::{load_dataset, DatasetSpec};
use hefnet_core::depth::{he_lint, multiplicative_depth, DepthConvention};
use hefnet_core::error::{Error, Result};
use hefnet_core::graph::ModelGraph;
use hefnet_core::metrics::evaluate;
use hefnet_core::passes::{finalize_he_friendly, fold_batch_norm};
use hefnet_core::train::run_experiment;

#[derive(Parser)]
#[command(
    name = "hefnet",
    version,
    about = "Train and audit HE-friendly neural networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one ablation arm across its seed sweep.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Render an accuracy/F1 comparison table from exported metrics.
    Report(ReportArgs),
    /// List HE-friendliness violations of a model config or checkpoint.
    ///
    /// Prints one violation per line on stdout; a clean graph prints nothing.
    Lint(GraphArgs),
    /// Multiplicative-depth accounting with a per-node table.
    Depth(DepthArgs),
    /// Fold batch-norm layers into the following conv/dense weights.
    Fold(RewriteArgs),
    /// Rewrite a fully transitioned checkpoint into its HE-evaluable form.
    Finalize(RewriteArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Train-config TOML path.
    #[arg(long)]
    config: PathBuf,
    /// Override the configured arm.
    #[arg(long)]
    arm: Option<String>,
    /// Override the configured seed list.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    seeds: Option<Vec<u64>>,
    /// Output root (default: HEFNET_OUT, then the config's out_dir, then ./runs).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint to score.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset spec TOML (top-level DatasetSpec fields).
    #[arg(long)]
    dataset: PathBuf,
    /// Seed for dataset materialization.
    #[arg(long, default_value_t = 111)]
    seed: u64,
    /// Split to score: train | validation | test.
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory holding per-arm subdirectories with metrics.csv files.
    #[arg(long = "in")]
    input: PathBuf,
}

#[derive(Args)]
struct GraphArgs {
    /// Model config (.toml) or checkpoint file.
    model: PathBuf,
}

#[derive(Args)]
struct DepthArgs {
    /// Model config (.toml) or checkpoint file.
    model: PathBuf,
    /// TOML file overriding per-kind depth costs.
    #[arg(long)]
    convention: Option<PathBuf>,
}

#[derive(Args)]
struct RewriteArgs {
    /// Input checkpoint.
    input: PathBuf,
    /// Output checkpoint.
    #[arg(short, long)]
    out: PathBuf,
}

/// Loads either a checkpoint or a model config; configs get zero-backed
/// weights, since static analysis does not depend on the values.
fn load_graph(path: &Path) -> Result<ModelGraph> {
    if path.extension().is_some_and(|e| e == "toml") {
        ModelSpec::load(path)?.build_for_analysis()
    } else {
        checkpoint::load(path)
    }
}

fn out_root(cli: Option<PathBuf>, cfg: Option<&str>) -> PathBuf {
    if let Some(o) = cli {
        return o;
    }
    if let Ok(env) = std::env::var("HEFNET_OUT") {
        if !env.is_empty() {
            return PathBuf::from(env);
        }
    }
    cfg.map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn cmd_train(args: TrainArgs) -> Result<ExitCode> {
    let mut cfg = TrainConfig::load(&args.config)?;
    if let Some(arm) = args.arm {
        cfg.arm = Some(arm);
    }
    if let Some(seeds) = args.seeds {
        cfg.seeds = seeds;
    }
    cfg.validate()?;
    let out = out_root(args.out, cfg.out_dir.as_deref());
    cfg.out_dir = Some(out.display().to_string());
    eprintln!(
        "transition: start_epoch={} duration={} (per-epoch lambda is logged in metrics.csv)",
        cfg.transition.start_epoch, cfg.transition.duration
    );
    let result = run_experiment(&cfg)?;
    for record in &result.records {
        match &record.outcome {
            hefnet_core::metrics::RunOutcome::Completed {
                test_accuracy,
                macro_f1,
                ..
            } => {
                println!(
                    "{} seed {}: test accuracy {:.4}, macro-F1 {:.4}",
                    record.arm, record.seed, test_accuracy, macro_f1
                );
            }
            hefnet_core::metrics::RunOutcome::Diverged { epoch } => {
                println!(
                    "{} seed {}: FAILED (diverged at epoch {epoch})",
                    record.arm, record.seed
                );
            }
        }
    }
    if let Some(stats) = &result.aggregate.stats {
        println!(
            "{}: accuracy {:.4} ± {:.4}, macro-F1 {:.4} ± {:.4} ({} completed, {} failed)",
            result.arm.as_str(),
            stats.mean_accuracy,
            stats.std_accuracy,
            stats.mean_macro_f1,
            stats.std_macro_f1,
            result.aggregate.completed,
            result.aggregate.failed,
        );
    } else {
        println!(
            "{}: all {} runs failed",
            result.arm.as_str(),
            result.aggregate.failed
        );
    }
    if let Some(p) = &result.metrics_path {
        eprintln!("metrics written to {}", p.display());
    }
    Ok(if result.any_failed() {
        ExitCode::from(1)
    } else {
        ExitCode::SUCCESS
    })
}

fn cmd_eval(args: EvalArgs) -> Result<ExitCode> {
    let graph = checkpoint::load(&args.checkpoint)?;
    let text = std::fs::read_to_string(&args.dataset)
        .map_err(|e| Error::io(args.dataset.display().to_string(), e))?;
    let spec: DatasetSpec =
        toml::from_str(&text).map_err(|e| Error::Config(format!("dataset spec: {e}")))?;
    let data = load_dataset(&spec, args.seed)?;
    let split = match args.split.as_str() {
        "train" => &data.train,
        "validation" => &data.validation,
        "test" => &data.test,
        other => {
            return Err(Error::Config(format!(
                "unknown split '{other}' (train | validation | test)"
            )))
        }
    };
    let metrics = evaluate(&graph, split, args.batch_size)?;
    println!("accuracy {}", metrics.accuracy);
    println!("macro_f1 {}", metrics.macro_f1);
    for (c, f1) in metrics.per_class_f1.iter().enumerate() {
        println!("class_{c}_f1 {f1}");
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_report(args: ReportArgs) -> Result<ExitCode> {
    let mut rows: Vec<(String, String, String, String)> = Vec::new();
    let entries = std::fs::read_dir(&args.input)
        .map_err(|e| Error::io(args.input.display().to_string(), e))?;
    let mut dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    for dir in dirs {
        let csv = dir.join("metrics.csv");
        if !csv.exists() {
            continue;
        }
        let text =
            std::fs::read_to_string(&csv).map_err(|e| Error::io(csv.display().to_string(), e))?;
        let mut mean: Option<(String, String, String)> = None;
        let mut std: Option<(String, String)> = None;
        for line in text.lines() {
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() < 9 {
                continue;
            }
            if cols[1] == "mean" {
                mean = Some((
                    cols[0].to_string(),
                    cols[6].to_string(),
                    cols[7].to_string(),
                ));
            } else if cols[1] == "std" {
                std = Some((cols[6].to_string(), cols[7].to_string()));
            }
        }
        if let Some((arm, acc, f1)) = mean {
            let (acc_std, f1_std) = std.unwrap_or_default();
            let fmt = |v: &str, s: &str| match (v.parse::<f64>(), s.parse::<f64>()) {
                (Ok(v), Ok(s)) => format!("{v:.3} ± {s:.3}"),
                (Ok(v), Err(_)) => format!("{v:.3}"),
                _ => "failed".to_string(),
            };
            rows.push((arm, fmt(&acc, &acc_std), fmt(&f1, &f1_std), String::new()));
        }
    }
    if rows.is_empty() {
        println!("no metrics.csv files under {}", args.input.display());
        return Ok(ExitCode::from(1));
    }
    let w = rows.iter().map(|r| r.0.len()).max().unwrap_or(9).max(9);
    println!(
        "{:<w$}  {:<16}  {:<16}",
        "technique", "accuracy", "macro-F1"
    );
    for (arm, acc, f1, _) in rows {
        println!("{arm:<w$}  {acc:<16}  {f1:<16}");
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_lint(args: GraphArgs) -> Result<ExitCode> {
    let graph = load_graph(&args.model)?;
    let violations = he_lint(&graph);
    if violations.is_empty() {
        eprintln!("{}: no violations", graph.name);
        Ok(ExitCode::SUCCESS)
    } else {
        for v in &violations {
            println!("{v}");
        }
        Ok(ExitCode::from(1))
    }
}

fn cmd_depth(args: DepthArgs) -> Result<ExitCode> {
    let graph = load_graph(&args.model)?;
    let convention = match args.convention {
        Some(path) => {
            let text = std::fs::read_to_string(&path)
                .map_err(|e| Error::io(path.display().to_string(), e))?;
            DepthConvention::from_toml_str(&text)?
        }
        None => DepthConvention::default(),
    };
    print!("{}", multiplicative_depth(&graph, &convention));
    Ok(ExitCode::SUCCESS)
}

fn cmd_fold(args: RewriteArgs) -> Result<ExitCode> {
    let graph = checkpoint::load(&args.input)?;
    let folded = fold_batch_norm(&graph)?;
    checkpoint::save(&folded, &args.out)?;
    eprintln!("folded checkpoint written to {}", args.out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_finalize(args: RewriteArgs) -> Result<ExitCode> {
    let graph = checkpoint::load(&args.input)?;
    let finalized = finalize_he_friendly(&graph)?;
    checkpoint::save(&finalized, &args.out)?;
    eprintln!("finalized checkpoint written to {}", args.out.display());
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Report(args) => cmd_report(args),
        Command::Lint(args) => cmd_lint(args),
        Command::Depth(args) => cmd_depth(args),
        Command::Fold(args) => cmd_fold(args),
        Command::Finalize(args) => cmd_finalize(args),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
