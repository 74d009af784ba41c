//! Command-line entry point for generating synthetic data, training and
//! evaluating the coordinate-aware detector variants, checking gradients,
//! and running the three-way comparison.

mod compare;
mod report;
mod tasks;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use coordemb::coord_task::SplitKind;
use coordemb::gradcheck::{run_gradcheck, CheckModule, DEFAULT_SEED, TOLERANCE};
use coordemb::io::{write_detections_jsonl, DetectionRecord};
use coordemb::layers::Variant;
use coordemb::scenes::{apply_affine, AffineTransform};
use coordemb::ssd::detect_all;
use coordemb::ssd::evaluate_map;
use coordemb::training::{RmspropState, TrainConfig};

use report::{AffineEntry, ExperimentReport, VERSION};
use tasks::{
    gen_coord_data, gen_shapes_data, load_data, metrics_path, open_metrics, run_training, Task,
    TaskData, TaskModel,
};

#[derive(Parser)]
#[command(name = "coordemb", version = VERSION, about = "Coordinate-aware CNN experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    GenData(GenDataArgs),
    /// Train one variant on a dataset and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint, optionally under affine distortions.
    Eval(EvalArgs),
    /// Verify every differentiable operation against finite differences.
    Gradcheck(GradcheckArgs),
    /// Train and evaluate all three variants over several seeds.
    Compare(CompareArgs),
}

#[derive(clap::Args)]
struct GenDataArgs {
    #[arg(long, value_enum)]
    task: Task,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 16)]
    h: usize,
    #[arg(long, default_value_t = 16)]
    w: usize,
    /// Total scene count (shapes task).
    #[arg(long, default_value_t = 100)]
    n: usize,
    /// Train/test split rule (coord task).
    #[arg(long, default_value = "quadrant")]
    split: String,
    /// Probability that a small object is placed in the outer 20% margin.
    #[arg(long, default_value_t = 0.8)]
    edge_bias: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(clap::Args)]
struct TrainArgs {
    #[arg(long, value_enum)]
    task: Task,
    #[arg(long)]
    variant: Variant,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    /// Learning rate; defaults to the task's desk-scale value.
    #[arg(long)]
    lr: Option<f64>,
    /// Batch size; defaults to the task's desk-scale value.
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    ckpt: PathBuf,
    /// Metrics CSV path; defaults to metrics.csv next to the checkpoint.
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long, default_value_t = 500)]
    eval_every: usize,
}

#[derive(clap::Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Affine distortion "scale,shear,rot_deg,tx,ty"; repeatable.
    #[arg(long)]
    affine: Vec<String>,
    /// Report path; defaults to report.json next to the checkpoint.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Detection dump path (shapes task); defaults to detections.jsonl next
    /// to the checkpoint.
    #[arg(long)]
    detections: Option<PathBuf>,
}

#[derive(clap::Args)]
struct GradcheckArgs {
    #[arg(long, default_value = "all")]
    module: String,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    /// Deliberately corrupt one gradient to verify the suite fails.
    #[arg(long, hide = true)]
    inject_fault: bool,
}

#[derive(clap::Args)]
struct CompareArgs {
    #[arg(long, value_enum)]
    task: Task,
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated seed list.
    #[arg(long, default_value = "1,2,3")]
    seeds: String,
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    /// Parallel (variant, seed) runs.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long, default_value_t = 500)]
    eval_every: usize,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter("COORDEMB_LOG")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
        Command::Compare(args) => compare::cmd_compare(args),
    }
}

fn cmd_gen_data(args: GenDataArgs) -> Result<()> {
    match args.task {
        Task::Coord | Task::CoordReg => {
            let split: SplitKind = args.split.parse()?;
            let (n_train, n_test) = gen_coord_data(&args.out, args.h, args.w, split, args.seed)?;
            println!(
                "coord dataset: {} train + {} test ({}x{} {}, seed {}) -> {}",
                n_train,
                n_test,
                args.h,
                args.w,
                args.split,
                args.seed,
                args.out.display()
            );
        }
        Task::Shapes => {
            let (n_train, n_test) = gen_shapes_data(
                &args.out,
                args.h,
                args.w,
                args.n,
                args.edge_bias,
                args.seed,
            )?;
            println!(
                "shapes dataset: {} train + {} test ({}x{}, edge_bias {}, seed {}) -> {}",
                n_train,
                n_test,
                args.h,
                args.w,
                args.edge_bias,
                args.seed,
                args.out.display()
            );
        }
    }
    Ok(())
}

fn train_config(
    task: Task,
    steps: usize,
    lr: Option<f64>,
    batch: Option<usize>,
    seed: u64,
    eval_every: usize,
    variant: Variant,
) -> TrainConfig {
    TrainConfig {
        learning_rate: lr.unwrap_or_else(|| task.default_lr()),
        batch_size: batch.unwrap_or_else(|| task.default_batch()),
        steps,
        seed,
        eval_every,
        variant,
        ..TrainConfig::default()
    }
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let data = load_data(args.task, &args.data)?;
    let (h, w) = data.dims();
    let cfg = train_config(
        args.task,
        args.steps,
        args.lr,
        args.batch,
        args.seed,
        args.eval_every,
        args.variant,
    );
    let mut model = TaskModel::build(args.task, args.variant, h, w, args.seed)?;

    if let Some(parent) = args.ckpt.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let metrics_file = metrics_path(&args.ckpt, args.metrics.as_deref());
    let mut csv = open_metrics(&metrics_file)?;
    let run = run_training(&mut model, &data, &cfg, &mut csv)?;
    csv.flush()?;

    let state = fresh_state(&model);
    model.save(&args.ckpt, &state, cfg.steps as u64, cfg.config_hash())?;

    let metric_line = run
        .metrics
        .iter()
        .map(|(k, v)| format!("{k}={v:.4}"))
        .collect::<Vec<_>>()
        .join(" ");
    println!(
        "trained {} {} for {} steps (loss {:.4} -> {:.4}); {metric_line}; ckpt {}",
        args.task.as_str(),
        args.variant.as_str(),
        cfg.steps,
        run.first_loss,
        run.final_loss,
        args.ckpt.display()
    );
    Ok(())
}

fn fresh_state(model: &TaskModel) -> RmspropState {
    match model {
        TaskModel::Coord { model, .. } | TaskModel::CoordReg { model, .. } => {
            RmspropState::new(&coordemb::training::ParamModel::parameters(model))
        }
        TaskModel::Ssd(m) => RmspropState::new(&coordemb::training::ParamModel::parameters(m)),
    }
}

fn parse_affine(spec: &str, center: (f64, f64)) -> Result<AffineTransform> {
    let parts: Vec<f64> = spec
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .with_context(|| format!("parsing affine spec '{spec}'"))?;
    if parts.len() != 5 {
        bail!("affine spec '{spec}' needs 5 values: scale,shear,rot_deg,tx,ty");
    }
    Ok(AffineTransform::from_params(
        parts[0], parts[1], parts[2], parts[3], parts[4], center,
    ))
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let started = Instant::now();
    let (model, ckpt) = TaskModel::load(&args.ckpt)?;
    let task = model.task();
    let data = load_data(task, &args.data)?;
    let mut metrics = model.evaluate(&data)?;
    let mut affine_entries = std::collections::BTreeMap::new();

    if let TaskModel::Ssd(ssd) = &model {
        let TaskData::Shapes { test, h, w, .. } = &data else {
            bail!("shapes checkpoint requires a shapes dataset");
        };
        // Dump base detections for external consumers.
        let detections = detect_all(ssd, test)?;
        let records: Vec<DetectionRecord> = detections
            .iter()
            .enumerate()
            .map(|(i, d)| DetectionRecord::from_detections(i, d))
            .collect();
        let det_path = args.detections.clone().unwrap_or_else(|| {
            args.ckpt
                .parent()
                .unwrap_or_else(|| std::path::Path::new("."))
                .join("detections.jsonl")
        });
        write_detections_jsonl(&det_path, &records)?;

        let base_map = *metrics.get("map").expect("shapes eval produces map");
        let center = (*w as f64 / 2.0, *h as f64 / 2.0);
        for spec in &args.affine {
            let t = parse_affine(spec, center)?;
            let warped: Vec<_> = test
                .iter()
                .map(|s| apply_affine(s, &t))
                .collect::<coordemb::Result<_>>()?;
            let report = evaluate_map(ssd, &warped)?;
            metrics.insert(format!("map_affine[{spec}]"), report.map);
            affine_entries.insert(
                spec.clone(),
                AffineEntry {
                    params: spec.clone(),
                    map: report.map,
                    delta_vs_base: report.map - base_map,
                },
            );
        }
    } else if !args.affine.is_empty() {
        bail!("--affine applies only to shapes checkpoints");
    }

    let report = ExperimentReport {
        version: VERSION.to_string(),
        task: task.as_str().to_string(),
        variant: model.variant().as_str().to_string(),
        config_hash: ckpt.config_hash,
        checkpoint: args.ckpt.display().to_string(),
        data: args.data.display().to_string(),
        step: ckpt.step,
        metrics: metrics.clone(),
        affine: affine_entries,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    };
    let out_path = args.out.clone().unwrap_or_else(|| {
        args.ckpt
            .parent()
            .unwrap_or_else(|| std::path::Path::new("."))
            .join("report.json")
    });
    std::fs::write(&out_path, serde_json::to_string_pretty(&report)?)?;

    println!(
        "evaluation of {} ({} at step {}):",
        args.ckpt.display(),
        report.variant,
        report.step
    );
    for (name, value) in &metrics {
        println!("  {name:<28} {value:.6}");
    }
    for (key, entry) in &report.affine {
        println!(
            "  affine {key:<21} map {:.6} (delta {:+.6})",
            entry.map, entry.delta_vs_base
        );
    }
    println!("report -> {}", out_path.display());
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<()> {
    let module = match args.module.as_str() {
        "all" => CheckModule::All,
        "layers" => CheckModule::Layers,
        "detector" => CheckModule::Detector,
        other => bail!("unknown module '{other}' (expected all, layers, detector)"),
    };
    let reports = run_gradcheck(module, args.seed, args.inject_fault);
    println!(
        "{:<32} {:>14} {:>8}   (tolerance {TOLERANCE:.0e}, seed {})",
        "operation", "worst rel err", "status", args.seed
    );
    let mut all_passed = true;
    for r in &reports {
        println!(
            "{:<32} {:>14.3e} {:>8}",
            r.op,
            r.worst_rel_err,
            if r.passed { "pass" } else { "FAIL" }
        );
        all_passed &= r.passed;
    }
    if !all_passed {
        bail!("gradient check failed");
    }
    Ok(())
}
