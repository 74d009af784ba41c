//! Three-way comparison: trains vanilla, coordemb, and coordconv on the
//! same data with shared seeds, evaluates (including per-size-tier and
//! affine-robustness numbers for the detection task), and emits CSV + JSON.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use rayon::prelude::*;

use coordemb::layers::Variant;
use coordemb::scenes::apply_affine;
use coordemb::ssd::evaluate_map;

use crate::report::{aggregate, AffineEntry, CompareReport, CompareRun, MetricDelta, VERSION};
use crate::tasks::{load_data, open_metrics, run_training, Task, TaskData, TaskModel, TeeSink};
use crate::{parse_affine, train_config, CompareArgs};

/// Distortion sweep applied to shapes comparisons.
const AFFINE_SWEEP: [(&str, &str); 3] = [
    ("mild", "1,0.1,5,2,1"),
    ("medium", "1,0.2,15,0,0"),
    ("strong", "0.9,0.3,25,4,2"),
];

fn headline_metric(task: Task) -> &'static str {
    match task {
        Task::Coord => "accuracy",
        Task::CoordReg => "pixel_error",
        Task::Shapes => "map",
    }
}

struct RunSpec {
    variant: Variant,
    seed: u64,
}

fn execute_run(
    spec: &RunSpec,
    task: Task,
    data: &TaskData,
    args: &CompareArgs,
    out_dir: &Path,
) -> Result<CompareRun> {
    let started = Instant::now();
    let run_dir = out_dir.join(format!("runs/{}_s{}", spec.variant.as_str(), spec.seed));
    fs::create_dir_all(&run_dir).with_context(|| format!("creating {}", run_dir.display()))?;

    let cfg = train_config(
        task,
        args.steps,
        args.lr,
        args.batch,
        spec.seed,
        args.eval_every,
        spec.variant,
    );
    let (h, w) = data.dims();
    let mut model = TaskModel::build(task, spec.variant, h, w, spec.seed)?;
    let mut csv = open_metrics(&run_dir.join("metrics.csv"))?;
    let mut sink = TeeSink {
        csv: &mut csv,
        history: Vec::new(),
    };
    let run = run_training(&mut model, data, &cfg, &mut sink)?;
    csv.flush()?;

    let state = crate::fresh_state(&model);
    model.save(
        &run_dir.join("model.ckpt"),
        &state,
        cfg.steps as u64,
        cfg.config_hash(),
    )?;

    let mut metrics = run.metrics;
    let mut affine = BTreeMap::new();
    if let (TaskModel::Ssd(ssd), TaskData::Shapes { test, h, w, .. }) = (&model, data) {
        let base_map = *metrics.get("map").expect("shapes eval produces map");
        let center = (*w as f64 / 2.0, *h as f64 / 2.0);
        for (name, params) in AFFINE_SWEEP {
            let t = parse_affine(params, center)?;
            let warped: Vec<_> = test
                .iter()
                .map(|s| apply_affine(s, &t))
                .collect::<coordemb::Result<_>>()?;
            let report = evaluate_map(ssd, &warped)?;
            metrics.insert(format!("map_affine_{name}"), report.map);
            affine.insert(
                name.to_string(),
                AffineEntry {
                    params: params.to_string(),
                    map: report.map,
                    delta_vs_base: report.map - base_map,
                },
            );
        }
    }

    Ok(CompareRun {
        variant: spec.variant.as_str().to_string(),
        seed: spec.seed,
        config_hash: cfg.config_hash(),
        metrics,
        affine,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    })
}

pub fn cmd_compare(args: CompareArgs) -> Result<()> {
    let started = Instant::now();
    let seeds: Vec<u64> = args
        .seeds
        .split(',')
        .map(|s| s.trim().parse::<u64>())
        .collect::<std::result::Result<_, _>>()
        .with_context(|| format!("parsing --seeds '{}'", args.seeds))?;
    if seeds.is_empty() {
        bail!("--seeds needs at least one seed");
    }
    let data = load_data(args.task, &args.data)?;
    fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;

    let specs: Vec<RunSpec> = Variant::ALL
        .iter()
        .flat_map(|&variant| seeds.iter().map(move |&seed| RunSpec { variant, seed }))
        .collect();

    let runs: Vec<CompareRun> = if args.jobs > 1 {
        let results: Vec<Result<CompareRun>> = specs
            .par_iter()
            .map(|spec| execute_run(spec, args.task, &data, &args, &args.out))
            .collect();
        results.into_iter().collect::<Result<Vec<_>>>()?
    } else {
        specs
            .iter()
            .map(|spec| {
                let run = execute_run(spec, args.task, &data, &args, &args.out)?;
                println!(
                    "  {} seed {}: {} = {:.4} ({:.1}s)",
                    run.variant,
                    run.seed,
                    headline_metric(args.task),
                    run.metrics
                        .get(headline_metric(args.task))
                        .copied()
                        .unwrap_or(f64::NAN),
                    run.wall_clock_seconds
                );
                Ok(run)
            })
            .collect::<Result<Vec<_>>>()?
    };

    // variant -> metric -> per-seed values, in seed order.
    let mut by_variant: BTreeMap<String, BTreeMap<String, Vec<f64>>> = BTreeMap::new();
    for run in &runs {
        let slot = by_variant.entry(run.variant.clone()).or_default();
        for (metric, value) in &run.metrics {
            slot.entry(metric.clone()).or_default().push(*value);
        }
    }
    let aggregates: BTreeMap<String, BTreeMap<String, crate::report::Aggregate>> = by_variant
        .iter()
        .map(|(variant, metrics)| {
            (
                variant.clone(),
                metrics
                    .iter()
                    .map(|(m, vals)| (m.clone(), aggregate(vals)))
                    .collect(),
            )
        })
        .collect();

    let headline = headline_metric(args.task);
    let per_seed_delta: Vec<f64> = seeds
        .iter()
        .map(|&seed| {
            let get = |variant: &str| {
                runs.iter()
                    .find(|r| r.variant == variant && r.seed == seed)
                    .and_then(|r| r.metrics.get(headline))
                    .copied()
                    .unwrap_or(f64::NAN)
            };
            get("coordemb") - get("vanilla")
        })
        .collect();
    let delta_agg = aggregate(&per_seed_delta);
    let coordemb_minus_vanilla = MetricDelta {
        metric: headline.to_string(),
        per_seed: per_seed_delta.clone(),
        mean: delta_agg.mean,
        min: delta_agg.min,
        max: delta_agg.max,
        positive_on_all_seeds: per_seed_delta.iter().all(|&d| d > 0.0),
    };

    let config = train_config(
        args.task,
        args.steps,
        args.lr,
        args.batch,
        seeds[0],
        args.eval_every,
        Variant::Vanilla,
    );
    let report = CompareReport {
        version: VERSION.to_string(),
        task: args.task.as_str().to_string(),
        seeds: seeds.clone(),
        config,
        runs: runs.clone(),
        aggregates: aggregates.clone(),
        coordemb_minus_vanilla,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    };
    fs::write(
        args.out.join("compare.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    write_csv(&args.out.join("compare.csv"), &runs, &aggregates)?;

    print_table(&report);
    println!(
        "comparison written to {} (compare.json, compare.csv)",
        args.out.display()
    );
    Ok(())
}

fn write_csv(
    path: &PathBuf,
    runs: &[CompareRun],
    aggregates: &BTreeMap<String, BTreeMap<String, crate::report::Aggregate>>,
) -> Result<()> {
    let mut columns: Vec<String> = Vec::new();
    for run in runs {
        for metric in run.metrics.keys() {
            if !columns.contains(metric) {
                columns.push(metric.clone());
            }
        }
    }
    columns.sort();

    let mut out = fs::File::create(path)?;
    writeln!(out, "variant,seed,{},wall_clock_seconds", columns.join(","))?;
    for run in runs {
        let cells: Vec<String> = columns
            .iter()
            .map(|c| {
                run.metrics
                    .get(c)
                    .map(|v| v.to_string())
                    .unwrap_or_default()
            })
            .collect();
        writeln!(
            out,
            "{},{},{},{}",
            run.variant,
            run.seed,
            cells.join(","),
            run.wall_clock_seconds
        )?;
    }
    for (variant, metrics) in aggregates {
        for stat in ["mean", "min", "max"] {
            let cells: Vec<String> = columns
                .iter()
                .map(|c| {
                    metrics
                        .get(c)
                        .map(|a| {
                            match stat {
                                "mean" => a.mean,
                                "min" => a.min,
                                _ => a.max,
                            }
                            .to_string()
                        })
                        .unwrap_or_default()
                })
                .collect();
            writeln!(out, "{variant},{stat},{},", cells.join(","))?;
        }
    }
    Ok(())
}

fn print_table(report: &CompareReport) {
    println!("\n=== {} comparison over seeds {:?} ===", report.task, report.seeds);
    let mut metrics: Vec<&String> = report
        .aggregates
        .values()
        .flat_map(|m| m.keys())
        .collect();
    metrics.sort();
    metrics.dedup();
    print!("{:<12}", "variant");
    for m in &metrics {
        print!(" {:>22}", m);
    }
    println!();
    for (variant, agg) in &report.aggregates {
        print!("{variant:<12}");
        for m in &metrics {
            match agg.get(*m) {
                Some(a) => print!(" {:>10.4} [{:.3},{:.3}]", a.mean, a.min, a.max),
                None => print!(" {:>22}", "-"),
            }
        }
        println!();
    }
    let d = &report.coordemb_minus_vanilla;
    println!(
        "coordemb - vanilla on {}: mean {:+.4}, range [{:+.4}, {:+.4}], positive on all seeds: {}",
        d.metric, d.mean, d.min, d.max, d.positive_on_all_seeds
    );
}
