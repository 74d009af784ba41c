//! Task adapters: dataset layouts on disk, per-task model construction,
//! training dispatch, and evaluation.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use coordemb::coord_task::{
    coord_classification_eval, coord_classification_spec, coord_input_tile,
    coord_regression_eval, coord_regression_spec, gen_coord_dataset, CoordTaskSample, SplitKind,
};
use coordemb::graph::{CeTarget, Graph};
use coordemb::io::{load_scene_dir, save_scene_dir, MetricsCsv};
use coordemb::layers::{build_model, Model, Variant};
use coordemb::scenes::{gen_shape_scene, ShapeScene};
use coordemb::ssd::{build_ssd, evaluate_map, SsdConfig, SsdModel};
use coordemb::tensor::Tensor;
use coordemb::training::{
    load_checkpoint, save_checkpoint, train as train_loop, Checkpoint, MetricRecord, MetricsSink,
    RmspropState, TrainConfig,
};
use coordemb::{NodeId, Result as CoreResult};

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Task {
    /// Coordinate classification: normalized (x, y) pair in, H*W logits out.
    Coord,
    /// Coordinate regression: one-hot image in, normalized (x, y) out.
    CoordReg,
    /// Shape detection on synthetic scenes.
    Shapes,
}

impl Task {
    pub fn as_str(&self) -> &'static str {
        match self {
            Task::Coord => "coord",
            Task::CoordReg => "coord-reg",
            Task::Shapes => "shapes",
        }
    }

    fn id(&self) -> f64 {
        match self {
            Task::Coord => 0.0,
            Task::CoordReg => 1.0,
            Task::Shapes => 2.0,
        }
    }

    fn from_id(id: f64) -> Result<Task> {
        match id as i64 {
            0 => Ok(Task::Coord),
            1 => Ok(Task::CoordReg),
            2 => Ok(Task::Shapes),
            other => bail!("unknown task id {other} in checkpoint"),
        }
    }

    /// Desk-scale defaults; `TrainConfig::default()` keeps the reference
    /// protocol values.
    pub fn default_lr(&self) -> f64 {
        0.002
    }

    pub fn default_batch(&self) -> usize {
        match self {
            Task::Shapes => 4,
            _ => 8,
        }
    }
}

fn variant_id(v: Variant) -> f64 {
    match v {
        Variant::Vanilla => 0.0,
        Variant::CoordEmb => 1.0,
        Variant::CoordConv => 2.0,
    }
}

fn variant_from_id(id: f64) -> Result<Variant> {
    match id as i64 {
        0 => Ok(Variant::Vanilla),
        1 => Ok(Variant::CoordEmb),
        2 => Ok(Variant::CoordConv),
        other => bail!("unknown variant id {other} in checkpoint"),
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub task: String,
    pub h: usize,
    pub w: usize,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_train: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_test: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub edge_bias: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CoordRecord {
    row: usize,
    col: usize,
}

/// Generates and writes the coordinate dataset; returns (n_train, n_test).
pub fn gen_coord_data(
    dir: &Path,
    h: usize,
    w: usize,
    split: SplitKind,
    seed: u64,
) -> Result<(usize, usize)> {
    let (train, test) = gen_coord_dataset(h, w, split, seed)?;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let meta = DatasetMeta {
        task: "coord".into(),
        h,
        w,
        seed,
        split: Some(
            match split {
                SplitKind::Uniform => "uniform",
                SplitKind::Quadrant => "quadrant",
            }
            .into(),
        ),
        n_train: Some(train.len()),
        n_test: Some(test.len()),
        edge_bias: None,
    };
    write_meta(dir, &meta)?;
    for (name, samples) in [("train.jsonl", &train), ("test.jsonl", &test)] {
        let path = dir.join(name);
        let mut out = File::create(&path).with_context(|| format!("creating {name}"))?;
        for s in samples {
            writeln!(
                out,
                "{}",
                serde_json::to_string(&CoordRecord {
                    row: s.row,
                    col: s.col
                })?
            )?;
        }
    }
    Ok((train.len(), test.len()))
}

/// Generates and writes the shape-scene dataset (80/20 train/test split of
/// `n` total scenes, per-scene seeds drawn from the master seed); returns
/// (n_train, n_test).
pub fn gen_shapes_data(
    dir: &Path,
    h: usize,
    w: usize,
    n: usize,
    edge_bias: f64,
    seed: u64,
) -> Result<(usize, usize)> {
    if n < 5 {
        bail!("shapes dataset needs at least 5 scenes, got {n}");
    }
    let n_test = n / 5;
    let n_train = n - n_test;
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let mut make = |count: usize| -> CoreResult<Vec<ShapeScene>> {
        (0..count)
            .map(|_| {
                let scene_seed: u64 = master.random();
                let n_objects = master.random_range(2..=5usize);
                gen_shape_scene(h, w, n_objects, scene_seed, edge_bias)
            })
            .collect()
    };
    let train = make(n_train)?;
    let test = make(n_test)?;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let meta = DatasetMeta {
        task: "shapes".into(),
        h,
        w,
        seed,
        split: None,
        n_train: Some(n_train),
        n_test: Some(n_test),
        edge_bias: Some(edge_bias),
    };
    write_meta(dir, &meta)?;
    save_scene_dir(&dir.join("train"), &train)?;
    save_scene_dir(&dir.join("test"), &test)?;
    Ok((n_train, n_test))
}

fn write_meta(dir: &Path, meta: &DatasetMeta) -> Result<()> {
    let path = dir.join("meta.json");
    fs::write(&path, serde_json::to_string_pretty(meta)?)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn read_meta(dir: &Path) -> Result<DatasetMeta> {
    let path = dir.join("meta.json");
    let text =
        fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text)?)
}

pub enum TaskData {
    Coord {
        h: usize,
        w: usize,
        train: Vec<CoordTaskSample>,
        test: Vec<CoordTaskSample>,
    },
    Shapes {
        h: usize,
        w: usize,
        train: Vec<ShapeScene>,
        test: Vec<ShapeScene>,
    },
}

impl TaskData {
    pub fn dims(&self) -> (usize, usize) {
        match self {
            TaskData::Coord { h, w, .. } | TaskData::Shapes { h, w, .. } => (*h, *w),
        }
    }
}

pub fn load_data(task: Task, dir: &Path) -> Result<TaskData> {
    let meta = read_meta(dir)?;
    match task {
        Task::Coord | Task::CoordReg => {
            if meta.task != "coord" {
                bail!(
                    "dataset at {} is '{}', expected 'coord'",
                    dir.display(),
                    meta.task
                );
            }
            let read = |name: &str| -> Result<Vec<CoordTaskSample>> {
                let path = dir.join(name);
                let file =
                    File::open(&path).with_context(|| format!("opening {}", path.display()))?;
                let mut samples = Vec::new();
                for line in BufReader::new(file).lines() {
                    let line = line?;
                    if line.trim().is_empty() {
                        continue;
                    }
                    let rec: CoordRecord = serde_json::from_str(&line)?;
                    samples.push(CoordTaskSample::new(rec.row, rec.col, meta.h, meta.w));
                }
                Ok(samples)
            };
            Ok(TaskData::Coord {
                h: meta.h,
                w: meta.w,
                train: read("train.jsonl")?,
                test: read("test.jsonl")?,
            })
        }
        Task::Shapes => {
            if meta.task != "shapes" {
                bail!(
                    "dataset at {} is '{}', expected 'shapes'",
                    dir.display(),
                    meta.task
                );
            }
            Ok(TaskData::Shapes {
                h: meta.h,
                w: meta.w,
                train: load_scene_dir(&dir.join("train"))?,
                test: load_scene_dir(&dir.join("test"))?,
            })
        }
    }
}

pub enum TaskModel {
    Coord { model: Model, h: usize, w: usize },
    CoordReg { model: Model, h: usize, w: usize },
    Ssd(SsdModel),
}

impl TaskModel {
    pub fn build(task: Task, variant: Variant, h: usize, w: usize, seed: u64) -> Result<Self> {
        Ok(match task {
            Task::Coord => TaskModel::Coord {
                model: build_model(&coord_classification_spec(h, w, variant), seed)?,
                h,
                w,
            },
            Task::CoordReg => TaskModel::CoordReg {
                model: build_model(&coord_regression_spec(h, w, variant), seed)?,
                h,
                w,
            },
            Task::Shapes => {
                let cfg = SsdConfig {
                    input_h: h,
                    input_w: w,
                    ..SsdConfig::default()
                };
                TaskModel::Ssd(build_ssd(&cfg, variant, seed)?)
            }
        })
    }

    pub fn task(&self) -> Task {
        match self {
            TaskModel::Coord { .. } => Task::Coord,
            TaskModel::CoordReg { .. } => Task::CoordReg,
            TaskModel::Ssd(_) => Task::Shapes,
        }
    }

    pub fn variant(&self) -> Variant {
        match self {
            TaskModel::Coord { model, .. } | TaskModel::CoordReg { model, .. } => model.variant,
            TaskModel::Ssd(m) => m.variant,
        }
    }

    fn dims(&self) -> (usize, usize) {
        match self {
            TaskModel::Coord { h, w, .. } | TaskModel::CoordReg { h, w, .. } => (*h, *w),
            TaskModel::Ssd(m) => (m.cfg.input_h, m.cfg.input_w),
        }
    }

    pub fn save(
        &self,
        path: &Path,
        state: &RmspropState,
        step: u64,
        config_hash: u32,
    ) -> Result<()> {
        let (h, w) = self.dims();
        let meta = vec![
            ("task".to_string(), Tensor::scalar(self.task().id())),
            ("variant".to_string(), Tensor::scalar(variant_id(self.variant()))),
            (
                "input".to_string(),
                Tensor::new(vec![2], vec![h as f64, w as f64])?,
            ),
        ];
        match self {
            TaskModel::Coord { model, .. } | TaskModel::CoordReg { model, .. } => {
                save_checkpoint(path, model, state, step, config_hash, &meta)?
            }
            TaskModel::Ssd(model) => {
                save_checkpoint(path, model, state, step, config_hash, &meta)?
            }
        }
        Ok(())
    }

    /// Rebuilds the architecture recorded in a checkpoint and restores its
    /// parameters.
    pub fn load(path: &Path) -> Result<(Self, Checkpoint)> {
        let ckpt = load_checkpoint(path)?;
        let task = Task::from_id(
            ckpt.tensor("meta/task")
                .context("checkpoint missing meta/task")?
                .item(),
        )?;
        let variant = variant_from_id(
            ckpt.tensor("meta/variant")
                .context("checkpoint missing meta/variant")?
                .item(),
        )?;
        let input = ckpt
            .tensor("meta/input")
            .context("checkpoint missing meta/input")?;
        let (h, w) = (input.data()[0] as usize, input.data()[1] as usize);
        let mut model = TaskModel::build(task, variant, h, w, 0)?;
        match &mut model {
            TaskModel::Coord { model, .. } | TaskModel::CoordReg { model, .. } => {
                ckpt.restore_model(model)?
            }
            TaskModel::Ssd(model) => ckpt.restore_model(model)?,
        }
        Ok((model, ckpt))
    }

    /// Final task metrics on the held-out split (plus training-split metrics
    /// for the coordinate diagnostics).
    pub fn evaluate(&self, data: &TaskData) -> Result<BTreeMap<String, f64>> {
        let mut metrics = BTreeMap::new();
        match (self, data) {
            (TaskModel::Coord { model, h, w }, TaskData::Coord { train, test, .. }) => {
                let predict = |s: &CoordTaskSample| {
                    model
                        .infer(&coord_input_tile(s, *h, *w))
                        .expect("forward pass")
                        .data()
                        .to_vec()
                };
                metrics.insert(
                    "accuracy".into(),
                    coord_classification_eval(predict, test)?,
                );
                metrics.insert(
                    "accuracy_train".into(),
                    coord_classification_eval(predict, train)?,
                );
            }
            (TaskModel::CoordReg { model, .. }, TaskData::Coord { h, w, train, test }) => {
                let predict = |s: &CoordTaskSample| {
                    let out = model.infer(&s.onehot_image).expect("forward pass");
                    (out.data()[0], out.data()[1])
                };
                metrics.insert(
                    "pixel_error".into(),
                    coord_regression_eval(predict, test, *h, *w)?,
                );
                metrics.insert(
                    "pixel_error_train".into(),
                    coord_regression_eval(predict, train, *h, *w)?,
                );
            }
            (TaskModel::Ssd(model), TaskData::Shapes { test, .. }) => {
                let report = evaluate_map(model, test)?;
                metrics.insert("map".into(), report.map);
                if let Some(v) = report.map_small {
                    metrics.insert("map_small".into(), v);
                }
                if let Some(v) = report.map_medium {
                    metrics.insert("map_medium".into(), v);
                }
                if let Some(v) = report.map_large {
                    metrics.insert("map_large".into(), v);
                }
                for (c, ap) in report.per_class.iter().enumerate() {
                    if let Some(v) = ap {
                        metrics.insert(format!("ap_class{c}"), *v);
                    }
                }
            }
            _ => bail!("model task does not match dataset"),
        }
        Ok(metrics)
    }
}

/// Losses per task, shared by `train` and `compare`.
fn coord_cls_loss(
    model: &Model,
    g: &mut Graph,
    sample: &CoordTaskSample,
    h: usize,
    w: usize,
) -> CoreResult<(NodeId, Vec<NodeId>)> {
    let input = g.leaf(coord_input_tile(sample, h, w));
    let (logits, params) = model.forward(g, input)?;
    let loss = g.cross_entropy(logits, CeTarget::Indices(vec![sample.class_index]))?;
    Ok((loss, params))
}

fn coord_reg_loss(
    model: &Model,
    g: &mut Graph,
    sample: &CoordTaskSample,
    h: usize,
    w: usize,
) -> CoreResult<(NodeId, Vec<NodeId>)> {
    let input = g.leaf(sample.onehot_image.clone());
    let (out, params) = model.forward(g, input)?;
    let (x, y) = sample.normalized(h, w);
    let target = Tensor::new(vec![2], vec![x, y])?;
    let loss = g.mse(out, &target)?;
    Ok((loss, params))
}

pub struct TrainedRun {
    pub final_loss: f64,
    pub first_loss: f64,
    pub metrics: BTreeMap<String, f64>,
}

/// Detector training data = original scenes plus three mildly warped copies
/// of each, generated from a fixed seed so every variant and training seed
/// sees the identical expanded set. Scenes whose objects were all clipped
/// away are dropped.
fn augment_scenes(train: &[ShapeScene], h: usize, w: usize) -> Result<Vec<ShapeScene>> {
    use coordemb::scenes::{apply_affine, AffineTransform};
    let mut rng = ChaCha8Rng::seed_from_u64(0xA06);
    let center = (w as f64 / 2.0, h as f64 / 2.0);
    let mut out = Vec::with_capacity(train.len() * 4);
    out.extend(train.iter().cloned());
    for scene in train {
        for _ in 0..3 {
            let t = AffineTransform::from_params(
                rng.random_range(0.9..1.1),
                rng.random_range(-0.15..0.15),
                rng.random_range(-12.0..12.0),
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
                center,
            );
            let warped = apply_affine(scene, &t)?;
            if !warped.objects.is_empty() {
                out.push(warped);
            }
        }
    }
    Ok(out)
}

/// Trains one model in place, recording (step, loss, task metric) every
/// `cfg.eval_every` steps, and returns the final held-out metrics.
pub fn run_training(
    model: &mut TaskModel,
    data: &TaskData,
    cfg: &TrainConfig,
    sink: &mut dyn MetricsSink,
) -> Result<TrainedRun> {
    let outcome = match (&mut *model, data) {
        (TaskModel::Coord { model, h, w }, TaskData::Coord { train, test, .. }) => {
            let (h, w) = (*h, *w);
            let test = test.clone();
            train_loop(
                model,
                train.as_slice(),
                cfg,
                move |m, g, s| coord_cls_loss(m, g, s, h, w),
                |m: &Model, _| {
                    let acc = coord_classification_eval(
                        |s| {
                            m.infer(&coord_input_tile(s, h, w))
                                .expect("forward pass")
                                .data()
                                .to_vec()
                        },
                        &test,
                    )
                    .ok()?;
                    Some(("accuracy".to_string(), acc))
                },
                sink,
            )?
        }
        (TaskModel::CoordReg { model, h, w }, TaskData::Coord { train, test, .. }) => {
            let (h, w) = (*h, *w);
            let test = test.clone();
            train_loop(
                model,
                train.as_slice(),
                cfg,
                move |m, g, s| coord_reg_loss(m, g, s, h, w),
                |m: &Model, _| {
                    let err = coord_regression_eval(
                        |s| {
                            let out = m.infer(&s.onehot_image).expect("forward pass");
                            (out.data()[0], out.data()[1])
                        },
                        &test,
                        h,
                        w,
                    )
                    .ok()?;
                    Some(("pixel_error".to_string(), err))
                },
                sink,
            )?
        }
        (TaskModel::Ssd(model), TaskData::Shapes { train, test, h, w }) => {
            let probe: Vec<ShapeScene> = test.iter().take(16).cloned().collect();
            let expanded = augment_scenes(train, *h, *w)?;
            train_loop(
                model,
                expanded.as_slice(),
                cfg,
                |m, g, s| m.loss(g, s),
                |m: &SsdModel, _| {
                    let report = evaluate_map(m, &probe).ok()?;
                    Some(("map_probe".to_string(), report.map))
                },
                sink,
            )?
        }
        _ => bail!("model task does not match dataset"),
    };
    let metrics = model.evaluate(data)?;
    Ok(TrainedRun {
        final_loss: outcome.final_loss,
        first_loss: outcome.first_loss,
        metrics,
    })
}

/// Creates the metrics CSV next to the checkpoint unless an explicit path is
/// given.
pub fn metrics_path(ckpt: &Path, explicit: Option<&Path>) -> PathBuf {
    match explicit {
        Some(p) => p.to_path_buf(),
        None => ckpt
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join("metrics.csv"),
    }
}

pub fn open_metrics(path: &Path) -> Result<MetricsCsv> {
    Ok(MetricsCsv::create(path)?)
}

/// In-memory recorder used by compare so each run's history can also be
/// flushed to its own CSV.
pub struct TeeSink<'a> {
    pub csv: &'a mut MetricsCsv,
    pub history: Vec<MetricRecord>,
}

impl MetricsSink for TeeSink<'_> {
    fn record(&mut self, record: &MetricRecord) -> coordemb::Result<()> {
        self.history.push(record.clone());
        self.csv.record(record)
    }
}
