//! RMSprop optimization, the seeded training loop, and checkpointing.
//!
//! Checkpoint layout: magic `CEM1`, u32 version, u32 tensor count, then per
//! tensor a u16 name length, the UTF-8 name, a u8 rank, u32 dims, and the
//! row-major little-endian f64 data. The step counter and config hash ride
//! along as one-element `meta/` tensors; optimizer accumulators are stored
//! under an `opt/` name prefix.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::layers::Variant;
use crate::tensor::Tensor;

/// Optimizer and schedule settings. The defaults record the reference
/// training protocol (RMSprop, learning rate 0.004, batch 24, 155k steps);
/// desk-scale runs override `steps` and usually `batch_size`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub rmsprop_decay: f64,
    pub rmsprop_epsilon: f64,
    pub seed: u64,
    pub eval_every: usize,
    pub variant: Variant,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.004,
            batch_size: 24,
            steps: 155_000,
            rmsprop_decay: 0.9,
            rmsprop_epsilon: 1e-8,
            seed: 0,
            eval_every: 1000,
            variant: Variant::Vanilla,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0 < self.rmsprop_decay && self.rmsprop_decay < 1.0) {
            return Err(Error::Config("rmsprop_decay must lie in (0, 1)".into()));
        }
        Ok(())
    }

    /// FNV-1a over the serialized config, truncated to 32 bits so it fits
    /// exactly in an f64 meta tensor.
    pub fn config_hash(&self) -> u32 {
        let text = serde_json::to_string(self).expect("config serializes");
        let mut hash: u64 = 0xcbf29ce484222325;
        for b in text.as_bytes() {
            hash ^= *b as u64;
            hash = hash.wrapping_mul(0x100000001b3);
        }
        (hash ^ (hash >> 32)) as u32
    }
}

/// Per-parameter squared-gradient accumulators, elementwise nonnegative.
#[derive(Debug, Clone)]
pub struct RmspropState {
    pub accumulators: Vec<Tensor>,
}

impl RmspropState {
    pub fn new(params: &[(String, &Tensor)]) -> Self {
        RmspropState {
            accumulators: params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect(),
        }
    }
}

/// One RMSprop update:
/// `acc <- rho * acc + (1 - rho) * g^2; p <- p - lr * g / (sqrt(acc) + eps)`.
pub fn rmsprop_step(
    params: &mut [(String, &mut Tensor)],
    grads: &[Tensor],
    state: &mut RmspropState,
    cfg: &TrainConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.accumulators.len() {
        return Err(Error::ShapeMismatch {
            context: "rmsprop parameter count",
            left: vec![params.len()],
            right: vec![grads.len()],
        });
    }
    let rho = cfg.rmsprop_decay;
    let lr = cfg.learning_rate;
    let eps = cfg.rmsprop_epsilon;
    for (((_, p), g), acc) in params
        .iter_mut()
        .zip(grads)
        .zip(state.accumulators.iter_mut())
    {
        if p.shape() != g.shape() {
            return Err(Error::ShapeMismatch {
                context: "rmsprop gradient shape",
                left: p.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
        for ((pv, &gv), av) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(acc.data_mut().iter_mut())
        {
            *av = rho * *av + (1.0 - rho) * gv * gv;
            *pv -= lr * gv / (av.sqrt() + eps);
        }
    }
    Ok(())
}

/// Anything with a stable, named parameter list.
pub trait ParamModel {
    fn parameters(&self) -> Vec<(String, &Tensor)>;
    fn parameters_mut(&mut self) -> Vec<(String, &mut Tensor)>;
}

impl ParamModel for crate::layers::Model {
    fn parameters(&self) -> Vec<(String, &Tensor)> {
        crate::layers::Model::parameters(self)
    }
    fn parameters_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        crate::layers::Model::parameters_mut(self)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRecord {
    pub step: usize,
    pub loss: f64,
    pub metric_name: String,
    pub metric_value: f64,
}

pub trait MetricsSink {
    fn record(&mut self, record: &MetricRecord) -> Result<()>;
}

impl MetricsSink for Vec<MetricRecord> {
    fn record(&mut self, record: &MetricRecord) -> Result<()> {
        self.push(record.clone());
        Ok(())
    }
}

impl MetricsSink for crate::io::MetricsCsv {
    fn record(&mut self, record: &MetricRecord) -> Result<()> {
        self.write_row(
            record.step,
            record.loss,
            &record.metric_name,
            record.metric_value,
        )
    }
}

/// Discards records; for callers that only want the return value.
pub struct NullSink;

impl MetricsSink for NullSink {
    fn record(&mut self, _record: &MetricRecord) -> Result<()> {
        Ok(())
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub final_loss: f64,
    pub first_loss: f64,
    pub steps_run: usize,
}

/// Runs `cfg.steps` RMSprop steps over seeded-shuffled minibatches.
///
/// `build_loss` assembles one sample's loss graph and returns the scalar
/// loss node plus the parameter nodes in `parameters()` order. Per-sample
/// gradients are computed in parallel but reduced in sample order, so the
/// result is bit-deterministic in `(cfg.seed, samples)`. Training aborts
/// with an error if the batch loss ever goes non-finite.
pub fn train<M, S, L, E>(
    model: &mut M,
    samples: &[S],
    cfg: &TrainConfig,
    build_loss: L,
    mut eval_metric: E,
    sink: &mut dyn MetricsSink,
) -> Result<TrainOutcome>
where
    M: ParamModel + Sync,
    S: Sync,
    L: Fn(&M, &mut Graph, &S) -> Result<(NodeId, Vec<NodeId>)> + Sync,
    E: FnMut(&M, usize) -> Option<(String, f64)>,
{
    let mut state = RmspropState::new(&model.parameters());
    train_resumed(model, samples, cfg, build_loss, &mut eval_metric, sink, &mut state, 0)
}

/// [`train`] with an existing optimizer state and step offset, for resuming.
#[allow(clippy::too_many_arguments)]
pub fn train_resumed<M, S, L, E>(
    model: &mut M,
    samples: &[S],
    cfg: &TrainConfig,
    build_loss: L,
    eval_metric: &mut E,
    sink: &mut dyn MetricsSink,
    state: &mut RmspropState,
    start_step: usize,
) -> Result<TrainOutcome>
where
    M: ParamModel + Sync,
    S: Sync,
    L: Fn(&M, &mut Graph, &S) -> Result<(NodeId, Vec<NodeId>)> + Sync,
    E: FnMut(&M, usize) -> Option<(String, f64)>,
{
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    let n_params = model.parameters().len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0usize;

    let mut first_loss = f64::NAN;
    let mut last_loss = f64::NAN;

    for step in start_step + 1..=cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }

        let per_sample: Vec<Result<(f64, Vec<Tensor>)>> = batch
            .par_iter()
            .map(|&idx| {
                let mut g = Graph::new();
                let (loss_id, param_nodes) = build_loss(model, &mut g, &samples[idx])?;
                let loss = g.value(loss_id).item();
                let mut grads = g.backward(loss_id)?;
                let collected = param_nodes.iter().map(|&id| grads.take(id)).collect();
                Ok((loss, collected))
            })
            .collect();

        // Fixed-order reduction keeps results independent of scheduling.
        let mut mean_grads: Vec<Option<Tensor>> = vec![None; n_params];
        let mut batch_loss = 0.0;
        for result in per_sample {
            let (loss, grads) = result?;
            batch_loss += loss;
            for (slot, g) in mean_grads.iter_mut().zip(grads) {
                match slot {
                    None => *slot = Some(g),
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += b;
                        }
                    }
                }
            }
        }
        batch_loss /= batch.len() as f64;
        let grads: Vec<Tensor> = mean_grads
            .into_iter()
            .map(|g| {
                let mut g = g.expect("one gradient per parameter");
                for v in g.data_mut() {
                    *v /= batch.len() as f64;
                }
                g
            })
            .collect();

        if !batch_loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                loss: batch_loss,
            });
        }
        if first_loss.is_nan() {
            first_loss = batch_loss;
        }
        last_loss = batch_loss;

        rmsprop_step(&mut model.parameters_mut(), &grads, state, cfg)?;

        if cfg.eval_every > 0 && step % cfg.eval_every == 0 {
            sink.record(&MetricRecord {
                step,
                loss: batch_loss,
                metric_name: "loss".into(),
                metric_value: batch_loss,
            })?;
            if let Some((name, value)) = eval_metric(model, step) {
                sink.record(&MetricRecord {
                    step,
                    loss: batch_loss,
                    metric_name: name,
                    metric_value: value,
                })?;
            }
        }
    }

    Ok(TrainOutcome {
        final_loss: last_loss,
        first_loss,
        steps_run: cfg.steps.saturating_sub(start_step),
    })
}

const CKPT_MAGIC: &[u8; 4] = b"CEM1";
const CKPT_VERSION: u32 = 1;
const MAX_ELEMENTS: u64 = 1 << 31;

/// A loaded checkpoint: every named tensor plus the decoded meta fields.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor)>,
    pub step: u64,
    pub config_hash: u32,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    /// Copies stored parameters into the model, matching by name.
    pub fn restore_model(&self, model: &mut impl ParamModel) -> Result<()> {
        for (name, param) in model.parameters_mut() {
            let stored = self.tensor(&name).ok_or_else(|| {
                Error::Config(format!("checkpoint is missing parameter '{name}'"))
            })?;
            if stored.shape() != param.shape() {
                return Err(Error::ShapeMismatch {
                    context: "checkpoint parameter",
                    left: param.shape().to_vec(),
                    right: stored.shape().to_vec(),
                });
            }
            param.data_mut().copy_from_slice(stored.data());
        }
        Ok(())
    }

    /// Rebuilds the optimizer state stored under `opt/`, in parameter order.
    pub fn restore_optimizer(&self, model: &impl ParamModel) -> Result<RmspropState> {
        let mut accumulators = Vec::new();
        for (name, param) in model.parameters() {
            let stored = self.tensor(&format!("opt/{name}")).ok_or_else(|| {
                Error::Config(format!("checkpoint is missing optimizer state for '{name}'"))
            })?;
            if stored.shape() != param.shape() {
                return Err(Error::ShapeMismatch {
                    context: "checkpoint optimizer state",
                    left: param.shape().to_vec(),
                    right: stored.shape().to_vec(),
                });
            }
            accumulators.push(stored.clone());
        }
        Ok(RmspropState { accumulators })
    }

    /// Compares the stored config hash against `cfg`; on mismatch logs a
    /// warning and returns false, but the checkpoint remains usable.
    pub fn verify_config_hash(&self, cfg: &TrainConfig) -> bool {
        let expect = cfg.config_hash();
        if self.config_hash != expect {
            log::warn!(
                "checkpoint config hash {:#010x} does not match current config {:#010x}; resuming anyway",
                self.config_hash,
                expect
            );
            false
        } else {
            true
        }
    }
}

/// Saves model parameters, optimizer state, step counter, config hash, and
/// any extra meta tensors. The write goes through a temp file and rename, so
/// a crash never leaves a partial checkpoint behind.
pub fn save_checkpoint(
    path: &Path,
    model: &impl ParamModel,
    state: &RmspropState,
    step: u64,
    config_hash: u32,
    extra_meta: &[(String, Tensor)],
) -> Result<()> {
    let params = model.parameters();
    let mut entries: Vec<(String, Tensor)> = Vec::new();
    entries.push(("meta/step".into(), Tensor::scalar(step as f64)));
    entries.push(("meta/config_hash".into(), Tensor::scalar(config_hash as f64)));
    for (name, t) in extra_meta {
        entries.push((format!("meta/{name}"), t.clone()));
    }
    for (name, t) in &params {
        entries.push((name.clone(), (*t).clone()));
    }
    for ((name, _), acc) in params.iter().zip(&state.accumulators) {
        entries.push((format!("opt/{name}"), acc.clone()));
    }

    let tmp = path.with_extension("tmp");
    {
        let file = File::create(&tmp).map_err(|e| Error::io(tmp.display().to_string(), e))?;
        let mut out = BufWriter::new(file);
        let mut write = |bytes: &[u8]| -> Result<()> {
            out.write_all(bytes)
                .map_err(|e| Error::io(tmp.display().to_string(), e))
        };
        write(CKPT_MAGIC)?;
        write(&CKPT_VERSION.to_le_bytes())?;
        write(&(entries.len() as u32).to_le_bytes())?;
        for (name, tensor) in &entries {
            let name_bytes = name.as_bytes();
            write(&(name_bytes.len() as u16).to_le_bytes())?;
            write(name_bytes)?;
            write(&[tensor.rank() as u8])?;
            for &d in tensor.shape() {
                write(&(d as u32).to_le_bytes())?;
            }
            for v in tensor.iter() {
                write(&v.to_le_bytes())?;
            }
        }
        out.flush()
            .map_err(|e| Error::io(tmp.display().to_string(), e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path.display().to_string(), e))
}

struct OffsetReader {
    inner: BufReader<File>,
    offset: u64,
    path: String,
}

impl OffsetReader {
    fn read(&mut self, buf: &mut [u8], kind: &str) -> Result<()> {
        self.inner
            .read_exact(buf)
            .map_err(|_| Error::format(self.path.clone(), kind, self.offset))?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn u16(&mut self, kind: &str) -> Result<u16> {
        let mut buf = [0u8; 2];
        self.read(&mut buf, kind)?;
        Ok(u16::from_le_bytes(buf))
    }

    fn u32(&mut self, kind: &str) -> Result<u32> {
        let mut buf = [0u8; 4];
        self.read(&mut buf, kind)?;
        Ok(u32::from_le_bytes(buf))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let display = path.display().to_string();
    let file = File::open(path).map_err(|e| Error::io(display.clone(), e))?;
    let mut r = OffsetReader {
        inner: BufReader::new(file),
        offset: 0,
        path: display,
    };

    let mut magic = [0u8; 4];
    r.read(&mut magic, "truncated magic")?;
    if &magic != CKPT_MAGIC {
        return Err(Error::format(r.path, "bad magic", 0));
    }
    let version = r.u32("truncated version")?;
    if version != CKPT_VERSION {
        return Err(Error::format(
            r.path,
            format!("unsupported version {version}"),
            4,
        ));
    }
    let count = r.u32("truncated tensor count")?;

    let mut tensors = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = r.u16("truncated name length")? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read(&mut name_bytes, "truncated name")?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::format(r.path.clone(), "invalid name encoding", r.offset))?;
        let mut rank_buf = [0u8; 1];
        r.read(&mut rank_buf, "truncated rank")?;
        let rank = rank_buf[0] as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32("truncated dims")? as usize);
        }
        let numel = dims
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
            .unwrap_or(u64::MAX);
        if dims.iter().any(|&d| d == 0) || numel > MAX_ELEMENTS {
            return Err(Error::format(
                r.path.clone(),
                "dimension overflow",
                r.offset - 4 * rank as u64,
            ));
        }
        let mut data = Vec::with_capacity(numel as usize);
        let mut buf8 = [0u8; 8];
        for _ in 0..numel {
            r.read(&mut buf8, "truncated data")?;
            data.push(f64::from_le_bytes(buf8));
        }
        tensors.push((name, Tensor::new(dims, data)?));
    }

    let step = tensors
        .iter()
        .find(|(n, _)| n == "meta/step")
        .map(|(_, t)| t.item() as u64)
        .unwrap_or(0);
    let config_hash = tensors
        .iter()
        .find(|(n, _)| n == "meta/config_hash")
        .map(|(_, t)| t.item() as u32)
        .unwrap_or(0);

    Ok(Checkpoint {
        tensors,
        step,
        config_hash,
    })
}
