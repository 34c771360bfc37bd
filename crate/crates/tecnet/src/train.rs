//! Optimization loop: shuffled mini-batches, prediction-window-only loss,
//! Adam updates, per-epoch held-out evaluation, multi-run statistics and
//! binary checkpoints.

use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::arch::{ArchKind, Model};
use crate::data::{denormalize, DataError, TecDataset};
use crate::forecast::{periodic_baseline, predict, ForecastError, ForecastScheme};
use crate::metrics::{global_mean_rms, MetricsError, SequencePair};
use crate::tensor::{AdamState, Element, Tensor, TensorError, TensorResult};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("dataset has no training sequences")]
    EmptyTrainSet,
    #[error("dataset has no test sequences")]
    EmptyTestSet,
    #[error("loss became NaN at optimizer step {step}")]
    NanLoss { step: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Forecast(#[from] ForecastError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    L1,
    L2,
}

impl LossKind {
    pub fn name(&self) -> &'static str {
        match self {
            LossKind::L1 => "l1",
            LossKind::L2 => "l2",
        }
    }
}

impl FromStr for LossKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "l1" => Ok(LossKind::L1),
            "l2" => Ok(LossKind::L2),
            other => Err(format!("unknown loss '{other}' (expected l1 or l2)")),
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub arch: ArchKind,
    pub scheme: ForecastScheme,
    pub horizon: usize,
    pub loss: LossKind,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub runs: usize,
    /// Held-out sequences evaluated per epoch (bounds eval cost).
    pub eval_sequences: usize,
    /// Global-norm gradient clip; off by default.
    pub clip_grad: Option<f32>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            arch: ArchKind::Dcnn121,
            scheme: ForecastScheme::Residual,
            horizon: 24,
            loss: LossKind::L1,
            learning_rate: 0.001,
            batch_size: 16,
            epochs: 50,
            seed: 0,
            runs: 10,
            eval_sequences: 64,
            clip_grad: None,
        }
    }
}

/// Mean elementwise penalty over the prediction frames only.
pub fn sequence_loss<E: Element>(
    pred: &Tensor<E>,
    target: &Tensor<E>,
    kind: LossKind,
) -> TensorResult<Tensor<E>> {
    let diff = pred.sub(target)?;
    Ok(match kind {
        LossKind::L1 => diff.abs_val().mean_all(),
        LossKind::L2 => diff.mul(&diff)?.mean_all(),
    })
}

#[derive(Debug, Clone, Copy)]
pub struct EpochStats {
    pub train_loss: f64,
    /// Held-out global mean RMS; absent when the dataset has no test
    /// sequences.
    pub eval_rms: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
    pub adam_steps: usize,
}

/// Deterministic single training run. Identical configs and datasets give
/// bit-identical parameters.
pub fn train(config: &TrainConfig, dataset: &TecDataset) -> Result<(Model, TrainHistory), TrainError> {
    let train_starts = dataset.train_starts()?;
    if train_starts.is_empty() {
        return Err(TrainError::EmptyTrainSet);
    }
    let test_starts = dataset.test_starts()?;
    let eval_starts: Vec<usize> = test_starts.iter().copied().take(config.eval_sequences).collect();

    let model: Model = Model::build(config.arch, config.seed);
    let params = model.param_tensors();
    let mut adam = AdamState::new(&params).with_learning_rate(config.learning_rate as f32);

    let mut history = TrainHistory::default();
    let mut step = 0usize;
    for epoch in 0..config.epochs {
        let mut order = train_starts.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1 + epoch as u64);
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch = dataset.make_batch(chunk, config.horizon)?;
            let pred = predict(&model, config.scheme, &batch.inputs, config.horizon)?;
            let loss = sequence_loss(&pred, &batch.targets, config.loss)?;
            let value = loss.item();
            step += 1;
            if value.is_nan() {
                return Err(TrainError::NanLoss { step });
            }
            loss_sum += value as f64;
            batches += 1;
            loss.backward()?;
            if let Some(limit) = config.clip_grad {
                clip_global_norm(&params, limit);
            }
            adam.step(&params)?;
            model.zero_grads();
        }
        history.adam_steps = step;

        let eval_rms = if eval_starts.is_empty() {
            None
        } else {
            let (pairs, _) = forecast_pairs(Some(&model), dataset, config.scheme, config.horizon, &eval_starts, config.batch_size)?;
            Some(global_mean_rms(&pairs)?.per_frame)
        };
        history.epochs.push(EpochStats {
            train_loss: loss_sum / batches.max(1) as f64,
            eval_rms,
        });
        let _ = epoch;
    }
    Ok((model, history))
}

fn clip_global_norm(params: &[Tensor], limit: f32) {
    let mut sq = 0.0f64;
    for p in params {
        if let Some(g) = p.grad() {
            for v in &g {
                sq += (*v as f64) * (*v as f64);
            }
        }
    }
    let norm = sq.sqrt() as f32;
    if norm > limit && norm > 0.0 {
        let scale = limit / norm;
        for p in params {
            if let Some(g) = p.grad() {
                p.replace_grad(g.iter().map(|v| v * scale).collect());
            }
        }
    }
}

/// De-normalized model and baseline sequence pairs for the given windows.
/// Pass `None` for the model to evaluate the baseline only (the model slot
/// of each pair then repeats the baseline).
pub fn forecast_pairs(
    model: Option<&Model>,
    dataset: &TecDataset,
    scheme: ForecastScheme,
    horizon: usize,
    starts: &[usize],
    batch_size: usize,
) -> Result<(Vec<SequencePair>, Vec<SequencePair>), TrainError> {
    if starts.is_empty() {
        return Err(TrainError::EmptyTestSet);
    }
    let eval_model = model.map(Model::eval_clone);
    let mut model_pairs = Vec::with_capacity(starts.len());
    let mut baseline_pairs = Vec::with_capacity(starts.len());
    let frame = crate::data::GRID * crate::data::GRID;
    for chunk in starts.chunks(batch_size.max(1)) {
        let batch = dataset.make_batch(chunk, horizon)?;
        let baseline = periodic_baseline(&batch.inputs, horizon)?;
        let pred = match &eval_model {
            Some(m) => predict(m, scheme, &batch.inputs, horizon)?,
            None => baseline.clone(),
        };
        let mut pred_data = pred.to_vec();
        let mut base_data = baseline.to_vec();
        let mut target_data = batch.targets.to_vec();
        denormalize(&mut pred_data, dataset.max_train);
        denormalize(&mut base_data, dataset.max_train);
        denormalize(&mut target_data, dataset.max_train);
        for (bi, _) in chunk.iter().enumerate() {
            let span = bi * horizon * frame..(bi + 1) * horizon * frame;
            model_pairs.push(SequencePair::new(
                pred_data[span.clone()].to_vec(),
                target_data[span.clone()].to_vec(),
                horizon,
            )?);
            baseline_pairs.push(SequencePair::new(
                base_data[span.clone()].to_vec(),
                target_data[span].to_vec(),
                horizon,
            )?);
        }
    }
    Ok((model_pairs, baseline_pairs))
}

/// Per-run final score plus aggregate statistics. `std` uses the population
/// formula (n divisor); `best_run` is the argmin.
#[derive(Debug, Clone)]
pub struct RunStats {
    pub per_run: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub best_run: usize,
}

impl RunStats {
    fn from_scores(per_run: Vec<f64>) -> RunStats {
        let n = per_run.len() as f64;
        let mean = per_run.iter().sum::<f64>() / n;
        let var = per_run.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let best_run = per_run
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap_or(0);
        RunStats {
            per_run,
            mean,
            std: var.sqrt(),
            best_run,
        }
    }
}

type ParamDump = Vec<(String, Vec<usize>, Vec<f32>)>;

fn run_once(config: &TrainConfig, dataset: &TecDataset, run: usize) -> Result<(f64, ParamDump, TrainHistory), TrainError> {
    let cfg = TrainConfig {
        seed: config.seed + run as u64,
        ..config.clone()
    };
    let (model, history) = train(&cfg, dataset)?;
    let score = history
        .epochs
        .last()
        .and_then(|e| e.eval_rms)
        .ok_or(TrainError::EmptyTestSet)?;
    let dump = model
        .named_params()
        .iter()
        .map(|(n, t)| (n.clone(), t.shape().to_vec(), t.to_vec()))
        .collect();
    Ok((score, dump, history))
}

/// Repeat the training `config.runs` times with consecutive seeds.
/// Runs are independent, so parallel execution gives results identical to
/// sequential execution.
pub fn multi_run(
    config: &TrainConfig,
    dataset: &TecDataset,
    parallel: bool,
) -> Result<(RunStats, Vec<Model>, Vec<TrainHistory>), TrainError> {
    let results: Vec<(f64, ParamDump, TrainHistory)> = if parallel {
        (0..config.runs)
            .into_par_iter()
            .map(|r| run_once(config, dataset, r))
            .collect::<Result<_, _>>()?
    } else {
        (0..config.runs)
            .map(|r| run_once(config, dataset, r))
            .collect::<Result<_, _>>()?
    };
    let mut scores = Vec::with_capacity(results.len());
    let mut models = Vec::with_capacity(results.len());
    let mut histories = Vec::with_capacity(results.len());
    for (score, dump, history) in results {
        scores.push(score);
        let mut m: Model = Model::build(config.arch, 0);
        m.load_named_params(&dump)?;
        models.push(m);
        histories.push(history);
    }
    Ok((RunStats::from_scores(scores), models, histories))
}

// ---------------------------------------------------------------------------
// Checkpoints
//
// Little-endian layout:
//   magic "TECCKPT1" | u32 version=1 | u8 arch | u8 scheme | u32 horizon
//   | u32 n_entries | per entry: u32 name_len + name + u32 rank
//   + u32 extents[rank] + f32 data | u64 fnv1a checksum over everything
//   after the magic.
// ---------------------------------------------------------------------------

const CKPT_MAGIC: &[u8; 8] = b"TECCKPT1";
const CKPT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CheckpointMeta {
    pub arch: ArchKind,
    pub scheme: ForecastScheme,
    pub horizon: u32,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn save_checkpoint(
    model: &Model,
    scheme: ForecastScheme,
    horizon: u32,
    path: impl AsRef<Path>,
) -> Result<(), TrainError> {
    let mut payload = Vec::new();
    payload.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    payload.push(model.kind().tag());
    payload.push(scheme.tag());
    payload.extend_from_slice(&horizon.to_le_bytes());
    let named = model.named_params();
    payload.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, tensor) in &named {
        payload.extend_from_slice(&(name.len() as u32).to_le_bytes());
        payload.extend_from_slice(name.as_bytes());
        let shape = tensor.shape();
        payload.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &e in shape {
            payload.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for v in tensor.data().iter() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let checksum = fnv1a(&payload);
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(CKPT_MAGIC)?;
    f.write_all(&payload)?;
    f.write_all(&checksum.to_le_bytes())?;
    f.flush()?;
    Ok(())
}

/// Load a checkpoint; when `expect` is given, a different stored
/// architecture is rejected.
pub fn load_checkpoint(
    path: impl AsRef<Path>,
    expect: Option<ArchKind>,
) -> Result<(Model, CheckpointMeta), TrainError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 8 + 8 || &bytes[..8] != CKPT_MAGIC {
        return Err(TrainError::Checkpoint("bad magic".into()));
    }
    let (payload, tail) = bytes[8..].split_at(bytes.len() - 16);
    let stored = u64::from_le_bytes(tail.try_into().expect("8-byte checksum"));
    if fnv1a(payload) != stored {
        return Err(TrainError::Checkpoint("checksum mismatch".into()));
    }
    let mut cur = std::io::Cursor::new(payload);
    let version = read_u32(&mut cur)?;
    if version != CKPT_VERSION {
        return Err(TrainError::Checkpoint(format!(
            "unsupported version {version}"
        )));
    }
    let arch = ArchKind::from_tag(read_u8(&mut cur)?)
        .ok_or_else(|| TrainError::Checkpoint("bad architecture tag".into()))?;
    if let Some(want) = expect {
        if want != arch {
            return Err(TrainError::Checkpoint(format!(
                "checkpoint holds {arch}, not {want}"
            )));
        }
    }
    let scheme = ForecastScheme::from_tag(read_u8(&mut cur)?)
        .ok_or_else(|| TrainError::Checkpoint("bad scheme tag".into()))?;
    let horizon = read_u32(&mut cur)?;
    let n = read_u32(&mut cur)? as usize;
    let mut entries: ParamDump = Vec::with_capacity(n);
    for _ in 0..n {
        let name_len = read_u32(&mut cur)? as usize;
        let mut name = vec![0u8; name_len];
        cur.read_exact(&mut name)
            .map_err(|_| TrainError::Checkpoint("truncated name".into()))?;
        let name = String::from_utf8(name)
            .map_err(|_| TrainError::Checkpoint("name is not UTF-8".into()))?;
        let rank = read_u32(&mut cur)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut cur)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = vec![0f32; numel];
        let mut buf = vec![0u8; numel * 4];
        cur.read_exact(&mut buf)
            .map_err(|_| TrainError::Checkpoint("truncated tensor data".into()))?;
        for (v, c) in data.iter_mut().zip(buf.chunks_exact(4)) {
            *v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
        }
        entries.push((name, shape, data));
    }
    let mut model: Model = Model::build(arch, 0);
    model.load_named_params(&entries)?;
    Ok((
        model,
        CheckpointMeta {
            arch,
            scheme,
            horizon,
        },
    ))
}

fn read_u32(cur: &mut std::io::Cursor<&[u8]>) -> Result<u32, TrainError> {
    let mut b = [0u8; 4];
    cur.read_exact(&mut b)
        .map_err(|_| TrainError::Checkpoint("truncated file".into()))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u8(cur: &mut std::io::Cursor<&[u8]>) -> Result<u8, TrainError> {
    let mut b = [0u8; 1];
    cur.read_exact(&mut b)
        .map_err(|_| TrainError::Checkpoint("truncated file".into()))?;
    Ok(b[0])
}
