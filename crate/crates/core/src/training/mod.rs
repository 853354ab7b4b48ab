//! Adam with linear warmup, per-seed training runs and best-epoch selection
//! on validation ROUGE-1.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::eval::{eval_words, rouge_n};
use crate::model::{
    generate, loss_and_grads, read_checkpoint, read_tensor_file, write_checkpoint, write_tensor_file, Example,
    ModelConfig, ModelError, ModelParams, Strategy,
};
use crate::tensor::Tensor;
use crate::text::{detokenize, TagLexicon, Vocab};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss {loss} at step {step} (lr {lr})")]
    NonFinite { step: u64, lr: f64, loss: f64 },
    #[error("invalid training setup: {0}")]
    Setup(String),
    #[error("cannot resume: {0}")]
    Resume(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub max_epochs: usize,
    pub seeds: Vec<u64>,
    /// Global gradient-norm clip; off when `None`.
    pub max_grad_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            base_lr: 3e-3,
            warmup_steps: 50,
            max_epochs: 10,
            seeds: vec![0, 1, 2],
            max_grad_norm: None,
        }
    }
}

impl TrainConfig {
    /// Batch 4, learning rate 3e-5, 1000 warmup steps.
    pub fn reference() -> Self {
        TrainConfig {
            batch_size: 4,
            base_lr: 3e-5,
            warmup_steps: 1000,
            ..TrainConfig::default()
        }
    }
}

/// Linear warmup to `base_lr` over `warmup_steps`, then constant.
pub fn lr_at(step: u64, base_lr: f64, warmup_steps: u64) -> f64 {
    if warmup_steps == 0 {
        return base_lr;
    }
    base_lr * (step as f64 / warmup_steps as f64).min(1.0)
}

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        AdamState {
            step: 0,
            m: params.iter().map(|t| vec![0.0; t.len()]).collect(),
            v: params.iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut [Tensor], grads: &[Vec<f64>], state: &mut AdamState, lr: f64) {
    assert_eq!(params.len(), grads.len(), "one gradient buffer per parameter");
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        for (((x, &g), m), v) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = BETA1 * *m + (1.0 - BETA1) * g;
            *v = BETA2 * *v + (1.0 - BETA2) * g * g;
            *x -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
        }
    }
}

fn clip(grads: &mut [Vec<f64>], max_norm: f64) {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
}

/// 1-based epoch with the highest score; the earliest wins ties.
pub fn select_best_epoch(scores: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &s) in scores.iter().enumerate() {
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    best.map(|(i, _)| i + 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_rouge1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRun {
    pub seed: u64,
    pub epochs: Vec<EpochMetrics>,
    pub selected_epoch: usize,
}

impl TrainRun {
    pub fn selected(&self) -> &EpochMetrics {
        &self.epochs[self.selected_epoch - 1]
    }
}

/// Validation data and what is needed to score generations as words.
pub struct Validation<'a> {
    pub examples: &'a [Example],
    pub vocab: &'a Vocab,
    pub lexicon: &'a TagLexicon,
}

/// Text of generated ids for scoring; unknown tokens are dropped.
pub fn render(ids: &[usize], vocab: &Vocab) -> String {
    let known: Vec<usize> = ids.iter().copied().filter(|&t| t != Vocab::UNK).collect();
    detokenize(&known, vocab)
}

/// Mean ROUGE-1 F1 of greedy generations against the gold targets.
pub fn validation_rouge1(params: &ModelParams, config: &ModelConfig, valid: &Validation<'_>) -> Result<f64> {
    if valid.examples.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for ex in valid.examples {
        let out = generate(&ex.tokens, &ex.features, params, config, Strategy::Greedy)?;
        let cand = eval_words(&render(&out, valid.vocab), valid.lexicon);
        let gold = eval_words(&render(&ex.target, valid.vocab), valid.lexicon);
        total += rouge_n(&cand, &gold, 1).f1;
    }
    Ok(total / valid.examples.len() as f64)
}

pub fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("epoch{epoch}.ckpt"))
}

const METRICS_FILE: &str = "metrics.jsonl";
const OPTIMIZER_FILE: &str = "optimizer.state";
const RUN_FILE: &str = "run.json";

fn write_optimizer(dir: &Path, state: &AdamState, epoch: usize) -> Result<()> {
    let mut extra = Map::new();
    extra.insert("step".into(), Value::from(state.step));
    extra.insert("epoch".into(), Value::from(epoch));
    let tensors: Vec<(String, Tensor)> = state
        .m
        .iter()
        .chain(&state.v)
        .enumerate()
        .map(|(i, x)| Ok((format!("moment{i}"), Tensor::new(vec![x.len()], x.clone()).map_err(ModelError::from)?)))
        .collect::<Result<_>>()?;
    let tmp = dir.join(format!("{OPTIMIZER_FILE}.tmp"));
    write_tensor_file(
        BufWriter::new(File::create(&tmp)?),
        extra,
        tensors.iter().map(|(n, t)| (n.as_str(), t)),
    )?;
    fs::rename(tmp, dir.join(OPTIMIZER_FILE))?;
    Ok(())
}

fn read_optimizer(dir: &Path) -> Result<(AdamState, usize)> {
    let (extra, tensors) = read_tensor_file(BufReader::new(File::open(dir.join(OPTIMIZER_FILE))?))?;
    let field = |k: &str| {
        extra
            .get(k)
            .and_then(Value::as_u64)
            .ok_or_else(|| TrainError::Resume(format!("optimizer state lacks {k}")))
    };
    let step = field("step")?;
    let epoch = field("epoch")? as usize;
    let mut moments: Vec<Vec<f64>> = tensors.into_iter().map(|(_, t)| t.into_data()).collect();
    let v = moments.split_off(moments.len() / 2);
    Ok((AdamState { step, m: moments, v }, epoch))
}

/// The first `limit` epochs of `metrics.jsonl`; anything after them, such as
/// a line cut short by an interruption, is ignored.
fn read_metrics(dir: &Path, limit: usize) -> Result<Vec<EpochMetrics>> {
    let path = dir.join(METRICS_FILE);
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for line in BufReader::new(File::open(path)?).lines().take(limit) {
        out.push(serde_json::from_str(&line?)?);
    }
    Ok(out)
}

fn write_metrics(dir: &Path, epochs: &[EpochMetrics]) -> Result<()> {
    let mut buf = Vec::new();
    for m in epochs {
        writeln!(buf, "{}", serde_json::to_string(m)?)?;
    }
    fs::write(dir.join(METRICS_FILE), buf)?;
    Ok(())
}

/// Where and how a run persists its state.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Seed directory receiving checkpoints and metrics; nothing is written
    /// when `None`.
    pub dir: Option<PathBuf>,
    /// Continue from the last completed epoch found in `dir`.
    pub resume: bool,
}

/// Trains one seed. Batches are drawn from a per-epoch shuffle; the batch
/// gradient is the mean over its cases.
pub fn train_seed(
    config: &ModelConfig,
    train: &[Example],
    valid: &Validation<'_>,
    tc: &TrainConfig,
    seed: u64,
    options: &RunOptions,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainRun> {
    if train.is_empty() {
        return Err(TrainError::Setup("empty training split".into()));
    }
    if tc.batch_size == 0 || tc.max_epochs == 0 {
        return Err(TrainError::Setup("batch_size and max_epochs must be positive".into()));
    }
    let mut params = ModelParams::init(config, seed)?;
    let mut state = AdamState::new(params.tensors());
    let mut epochs = Vec::new();

    if let Some(dir) = &options.dir {
        fs::create_dir_all(dir)?;
        if options.resume && dir.join(OPTIMIZER_FILE).exists() {
            let (s, done) = read_optimizer(dir)?;
            let (c, p) = read_checkpoint(&checkpoint_path(dir, done))?;
            if &c != config {
                return Err(TrainError::Resume("checkpoint config differs from requested config".into()));
            }
            epochs = read_metrics(dir, done)?;
            if epochs.len() != done || s.m.len() != p.len() {
                return Err(TrainError::Resume(format!("inconsistent state after epoch {done}")));
            }
            write_metrics(dir, &epochs)?;
            params = p;
            state = s;
        } else {
            for entry in fs::read_dir(dir)? {
                let path = entry?.path();
                let stale = path.extension().is_some_and(|e| e == "ckpt")
                    || path.file_name().is_some_and(|n| n == METRICS_FILE || n == OPTIMIZER_FILE || n == RUN_FILE);
                if stale {
                    fs::remove_file(path)?;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in epochs.len() + 1..=tc.max_epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        let mut batch = Vec::with_capacity(tc.batch_size);
        for chunk in order.chunks(tc.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| train[i].clone()));
            let lr = lr_at(state.step + 1, tc.base_lr, tc.warmup_steps);
            let (loss, mut grads) = loss_and_grads(&batch, &params, config)?;
            if !loss.is_finite() {
                return Err(TrainError::NonFinite {
                    step: state.step + 1,
                    lr,
                    loss,
                });
            }
            if let Some(max) = tc.max_grad_norm {
                clip(&mut grads, max);
            }
            adam_step(params.tensors_mut(), &grads, &mut state, lr);
            loss_sum += loss;
            batches += 1;
        }
        let metrics = EpochMetrics {
            epoch,
            train_loss: loss_sum / batches as f64,
            valid_rouge1: validation_rouge1(&params, config, valid)?,
        };
        if let Some(dir) = &options.dir {
            write_checkpoint(&checkpoint_path(dir, epoch), config, &params)?;
            let mut f = OpenOptions::new().create(true).append(true).open(dir.join(METRICS_FILE))?;
            writeln!(f, "{}", serde_json::to_string(&metrics)?)?;
            write_optimizer(dir, &state, epoch)?;
        }
        on_epoch(&metrics);
        epochs.push(metrics);
    }

    let scores: Vec<f64> = epochs.iter().map(|e| e.valid_rouge1).collect();
    let run = TrainRun {
        seed,
        selected_epoch: select_best_epoch(&scores).expect("at least one epoch"),
        epochs,
    };
    if let Some(dir) = &options.dir {
        fs::write(dir.join(RUN_FILE), serde_json::to_string_pretty(&run)?)?;
    }
    Ok(run)
}

/// Reads the summary a finished seed directory carries.
pub fn read_run(dir: &Path) -> Result<TrainRun> {
    Ok(serde_json::from_slice(&fs::read(dir.join(RUN_FILE))?)?)
}
