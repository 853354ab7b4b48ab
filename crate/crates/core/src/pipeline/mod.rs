//! Experiment plumbing shared by the command line and the end-to-end tests:
//! manifests, data preparation, per-job training, decoding and reporting.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::case::{Case, Splits};
use crate::eval::{aggregate, render_table, score_corpus, EvalReport};
use crate::metadata::{FeatureKind, MetadataEncoder, MetadataError};
use crate::model::{generate, read_checkpoint, Example, ModelConfig, ModelError, Strategy};
use crate::synthgen::{read_corpus, SpecError};
use crate::text::{build_vocab, tokenize, TagLexicon, TextError, Vocab};
use crate::training::{
    checkpoint_path, read_run, render, train_seed, EpochMetrics, RunOptions, TrainConfig, TrainError, TrainRun,
    Validation,
};

/// Overrides the directory relative output paths resolve against.
pub const RUN_ROOT_ENV: &str = "METASUM_RUN_ROOT";

pub const VOCAB_FILE: &str = "vocab.txt";
pub const ENCODER_FILE: &str = "encoder.json";
pub const MANIFEST_ECHO_FILE: &str = "manifest.json";
pub const REPORT_FILE: &str = "report.json";
pub const TABLE_FILE: &str = "table.txt";
pub const CONFIG_ECHO_FILE: &str = "config.json";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("missing artifacts:\n  {}", .0.join("\n  "))]
    Missing(Vec<String>),
    #[error("{path}: {source}")]
    File { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Corpus(#[from] SpecError),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Metadata(#[from] MetadataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| PipelineError::File {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes through a temporary sibling so readers never see a partial file.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    fs::write(&tmp, bytes)?;
    fs::rename(tmp, path)?;
    Ok(())
}

/// Architecture shared by every feature kind of an experiment. Vocabulary
/// size comes from the prepared data.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSettings {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub window: usize,
    pub dilation: usize,
    pub max_input_len: usize,
    pub max_output_len: usize,
    pub ffn_dim: usize,
}

impl Default for ModelSettings {
    fn default() -> Self {
        let c = ModelConfig::default();
        ModelSettings {
            layers: c.layers,
            d_model: c.d_model,
            heads: c.heads,
            window: c.window,
            dilation: c.dilation,
            max_input_len: c.max_input_len,
            max_output_len: c.max_output_len,
            ffn_dim: c.ffn_dim,
        }
    }
}

impl ModelSettings {
    pub fn config(&self, vocab_size: usize, feature_kind: FeatureKind) -> ModelConfig {
        ModelConfig {
            layers: self.layers,
            d_model: self.d_model,
            heads: self.heads,
            window: self.window,
            dilation: self.dilation,
            max_input_len: self.max_input_len,
            max_output_len: self.max_output_len,
            vocab_size,
            feature_kind,
            ffn_dim: self.ffn_dim,
        }
    }
}

fn default_kinds() -> Vec<FeatureKind> {
    vec![FeatureKind::Vanilla]
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}

fn default_vocab_size() -> usize {
    512
}

fn default_strategy() -> Strategy {
    Strategy::Greedy
}

/// One experiment: a corpus, an architecture, and the feature kinds and
/// seeds to compare.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub experiment: String,
    pub corpus: PathBuf,
    /// JSON file with [`ModelSettings`]; replaces `model` when given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_config: Option<PathBuf>,
    /// JSON file with [`TrainConfig`]; replaces `train` when given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_config: Option<PathBuf>,
    #[serde(default)]
    pub model: ModelSettings,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_kinds")]
    pub kinds: Vec<FeatureKind>,
    /// Replaces `train.seeds` when given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seeds: Option<Vec<u64>>,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default = "default_vocab_size")]
    pub vocab_size: usize,
    /// Seed of the physician grouping shuffle.
    #[serde(default)]
    pub metadata_seed: u64,
    /// Decoding used on the test split.
    #[serde(default = "default_strategy")]
    pub strategy: Strategy,
}

impl RunManifest {
    /// A manifest with defaults for everything but the name and corpus.
    pub fn new(experiment: impl Into<String>, corpus: impl Into<PathBuf>) -> Self {
        RunManifest {
            experiment: experiment.into(),
            corpus: corpus.into(),
            model_config: None,
            train_config: None,
            model: ModelSettings::default(),
            train: TrainConfig::default(),
            kinds: default_kinds(),
            seeds: None,
            out_dir: default_out_dir(),
            vocab_size: default_vocab_size(),
            metadata_seed: 0,
            strategy: default_strategy(),
        }
    }

    /// Reads a manifest and resolves it. Relative corpus and config paths
    /// are taken from the manifest's directory; a relative output directory
    /// from `$METASUM_RUN_ROOT` when set, else the manifest's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let manifest: RunManifest = serde_json::from_slice(&read_file(path)?)
            .map_err(|e| PipelineError::Manifest(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let root = std::env::var_os(RUN_ROOT_ENV).map(PathBuf::from);
        manifest.resolve(base, root.as_deref())
    }

    /// Resolves relative paths, loads referenced config files, applies the
    /// seed override and puts Vanilla first among the kinds.
    pub fn resolve(mut self, base: &Path, run_root: Option<&Path>) -> Result<Self> {
        self.corpus = base.join(&self.corpus);
        if let Some(p) = &self.model_config {
            let p = base.join(p);
            self.model = serde_json::from_slice(&read_file(&p)?)
                .map_err(|e| PipelineError::Manifest(format!("{}: {e}", p.display())))?;
            self.model_config = Some(p);
        }
        if let Some(p) = &self.train_config {
            let p = base.join(p);
            self.train = serde_json::from_slice(&read_file(&p)?)
                .map_err(|e| PipelineError::Manifest(format!("{}: {e}", p.display())))?;
            self.train_config = Some(p);
        }
        if let Some(seeds) = self.seeds.take() {
            self.train.seeds = seeds;
        }
        self.out_dir = run_root.unwrap_or(base).join(&self.out_dir);
        let mut kinds = vec![FeatureKind::Vanilla];
        for k in &self.kinds {
            if !kinds.contains(k) {
                kinds.push(*k);
            }
        }
        self.kinds = kinds;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(PipelineError::Manifest(m.into()));
        if self.experiment.is_empty() || self.experiment.contains(['/', '\\']) {
            return bad("experiment name must be a non-empty single path component");
        }
        if self.train.seeds.is_empty() {
            return bad("at least one seed is required");
        }
        if self.model.max_output_len < 2 {
            return bad("max_output_len must leave room for bos and eos");
        }
        if self.model.max_input_len < 1 {
            return bad("max_input_len must be positive");
        }
        if !self.kinds.contains(&FeatureKind::Vanilla) {
            return bad("vanilla baseline missing");
        }
        Ok(())
    }

    pub fn experiment_dir(&self) -> PathBuf {
        self.out_dir.join(&self.experiment)
    }

    pub fn run_dir(&self, kind: FeatureKind, seed: u64) -> PathBuf {
        self.out_dir
            .join(format!("{}-{}", self.experiment, kind.name()))
            .join(format!("seed{seed}"))
    }

    /// Every (kind, seed) pair, kinds outermost.
    pub fn jobs(&self) -> Vec<(FeatureKind, u64)> {
        self.kinds
            .iter()
            .flat_map(|&k| self.train.seeds.iter().map(move |&s| (k, s)))
            .collect()
    }
}

/// Corpus with its vocabulary and metadata encoder, both fitted on the
/// training split.
pub struct Prepared {
    pub cases: Vec<Case>,
    pub splits: Splits,
    pub lexicon: TagLexicon,
    pub vocab: Vocab,
    pub encoder: MetadataEncoder,
    index: HashMap<u32, usize>,
}

impl Prepared {
    pub fn split(&self, ids: &[u32]) -> Result<Vec<&Case>> {
        ids.iter()
            .map(|id| {
                self.index
                    .get(id)
                    .map(|&i| &self.cases[i])
                    .ok_or_else(|| PipelineError::Manifest(format!("split refers to unknown case {id}")))
            })
            .collect()
    }

    pub fn examples(&self, ids: &[u32], settings: &ModelSettings) -> Result<Vec<Example>> {
        Ok(self
            .split(ids)?
            .into_iter()
            .map(|c| make_example(c, &self.vocab, &self.encoder, settings))
            .collect())
    }
}

/// Source truncated to leave room for eos; target framed by bos and eos.
pub fn make_example(case: &Case, vocab: &Vocab, encoder: &MetadataEncoder, settings: &ModelSettings) -> Example {
    let mut tokens = tokenize(&case.source, vocab);
    tokens.truncate(settings.max_input_len - 1);
    tokens.push(Vocab::EOS);
    let mut body = tokenize(&case.summary, vocab);
    body.truncate(settings.max_output_len - 2);
    let mut target = Vec::with_capacity(body.len() + 2);
    target.push(Vocab::BOS);
    target.extend(body);
    target.push(Vocab::EOS);
    Example {
        tokens,
        features: encoder.resolve(case),
        target,
    }
}

pub fn prepare(manifest: &RunManifest) -> Result<Prepared> {
    let files = read_corpus(&manifest.corpus)?;
    let index: HashMap<u32, usize> = files.cases.iter().enumerate().map(|(i, c)| (c.case_id, i)).collect();
    let mut train = Vec::with_capacity(files.splits.train.len());
    for id in &files.splits.train {
        let &i = index
            .get(id)
            .ok_or_else(|| PipelineError::Manifest(format!("split refers to unknown case {id}")))?;
        train.push(files.cases[i].clone());
    }
    if train.is_empty() {
        return Err(PipelineError::Manifest("corpus has an empty training split".into()));
    }
    let texts: Vec<&str> = train.iter().flat_map(|c| [c.source.as_str(), c.summary.as_str()]).collect();
    Ok(Prepared {
        vocab: build_vocab(&texts, manifest.vocab_size)?,
        encoder: MetadataEncoder::fit(&train, files.diseases, manifest.metadata_seed)?,
        cases: files.cases,
        splits: files.splits,
        lexicon: files.lexicon,
        index,
    })
}

/// Writes the vocabulary, encoder and effective manifest into the
/// experiment directory.
pub fn write_shared(manifest: &RunManifest, prepared: &Prepared) -> Result<()> {
    let dir = manifest.experiment_dir();
    fs::create_dir_all(&dir)?;
    let mut vocab = Vec::new();
    prepared.vocab.write_to(&mut vocab)?;
    write_atomic(&dir.join(VOCAB_FILE), &vocab)?;
    write_atomic(&dir.join(ENCODER_FILE), serde_json::to_string_pretty(&prepared.encoder)?.as_bytes())?;
    write_atomic(&dir.join(MANIFEST_ECHO_FILE), serde_json::to_string_pretty(manifest)?.as_bytes())?;
    Ok(())
}

#[derive(Serialize)]
struct ConfigEcho<'a> {
    model: &'a ModelConfig,
    train: &'a TrainConfig,
    seed: u64,
}

/// Trains one (kind, seed) job into its run directory.
pub fn train_job(
    manifest: &RunManifest,
    prepared: &Prepared,
    kind: FeatureKind,
    seed: u64,
    resume: bool,
    on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainRun> {
    let config = manifest.model.config(prepared.vocab.len(), kind);
    let train = prepared.examples(&prepared.splits.train, &manifest.model)?;
    let valid_ex = prepared.examples(&prepared.splits.valid, &manifest.model)?;
    let valid = Validation {
        examples: &valid_ex,
        vocab: &prepared.vocab,
        lexicon: &prepared.lexicon,
    };
    let dir = manifest.run_dir(kind, seed);
    fs::create_dir_all(&dir)?;
    let echo = ConfigEcho {
        model: &config,
        train: &manifest.train,
        seed,
    };
    write_atomic(&dir.join(CONFIG_ECHO_FILE), serde_json::to_string_pretty(&echo)?.as_bytes())?;
    let options = RunOptions {
        dir: Some(dir),
        resume,
    };
    Ok(train_seed(&config, &train, &valid, &manifest.train, seed, &options, on_epoch)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub case_id: u32,
    pub summary: String,
}

/// Jobs whose finished run or selected checkpoint is absent.
pub fn missing_artifacts(manifest: &RunManifest) -> Vec<String> {
    let mut gaps = Vec::new();
    for (kind, seed) in manifest.jobs() {
        let dir = manifest.run_dir(kind, seed);
        match read_run(&dir) {
            Ok(run) => {
                let ckpt = checkpoint_path(&dir, run.selected_epoch);
                if !ckpt.exists() {
                    gaps.push(format!("{kind} seed {seed}: {}", ckpt.display()));
                }
            }
            Err(_) => gaps.push(format!("{kind} seed {seed}: no finished run in {}", dir.display())),
        }
    }
    gaps
}

/// Decodes the test split with the selected checkpoint of one job and
/// writes the predictions next to it.
pub fn generate_job(
    manifest: &RunManifest,
    prepared: &Prepared,
    kind: FeatureKind,
    seed: u64,
) -> Result<Vec<Prediction>> {
    let dir = manifest.run_dir(kind, seed);
    let run = read_run(&dir).map_err(|_| PipelineError::Missing(vec![format!("{kind} seed {seed}: no finished run")]))?;
    let ckpt = checkpoint_path(&dir, run.selected_epoch);
    if !ckpt.exists() {
        return Err(PipelineError::Missing(vec![format!("{kind} seed {seed}: {}", ckpt.display())]));
    }
    let (config, params) = read_checkpoint(&ckpt)?;
    let settings = ModelSettings {
        max_input_len: config.max_input_len,
        max_output_len: config.max_output_len,
        ..manifest.model.clone()
    };
    let mut out = Vec::new();
    for case in prepared.split(&prepared.splits.test)? {
        let ex = make_example(case, &prepared.vocab, &prepared.encoder, &settings);
        let ids = generate(&ex.tokens, &ex.features, &params, &config, manifest.strategy)?;
        out.push(Prediction {
            case_id: case.case_id,
            summary: render(&ids, &prepared.vocab),
        });
    }
    let mut buf = Vec::new();
    for p in &out {
        writeln!(buf, "{}", serde_json::to_string(p)?)?;
    }
    write_atomic(&dir.join(PREDICTIONS_FILE), &buf)?;
    Ok(out)
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let file = File::open(path).map_err(|source| PipelineError::File {
        path: path.to_path_buf(),
        source,
    })?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Scores predictions against the gold summaries of the same cases.
pub fn score_predictions(prepared: &Prepared, predictions: &[Prediction]) -> Result<EvalReport> {
    let pairs = predictions
        .iter()
        .map(|p| {
            let gold = prepared.split(&[p.case_id])?[0];
            Ok((p.summary.as_str(), gold.summary.as_str()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(score_corpus(&pairs, &prepared.lexicon))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KindReport {
    pub kind: FeatureKind,
    pub label: String,
    /// Seed mean, with per-seed reports under `seeds`.
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub experiment: String,
    pub rows: Vec<KindReport>,
}

impl ExperimentReport {
    pub fn row(&self, kind: FeatureKind) -> Option<&EvalReport> {
        self.rows.iter().find(|r| r.kind == kind).map(|r| &r.report)
    }

    pub fn table(&self) -> String {
        let rows: Vec<(String, EvalReport)> = self.rows.iter().map(|r| (r.label.clone(), r.report.clone())).collect();
        render_table(&rows)
    }
}

/// Decodes and scores every job, then writes the report and table into the
/// experiment directory. Fails before decoding anything if a run is missing.
pub fn evaluate(manifest: &RunManifest, prepared: &Prepared) -> Result<ExperimentReport> {
    let gaps = missing_artifacts(manifest);
    if !gaps.is_empty() {
        return Err(PipelineError::Missing(gaps));
    }
    let mut rows = Vec::new();
    for &kind in &manifest.kinds {
        let mut runs = Vec::new();
        for &seed in &manifest.train.seeds {
            let predictions = generate_job(manifest, prepared, kind, seed)?;
            let mut report = score_predictions(prepared, &predictions)?;
            report.seed = Some(seed);
            runs.push(report);
        }
        rows.push(KindReport {
            kind,
            label: kind.label().to_string(),
            report: aggregate(&runs),
        });
    }
    let report = ExperimentReport {
        experiment: manifest.experiment.clone(),
        rows,
    };
    write_report(manifest, &report)?;
    Ok(report)
}

pub fn write_report(manifest: &RunManifest, report: &ExperimentReport) -> Result<()> {
    let dir = manifest.experiment_dir();
    fs::create_dir_all(&dir)?;
    write_atomic(&dir.join(REPORT_FILE), serde_json::to_string_pretty(report)?.as_bytes())?;
    write_atomic(&dir.join(TABLE_FILE), report.table().as_bytes())?;
    Ok(())
}

pub fn read_report(manifest: &RunManifest) -> Result<ExperimentReport> {
    Ok(serde_json::from_slice(&read_file(&manifest.experiment_dir().join(REPORT_FILE))?)?)
}

/// Convenience for callers that want the whole experiment in one process.
pub fn run_experiment(manifest: &RunManifest, mut log: impl FnMut(FeatureKind, u64, &EpochMetrics)) -> Result<ExperimentReport> {
    let prepared = prepare(manifest)?;
    write_shared(manifest, &prepared)?;
    for (kind, seed) in manifest.jobs() {
        train_job(manifest, &prepared, kind, seed, false, |m| log(kind, seed, m))?;
    }
    evaluate(manifest, &prepared)
}
