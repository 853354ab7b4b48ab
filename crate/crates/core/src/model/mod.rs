//! Encoder-decoder transformer whose encoder input is the sum of token,
//! position and metadata feature embeddings.

mod checkpoint;
mod generate;
mod network;

pub use checkpoint::{read_checkpoint, read_tensor_file, write_checkpoint, write_tensor_file, FORMAT_VERSION};
pub use generate::{beam_search, generate, greedy_decode, log_softmax, ModelScorer, StepScorer, Strategy};
pub use network::{
    attention, decoder_logits, embed_inputs, encode, encode_on_tape, forward_loss, loss_and_grads,
    sliding_window_attention, Bound,
};

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metadata::{FeatureAssignment, FeatureKind};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("sequence of length {len} exceeds the limit of {max}")]
    Length { len: usize, max: usize },
    #[error("{kind} feature id {id} out of range for a table of {rows} rows")]
    FeatureBounds { kind: FeatureKind, id: usize, rows: usize },
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    Token { id: usize, vocab: usize },
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

fn default_dilation() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub window: usize,
    #[serde(default = "default_dilation")]
    pub dilation: usize,
    pub max_input_len: usize,
    pub max_output_len: usize,
    pub vocab_size: usize,
    pub feature_kind: FeatureKind,
    /// Hidden width of the feed-forward sublayers.
    pub ffn_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 2,
            d_model: 64,
            heads: 2,
            window: 16,
            dilation: 1,
            max_input_len: 128,
            max_output_len: 32,
            vocab_size: 1000,
            feature_kind: FeatureKind::Vanilla,
            ffn_dim: 256,
        }
    }
}

impl ModelConfig {
    /// Eight layers, window 256, inputs up to 1024 and outputs up to 256.
    pub fn reference(vocab_size: usize, feature_kind: FeatureKind) -> Self {
        ModelConfig {
            layers: 8,
            d_model: 768,
            heads: 12,
            window: 256,
            dilation: 1,
            max_input_len: 1024,
            max_output_len: 256,
            vocab_size,
            feature_kind,
            ffn_dim: 3072,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.d_model == 0 || self.heads == 0 {
            return bad("d_model and heads must be positive");
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return bad("d_model must be divisible by heads");
        }
        if self.window == 0 || self.dilation == 0 {
            return bad("window and dilation must be at least 1");
        }
        if self.vocab_size < 4 {
            return bad("vocab_size must cover the four special tokens");
        }
        if self.max_input_len == 0 || self.ffn_dim == 0 {
            return bad("max_input_len and ffn_dim must be positive");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

/// One training or evaluation item. `target` starts with bos and ends with
/// eos.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub features: FeatureAssignment,
    pub target: Vec<usize>,
}

/// Table name for a single-kind feature table.
pub fn feature_table_name(kind: FeatureKind) -> String {
    format!("feat.{}", kind.name())
}

/// Named parameter tensors in a fixed manifest order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

const LN_SUFFIXES: [&str; 2] = [".g", ".b"];

fn attention_names(prefix: &str) -> Vec<String> {
    ["wq", "wk", "wv", "wo"].iter().map(|w| format!("{prefix}.{w}")).collect()
}

/// Manifest of `(name, shape)` pairs for a config, in initialization order.
/// Shared parameters come first and never depend on the feature kind.
pub fn param_manifest(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = config.d_model;
    let f = config.ffn_dim;
    let v = config.vocab_size;
    let mut out: Vec<(String, Vec<usize>)> = Vec::new();
    let ln = |out: &mut Vec<(String, Vec<usize>)>, name: String| {
        for s in LN_SUFFIXES {
            out.push((format!("{name}{s}"), vec![d]));
        }
    };
    let ffn = |out: &mut Vec<(String, Vec<usize>)>, p: &str| {
        out.push((format!("{p}.ffn.w1"), vec![d, f]));
        out.push((format!("{p}.ffn.b1"), vec![f]));
        out.push((format!("{p}.ffn.w2"), vec![f, d]));
        out.push((format!("{p}.ffn.b2"), vec![d]));
    };

    out.push(("enc.tok".into(), vec![v, d]));
    out.push(("enc.pos".into(), vec![config.max_input_len, d]));
    for l in 0..config.layers {
        let p = format!("enc.{l}");
        ln(&mut out, format!("{p}.ln1"));
        for n in attention_names(&format!("{p}.self")) {
            out.push((n, vec![d, d]));
        }
        ln(&mut out, format!("{p}.ln2"));
        ffn(&mut out, &p);
    }
    if config.layers > 0 {
        ln(&mut out, "enc.ln".into());
    }
    out.push(("dec.tok".into(), vec![v, d]));
    out.push(("dec.pos".into(), vec![config.max_output_len.max(1), d]));
    for l in 0..config.layers {
        let p = format!("dec.{l}");
        ln(&mut out, format!("{p}.ln1"));
        for n in attention_names(&format!("{p}.self")) {
            out.push((n, vec![d, d]));
        }
        ln(&mut out, format!("{p}.ln2"));
        for n in attention_names(&format!("{p}.cross")) {
            out.push((n, vec![d, d]));
        }
        ln(&mut out, format!("{p}.ln3"));
        ffn(&mut out, &p);
    }
    ln(&mut out, "dec.ln".into());
    out.push(("out.w".into(), vec![d, v]));
    out.push(("out.b".into(), vec![v]));
    for kind in config.feature_kind.tables() {
        let rows = kind.cardinality().expect("single-kind table") + 1;
        out.push((feature_table_name(kind), vec![rows, d]));
    }
    out
}

impl ModelParams {
    /// Layer-norm gains start at 1, biases and feature tables at 0, and the
    /// remaining weights uniform in `±1/sqrt(fan_in)`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut named = Vec::new();
        for (name, shape) in param_manifest(config) {
            let len: usize = shape.iter().product();
            let data = if name.starts_with("feat.") {
                vec![0.0; len]
            } else if name.ends_with(".g") && shape.len() == 1 {
                vec![1.0; len]
            } else if shape.len() == 1 {
                vec![0.0; len]
            } else {
                let fan_in = if name.ends_with(".tok") || name.ends_with(".pos") {
                    shape[1]
                } else {
                    shape[0]
                };
                let bound = 1.0 / (fan_in as f64).sqrt();
                (0..len).map(|_| rng.gen_range(-bound..bound)).collect()
            };
            named.push((name, Tensor::new(shape, data)?));
        }
        Ok(Self::from_named(named))
    }

    pub fn from_named(named: Vec<(String, Tensor)>) -> Self {
        let mut names = Vec::with_capacity(named.len());
        let mut tensors = Vec::with_capacity(named.len());
        let mut index = HashMap::new();
        for (i, (n, t)) in named.into_iter().enumerate() {
            index.insert(n.clone(), i);
            names.push(n);
            tensors.push(t);
        }
        ModelParams { names, tensors, index }
    }

    /// Checks names and shapes against the manifest of `config`.
    pub fn check(&self, config: &ModelConfig) -> Result<()> {
        let manifest = param_manifest(config);
        if manifest.len() != self.names.len() {
            return Err(ModelError::Checkpoint(format!(
                "expected {} tensors, found {}",
                manifest.len(),
                self.names.len()
            )));
        }
        for (name, shape) in manifest {
            let t = self.get(&name)?;
            if t.shape() != shape.as_slice() {
                return Err(ModelError::Checkpoint(format!(
                    "{name}: expected shape {shape:?}, found {:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.index
            .get(name)
            .map(|&i| &self.tensors[i])
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.tensors[i]),
            None => Err(ModelError::MissingParam(name.to_string())),
        }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}
