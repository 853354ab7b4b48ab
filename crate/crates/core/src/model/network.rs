use crate::metadata::{FeatureAssignment, FeatureKind};
use crate::tensor::{Mask, Tape, Tensor, Var};
use crate::text::Vocab;

use super::{feature_table_name, Example, ModelConfig, ModelError, ModelParams, Result};

const LN_EPS: f64 = 1e-5;

/// Parameters recorded on a tape, addressable by name.
pub struct Bound<'a> {
    params: &'a ModelParams,
    vars: Vec<Var>,
}

impl<'a> Bound<'a> {
    pub fn new(tape: &mut Tape<'a>, params: &'a ModelParams) -> Self {
        let vars = params.tensors().iter().map(|t| tape.param(t)).collect();
        Bound { params, vars }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.params
            .position(name)
            .map(|i| self.vars[i])
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

fn check_tokens(tokens: &[usize], max: usize, vocab: usize) -> Result<()> {
    if tokens.is_empty() {
        return Err(ModelError::Config("empty input sequence".into()));
    }
    if tokens.len() > max {
        return Err(ModelError::Length {
            len: tokens.len(),
            max,
        });
    }
    if let Some(&id) = tokens.iter().find(|&&t| t >= vocab) {
        return Err(ModelError::Token { id, vocab });
    }
    Ok(())
}

fn check_features(features: &FeatureAssignment, kind: FeatureKind) -> Result<()> {
    for k in kind.tables() {
        let rows = k.cardinality().expect("single-kind table") + 1;
        let id = features.id(k);
        if id >= rows {
            return Err(ModelError::FeatureBounds { kind: k, id, rows });
        }
    }
    Ok(())
}

fn positions(n: usize) -> Vec<usize> {
    (0..n).collect()
}

/// `E_T[tokens] + E_P[0..n] + sum of the case's feature rows` on a tape.
pub fn embed_on_tape(
    tape: &mut Tape<'_>,
    b: &Bound<'_>,
    tokens: &[usize],
    features: &FeatureAssignment,
    config: &ModelConfig,
) -> Result<Var> {
    check_tokens(tokens, config.max_input_len, config.vocab_size)?;
    check_features(features, config.feature_kind)?;
    let tok = tape.gather(b.var("enc.tok")?, tokens)?;
    let pos = tape.gather(b.var("enc.pos")?, &positions(tokens.len()))?;
    let mut x = tape.add(tok, pos)?;
    for kind in config.feature_kind.tables() {
        let row = tape.gather(b.var(&feature_table_name(kind))?, &[features.id(kind)])?;
        x = tape.add_row(x, row)?;
    }
    Ok(x)
}

pub fn embed_inputs(
    tokens: &[usize],
    features: &FeatureAssignment,
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let b = Bound::new(&mut tape, params);
    let x = embed_on_tape(&mut tape, &b, tokens, features, config)?;
    Ok(tape.tensor(x))
}

/// Scaled dot-product attention for one head.
pub fn attention(tape: &mut Tape<'_>, q: Var, k: Var, v: Var, mask: Option<&Mask>) -> Result<Var> {
    let dh = tape.shape(q)[1];
    let scores = tape.matmul_t(q, k)?;
    let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
    let weights = tape.softmax_rows(scores, mask)?;
    Ok(tape.matmul(weights, v)?)
}

fn window_mask(n: usize, window: usize, dilation: usize) -> Option<Mask> {
    let reach = (window / 2) * dilation;
    if dilation == 1 && reach + 1 >= n {
        None
    } else {
        Some(Mask::sliding_window(n, window, dilation))
    }
}

/// Single-head attention where position `p` only sees keys `j` with
/// `|p - j| <= (window / 2) * dilation` and `p - j` divisible by `dilation`.
pub fn sliding_window_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    window: usize,
    dilation: usize,
) -> Result<Tensor> {
    if window == 0 || dilation == 0 {
        return Err(ModelError::Config("window and dilation must be at least 1".into()));
    }
    let mut tape = Tape::new();
    let (q, k, v) = (tape.param(q), tape.param(k), tape.param(v));
    let mask = Mask::sliding_window(tape.shape(q)[0], window, dilation);
    if mask.cols() != tape.shape(k)[0] {
        return Err(ModelError::Config("window attention needs as many keys as queries".into()));
    }
    let out = attention(&mut tape, q, k, v, Some(&mask))?;
    Ok(tape.tensor(out))
}

#[allow(clippy::too_many_arguments)]
fn multi_head(
    tape: &mut Tape<'_>,
    b: &Bound<'_>,
    prefix: &str,
    x_q: Var,
    x_kv: Var,
    heads: usize,
    mask: Option<&Mask>,
) -> Result<Var> {
    let q = tape.matmul(x_q, b.var(&format!("{prefix}.wq"))?)?;
    let k = tape.matmul(x_kv, b.var(&format!("{prefix}.wk"))?)?;
    let v = tape.matmul(x_kv, b.var(&format!("{prefix}.wv"))?)?;
    let d = tape.shape(q)[1];
    let dh = d / heads;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        outs.push(attention(tape, qh, kh, vh, mask)?);
    }
    let joined = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
    Ok(tape.matmul(joined, b.var(&format!("{prefix}.wo"))?)?)
}

fn norm(tape: &mut Tape<'_>, b: &Bound<'_>, name: &str, x: Var) -> Result<Var> {
    let g = b.var(&format!("{name}.g"))?;
    let bias = b.var(&format!("{name}.b"))?;
    Ok(tape.layer_norm(x, g, bias, LN_EPS)?)
}

fn feed_forward(tape: &mut Tape<'_>, b: &Bound<'_>, prefix: &str, x: Var) -> Result<Var> {
    let h = tape.matmul(x, b.var(&format!("{prefix}.ffn.w1"))?)?;
    let h = tape.add_row(h, b.var(&format!("{prefix}.ffn.b1"))?)?;
    let h = tape.gelu(h);
    let h = tape.matmul(h, b.var(&format!("{prefix}.ffn.w2"))?)?;
    Ok(tape.add_row(h, b.var(&format!("{prefix}.ffn.b2"))?)?)
}

/// Encoder memory on a tape. Pre-norm blocks; a final layer norm follows
/// the last block.
pub fn encode_on_tape(
    tape: &mut Tape<'_>,
    b: &Bound<'_>,
    tokens: &[usize],
    features: &FeatureAssignment,
    config: &ModelConfig,
) -> Result<Var> {
    let mut x = embed_on_tape(tape, b, tokens, features, config)?;
    let mask = window_mask(tokens.len(), config.window, config.dilation);
    for l in 0..config.layers {
        let p = format!("enc.{l}");
        let h = norm(tape, b, &format!("{p}.ln1"), x)?;
        let a = multi_head(tape, b, &format!("{p}.self"), h, h, config.heads, mask.as_ref())?;
        x = tape.add(x, a)?;
        let h = norm(tape, b, &format!("{p}.ln2"), x)?;
        let f = feed_forward(tape, b, &p, h)?;
        x = tape.add(x, f)?;
    }
    if config.layers > 0 {
        x = norm(tape, b, "enc.ln", x)?;
    }
    Ok(x)
}

pub fn encode(
    tokens: &[usize],
    features: &FeatureAssignment,
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let b = Bound::new(&mut tape, params);
    let x = encode_on_tape(&mut tape, &b, tokens, features, config)?;
    Ok(tape.tensor(x))
}

/// Next-token logits `[inputs.len(), vocab]` for decoder inputs (bos first)
/// attending causally to themselves and fully to `memory`.
pub fn decoder_logits(
    tape: &mut Tape<'_>,
    b: &Bound<'_>,
    memory: Var,
    inputs: &[usize],
    config: &ModelConfig,
) -> Result<Var> {
    check_tokens(inputs, config.max_output_len, config.vocab_size)?;
    let tok = tape.gather(b.var("dec.tok")?, inputs)?;
    let pos = tape.gather(b.var("dec.pos")?, &positions(inputs.len()))?;
    let mut x = tape.add(tok, pos)?;
    let causal = Mask::causal(inputs.len());
    for l in 0..config.layers {
        let p = format!("dec.{l}");
        let h = norm(tape, b, &format!("{p}.ln1"), x)?;
        let a = multi_head(tape, b, &format!("{p}.self"), h, h, config.heads, Some(&causal))?;
        x = tape.add(x, a)?;
        let h = norm(tape, b, &format!("{p}.ln2"), x)?;
        let c = multi_head(tape, b, &format!("{p}.cross"), h, memory, config.heads, None)?;
        x = tape.add(x, c)?;
        let h = norm(tape, b, &format!("{p}.ln3"), x)?;
        let f = feed_forward(tape, b, &p, h)?;
        x = tape.add(x, f)?;
    }
    let x = norm(tape, b, "dec.ln", x)?;
    let logits = tape.matmul(x, b.var("out.w")?)?;
    Ok(tape.add_row(logits, b.var("out.b")?)?)
}

fn check_target(target: &[usize], config: &ModelConfig) -> Result<()> {
    if target.len() < 2 || target[0] != Vocab::BOS || target.last() != Some(&Vocab::EOS) {
        return Err(ModelError::Config("target must start with bos and end with eos".into()));
    }
    if target.len() > config.max_output_len {
        return Err(ModelError::Length {
            len: target.len(),
            max: config.max_output_len,
        });
    }
    Ok(())
}

fn example_loss<'a>(tape: &mut Tape<'a>, b: &Bound<'a>, ex: &Example, config: &ModelConfig) -> Result<Var> {
    check_target(&ex.target, config)?;
    let memory = encode_on_tape(tape, b, &ex.tokens, &ex.features, config)?;
    let n = ex.target.len() - 1;
    let logits = decoder_logits(tape, b, memory, &ex.target[..n], config)?;
    Ok(tape.cross_entropy(logits, &ex.target[1..], Vocab::PAD)?)
}

/// Teacher-forced cross entropy, averaged over target positions and then
/// over the batch.
pub fn forward_loss(batch: &[Example], params: &ModelParams, config: &ModelConfig) -> Result<f64> {
    if batch.is_empty() {
        return Err(ModelError::Config("empty batch".into()));
    }
    let mut total = 0.0;
    for ex in batch {
        let mut tape = Tape::new();
        let b = Bound::new(&mut tape, params);
        let loss = example_loss(&mut tape, &b, ex, config)?;
        total += tape.value(loss)[0];
    }
    Ok(total / batch.len() as f64)
}

/// Batch loss and its gradient, one buffer per parameter in manifest order.
pub fn loss_and_grads(
    batch: &[Example],
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<(f64, Vec<Vec<f64>>)> {
    if batch.is_empty() {
        return Err(ModelError::Config("empty batch".into()));
    }
    let mut grads: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    for ex in batch {
        let mut tape = Tape::new();
        let b = Bound::new(&mut tape, params);
        let loss = example_loss(&mut tape, &b, ex, config)?;
        total += tape.value(loss)[0];
        let g = tape.backward(loss)?;
        for (acc, var) in grads.iter_mut().zip(b.vars()) {
            if let Some(gv) = g.get(*var) {
                acc.iter_mut().zip(gv).for_each(|(a, x)| *a += scale * x);
            }
        }
    }
    Ok((total * scale, grads))
}
