use serde::{Deserialize, Serialize};

use crate::metadata::FeatureAssignment;
use crate::tensor::{Tape, Tensor};
use crate::text::Vocab;

use super::network::{decoder_logits, encode, Bound};
use super::{ModelConfig, ModelParams, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Greedy,
    Beam(usize),
}

/// Log-probabilities of the next token given the tokens generated so far
/// (bos excluded).
pub trait StepScorer {
    fn vocab_size(&self) -> usize;
    fn log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>>;
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    logits.iter().map(|x| x - lse).collect()
}

/// Scores continuations with a model against a fixed encoder memory.
pub struct ModelScorer<'a> {
    params: &'a ModelParams,
    config: &'a ModelConfig,
    memory: Tensor,
}

impl<'a> ModelScorer<'a> {
    pub fn new(
        tokens: &[usize],
        features: &FeatureAssignment,
        params: &'a ModelParams,
        config: &'a ModelConfig,
    ) -> Result<Self> {
        let memory = encode(tokens, features, params, config)?;
        Ok(ModelScorer { params, config, memory })
    }
}

impl StepScorer for ModelScorer<'_> {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let b = Bound::new(&mut tape, self.params);
        let memory = tape.constant(self.memory.clone());
        let mut inputs = Vec::with_capacity(prefix.len() + 1);
        inputs.push(Vocab::BOS);
        inputs.extend_from_slice(prefix);
        let logits = decoder_logits(&mut tape, &b, memory, &inputs, self.config)?;
        let v = self.config.vocab_size;
        let all = tape.value(logits);
        Ok(log_softmax(&all[all.len() - v..]))
    }
}

fn argmax_lowest(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Picks the most likely token at each step, preferring the lowest id on
/// ties. Emits at most `max_steps` tokens; eos ends decoding and is not
/// returned.
pub fn greedy_decode(scorer: &mut dyn StepScorer, max_steps: usize) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    while out.len() < max_steps {
        let lp = scorer.log_probs(&out)?;
        let next = argmax_lowest(&lp);
        if next == Vocab::EOS {
            break;
        }
        out.push(next);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
struct Hyp {
    tokens: Vec<usize>,
    score: f64,
}

/// Keeps the `width` best partial hypotheses by total log-probability.
/// Finished hypotheses compete on log-probability divided by their length,
/// eos included.
pub fn beam_search(scorer: &mut dyn StepScorer, width: usize, max_steps: usize) -> Result<Vec<usize>> {
    let width = width.max(1);
    let mut live = vec![Hyp {
        tokens: Vec::new(),
        score: 0.0,
    }];
    let mut finished: Vec<(Vec<usize>, f64)> = Vec::new();
    for _ in 0..max_steps {
        let mut cands: Vec<(usize, usize, f64)> = Vec::new();
        for (h, hyp) in live.iter().enumerate() {
            let lp = scorer.log_probs(&hyp.tokens)?;
            cands.extend(lp.iter().enumerate().map(|(t, &l)| (h, t, hyp.score + l)));
        }
        // stable: ties keep beam order, then lowest token id
        cands.sort_by(|a, b| b.2.total_cmp(&a.2));
        let mut next = Vec::with_capacity(width);
        for (h, t, score) in cands {
            if next.len() == width {
                break;
            }
            let mut tokens = live[h].tokens.clone();
            if t == Vocab::EOS {
                let len = (tokens.len() + 1) as f64;
                finished.push((tokens, score / len));
                if finished.len() >= width {
                    break;
                }
            } else {
                tokens.push(t);
                next.push(Hyp { tokens, score });
            }
        }
        if finished.len() >= width || next.is_empty() {
            live = next;
            break;
        }
        live = next;
    }
    for hyp in live {
        let len = hyp.tokens.len().max(1) as f64;
        finished.push((hyp.tokens, hyp.score / len));
    }
    let mut best: Option<(Vec<usize>, f64)> = None;
    for (tokens, score) in finished {
        if best.as_ref().is_none_or(|(_, s)| score > *s) {
            best = Some((tokens, score));
        }
    }
    Ok(best.map(|(t, _)| t).unwrap_or_default())
}

/// Decodes a summary for one input. At most `max_output_len - 1` tokens are
/// produced since the decoder's first position holds bos.
pub fn generate(
    tokens: &[usize],
    features: &FeatureAssignment,
    params: &ModelParams,
    config: &ModelConfig,
    strategy: Strategy,
) -> Result<Vec<usize>> {
    let max_steps = config.max_output_len.saturating_sub(1);
    if max_steps == 0 {
        return Ok(Vec::new());
    }
    let mut scorer = ModelScorer::new(tokens, features, params, config)?;
    match strategy {
        Strategy::Greedy => greedy_decode(&mut scorer, max_steps),
        Strategy::Beam(w) => beam_search(&mut scorer, w, max_steps),
    }
}
