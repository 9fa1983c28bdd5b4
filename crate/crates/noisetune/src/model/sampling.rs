//! Autoregressive sampling with temperature, repetition penalty, top-k,
//! and nucleus (top-p) filtering, in that order.

use serde::{Deserialize, Serialize};

use super::{PassOptions, TokenBatch, TransformerModel};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationConfig {
    pub max_new_tokens: usize,
    pub temperature: f64,
    pub top_p: f64,
    pub top_k: usize,
    /// Divides positive logits / multiplies negative logits of tokens that
    /// were already generated (the prompt is not penalized).
    pub repetition_penalty: f64,
    /// Generation stops once the emitted bytes end with this text.
    pub stop_text: String,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            max_new_tokens: 50,
            temperature: 0.5,
            top_p: 0.9,
            top_k: 40,
            repetition_penalty: 1.2,
            stop_text: "<|im_end|>".into(),
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature must be finite and > 0, got {}",
                self.temperature
            )));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::Config(format!(
                "top_p must be in (0, 1], got {}",
                self.top_p
            )));
        }
        if self.top_k == 0 {
            return Err(Error::Config("top_k must be >= 1".into()));
        }
        if !(self.repetition_penalty > 0.0 && self.repetition_penalty.is_finite()) {
            return Err(Error::Config(format!(
                "repetition_penalty must be finite and > 0, got {}",
                self.repetition_penalty
            )));
        }
        Ok(())
    }
}

/// The filtered, renormalized distribution the next token is drawn from:
/// `(token, probability)` pairs in descending probability order.
pub fn candidate_distribution(
    logits: &[f64],
    generated: &[usize],
    config: &GenerationConfig,
) -> Result<Vec<(usize, f64)>> {
    config.validate()?;
    if logits.is_empty() {
        return Err(Error::shape("sampling", "empty logit row"));
    }
    let mut z: Vec<f64> = logits.iter().map(|v| v / config.temperature).collect();

    // Penalize each previously generated token once.
    let mut seen: Vec<usize> = generated.to_vec();
    seen.sort_unstable();
    seen.dedup();
    for tok in seen {
        if tok < z.len() {
            if z[tok] > 0.0 {
                z[tok] /= config.repetition_penalty;
            } else {
                z[tok] *= config.repetition_penalty;
            }
        }
    }

    // Top-k: keep the k largest logits; ties resolve toward lower ids.
    let mut order: Vec<usize> = (0..z.len()).collect();
    order.sort_by(|&a, &b| z[b].partial_cmp(&z[a]).expect("finite logits").then(a.cmp(&b)));
    order.truncate(config.top_k.min(z.len()));

    // Softmax over the kept logits.
    let mx = z[order[0]];
    let mut probs: Vec<(usize, f64)> = order
        .iter()
        .map(|&i| (i, (z[i] - mx).exp()))
        .collect();
    let denom: f64 = probs.iter().map(|(_, p)| p).sum();
    for (_, p) in &mut probs {
        *p /= denom;
    }

    // Top-p: the smallest prefix whose mass reaches the threshold.
    let mut cum = 0.0;
    let mut keep = probs.len();
    for (i, (_, p)) in probs.iter().enumerate() {
        cum += p;
        if cum >= config.top_p {
            keep = i + 1;
            break;
        }
    }
    probs.truncate(keep);
    let denom: f64 = probs.iter().map(|(_, p)| p).sum();
    for (_, p) in &mut probs {
        *p /= denom;
    }
    Ok(probs)
}

/// Inverse-CDF draw from the candidate list.
pub fn sample_from(dist: &[(usize, f64)], rng: &mut Rng) -> usize {
    let u = rng.uniform();
    let mut cum = 0.0;
    for &(tok, p) in dist {
        cum += p;
        if u < cum {
            return tok;
        }
    }
    dist.last().expect("non-empty distribution").0
}

fn hit_stop(generated: &[usize], stop: &str) -> bool {
    if stop.is_empty() {
        return false;
    }
    let stop = stop.as_bytes();
    if generated.len() < stop.len() {
        return false;
    }
    generated[generated.len() - stop.len()..]
        .iter()
        .zip(stop)
        .all(|(&t, &b)| t == b as usize)
}

/// Sample up to `max_new_tokens` continuations of `prompt`. The returned ids
/// are only the newly generated ones, including the stop text if it was
/// produced. When the context outgrows `max_seq_len` the oldest tokens slide
/// out of the window.
pub fn generate(
    model: &TransformerModel,
    prompt: &[usize],
    config: &GenerationConfig,
    rng: &mut Rng,
) -> Result<Vec<usize>> {
    config.validate()?;
    if prompt.is_empty() {
        return Err(Error::Config("generation needs a non-empty prompt".into()));
    }
    if let Some(&bad) = prompt.iter().find(|&&t| t >= model.config.vocab_size) {
        return Err(Error::Config(format!(
            "prompt token {bad} out of vocabulary {}",
            model.config.vocab_size
        )));
    }
    let mut ids = prompt.to_vec();
    let mut out = Vec::new();
    for _ in 0..config.max_new_tokens {
        let start = ids.len().saturating_sub(model.config.max_seq_len);
        let ctx = &ids[start..];
        let batch = TokenBatch::new(ctx.to_vec(), 1, ctx.len())?;
        let trace = model.forward(&batch, &mut PassOptions::eval())?;
        let v = model.config.vocab_size;
        let row = &trace.logits.data()[(ctx.len() - 1) * v..ctx.len() * v];
        let dist = candidate_distribution(row, &out, config)?;
        let tok = sample_from(&dist, rng);
        ids.push(tok);
        out.push(tok);
        if hit_stop(&out, &config.stop_text) {
            break;
        }
    }
    Ok(out)
}
