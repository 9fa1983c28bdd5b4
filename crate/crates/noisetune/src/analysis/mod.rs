//! Post-hoc diagnostics: per-layer representation statistics (sparsity,
//! variance, token norms, numerical rank, logit-lens entropy, attention
//! entropy) and a multiple-testing-corrected distribution-shift scan
//! between two forward passes.

pub mod stats;
mod svd;

pub use stats::{
    chi2_sf, epps_singleton, holm_adjust, iqr, ln_gamma, percentile, EppsSingleton, HolmResult,
};
pub use svd::{effective_rank, singular_values};

use crate::error::{Error, Result};
use crate::model::{ForwardTrace, TransformerModel, LN_EPS};
use crate::Tensor;

/// Magnitudes below this count as inactive for the sparsity fraction.
pub const SPARSITY_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerMetrics {
    pub layer: usize,
    /// Fraction of activations with `|v| < 1e-6`.
    pub sparsity: f64,
    /// Population variance over every element of the layer's output.
    pub variance: f64,
    /// Mean L2 norm of the per-token hidden vectors.
    pub mean_token_norm: f64,
    /// Numerical rank of the `(batch * seq) x hidden` activation matrix.
    pub effective_rank: usize,
    /// Mean entropy (nats) of the vocabulary distribution obtained by
    /// pushing this layer's hidden states through the final LayerNorm and
    /// output head. For the last layer this is the entropy of the model's
    /// actual predictions.
    pub logit_entropy: f64,
    /// Mean entropy of the attention rows, when the trace retained them.
    pub attention_entropy: Option<f64>,
}

fn non_empty(h: &Tensor, what: &'static str) -> Result<()> {
    if h.numel() == 0 {
        return Err(Error::Degenerate(format!("{what} of an empty tensor")));
    }
    Ok(())
}

pub fn sparsity_fraction(h: &Tensor) -> Result<f64> {
    non_empty(h, "sparsity")?;
    let data = h.to_f64_vec();
    let small = data.iter().filter(|v| v.abs() < SPARSITY_EPS).count();
    Ok(small as f64 / data.len() as f64)
}

pub fn population_variance(h: &Tensor) -> Result<f64> {
    non_empty(h, "variance")?;
    let data = h.to_f64_vec();
    let n = data.len() as f64;
    let mean = data.iter().sum::<f64>() / n;
    Ok(data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n)
}

/// Mean L2 norm of the feature vectors along the last axis.
pub fn mean_token_norm(h: &Tensor) -> Result<f64> {
    non_empty(h, "token norm")?;
    if h.ndim() < 2 {
        return Err(Error::shape(
            "mean_token_norm",
            format!("need at least 2 dims, got {:?}", h.shape()),
        ));
    }
    let width = h.shape()[h.ndim() - 1];
    let data = h.to_f64_vec();
    let rows = data.len() / width;
    let mut acc = 0.0;
    for r in 0..rows {
        let row = &data[r * width..(r + 1) * width];
        acc += row.iter().map(|v| v * v).sum::<f64>().sqrt();
    }
    Ok(acc / rows as f64)
}

/// Numerical rank of the activations viewed as a `(rows) x (last axis)`
/// matrix.
pub fn hidden_effective_rank(h: &Tensor) -> Result<usize> {
    non_empty(h, "effective rank")?;
    if h.ndim() < 2 {
        return Err(Error::shape(
            "hidden_effective_rank",
            format!("need at least 2 dims, got {:?}", h.shape()),
        ));
    }
    let width = h.shape()[h.ndim() - 1];
    let data = h.to_f64_vec();
    let rows = data.len() / width;
    effective_rank(&data, rows, width)
}

/// Push a layer's hidden states through the final LayerNorm and the output
/// head, and return the mean entropy (nats) of the resulting vocabulary
/// distributions.
pub fn logit_lens_entropy(model: &TransformerModel, h: &Tensor) -> Result<f64> {
    if h.ndim() != 3 {
        return Err(Error::shape(
            "logit_lens_entropy",
            format!("expected [batch, seq, hidden], got {:?}", h.shape()),
        ));
    }
    let (b, t, hid) = (h.shape()[0], h.shape()[1], h.shape()[2]);
    if hid != model.config.hidden_dim {
        return Err(Error::shape(
            "logit_lens_entropy",
            format!("hidden dim {hid} vs model {}", model.config.hidden_dim),
        ));
    }
    let flat = h.detach().reshape(&[b * t, hid])?;
    let normed = flat.layer_norm(&model.ln_f_g, &model.ln_f_b, LN_EPS)?;
    let probs = normed.matmul(&model.head)?.softmax_last()?;
    let vocab = model.config.vocab_size;
    let data = probs.to_f64_vec();
    let rows = b * t;
    let mut acc = 0.0;
    for r in 0..rows {
        let row = &data[r * vocab..(r + 1) * vocab];
        acc -= row.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>();
    }
    Ok(acc / rows as f64)
}

/// Mean entropy (nats) of attention rows, `[batch, heads, seq, seq]`.
/// Zero-probability entries (e.g. causally masked positions) contribute
/// nothing.
pub fn attention_entropy(att: &Tensor) -> Result<f64> {
    non_empty(att, "attention entropy")?;
    if att.ndim() != 4 {
        return Err(Error::shape(
            "attention_entropy",
            format!("expected [batch, heads, seq, seq], got {:?}", att.shape()),
        ));
    }
    let width = att.shape()[3];
    let data = att.to_f64_vec();
    let rows = data.len() / width;
    let mut acc = 0.0;
    for r in 0..rows {
        let row = &data[r * width..(r + 1) * width];
        acc -= row.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>();
    }
    Ok(acc / rows as f64)
}

/// All per-layer statistics for one forward trace.
pub fn layer_metrics(model: &TransformerModel, trace: &ForwardTrace) -> Result<Vec<LayerMetrics>> {
    let mut out = Vec::with_capacity(trace.hidden_states.len());
    for (layer, h) in trace.hidden_states.iter().enumerate() {
        let att = match &trace.attentions {
            Some(atts) => Some(attention_entropy(&atts[layer])?),
            None => None,
        };
        out.push(LayerMetrics {
            layer,
            sparsity: sparsity_fraction(h)?,
            variance: population_variance(h)?,
            mean_token_norm: mean_token_norm(h)?,
            effective_rank: hidden_effective_rank(h)?,
            logit_entropy: logit_lens_entropy(model, h)?,
            attention_entropy: att,
        });
    }
    Ok(out)
}

pub fn metrics_table(rows: &[LayerMetrics]) -> String {
    let mut s = String::from(
        "layer  sparsity   variance   token_norm  eff_rank  logit_entropy  attn_entropy\n",
    );
    for r in rows {
        let att = match r.attention_entropy {
            Some(a) => format!("{a:12.6}"),
            None => format!("{:>12}", "-"),
        };
        s.push_str(&format!(
            "{:>5}  {:>8.6}  {:>9.4}  {:>10.4}  {:>8}  {:>13.6}  {att}\n",
            r.layer, r.sparsity, r.variance, r.mean_token_norm, r.effective_rank, r.logit_entropy,
        ));
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShiftRow {
    pub layer: usize,
    pub statistic: f64,
    pub p_value: f64,
    pub p_adjusted: f64,
    pub significant: bool,
    pub df: usize,
}

/// Per-layer two-sample test between matched hidden states (all activations
/// of layer `l` under condition A vs condition B), with the Holm correction
/// applied across layers. `significant` means the adjusted p-value is below
/// `alpha`.
pub fn distribution_shift(
    states_a: &[Tensor],
    states_b: &[Tensor],
    alpha: f64,
) -> Result<Vec<ShiftRow>> {
    if states_a.is_empty() || states_a.len() != states_b.len() {
        return Err(Error::shape(
            "distribution_shift",
            format!("{} layers vs {}", states_a.len(), states_b.len()),
        ));
    }
    let mut tests = Vec::with_capacity(states_a.len());
    for (a, b) in states_a.iter().zip(states_b) {
        tests.push(epps_singleton(&a.to_f64_vec(), &b.to_f64_vec())?);
    }
    let p_values: Vec<f64> = tests.iter().map(|t| t.p_value).collect();
    let holm = holm_adjust(&p_values, alpha)?;
    Ok(tests
        .into_iter()
        .enumerate()
        .map(|(layer, t)| ShiftRow {
            layer,
            statistic: t.statistic,
            p_value: t.p_value,
            p_adjusted: holm.adjusted[layer],
            significant: holm.significant[layer],
            df: t.df,
        })
        .collect())
}

pub fn shift_table(rows: &[ShiftRow]) -> String {
    let mut s = String::from("layer  statistic      p_value   p_adjusted  significant\n");
    for r in rows {
        s.push_str(&format!(
            "{:>5}  {:>9.4}  {:>11.6}  {:>11.6}  {}\n",
            r.layer,
            r.statistic,
            r.p_value,
            r.p_adjusted,
            if r.significant { "yes" } else { "no" },
        ));
    }
    s
}
