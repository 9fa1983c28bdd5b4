//! A small decoder-only transformer with optional low-rank adapters.
//!
//! Pre-LayerNorm blocks, learned positional embeddings, GELU feed-forward,
//! untied output head. The forward pass can inject adaptive noise into the
//! post-residual hidden states of selected layers (see [`crate::noise`]) and
//! records every layer's hidden state so the SNR profiler and the analysis
//! tools can inspect them.

mod sampling;

pub use sampling::{generate, GenerationConfig};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::noise::NoisePlan;
use crate::rng::Rng;
use crate::Tensor;

const INIT_STD: f64 = 0.02;
pub const LN_EPS: f64 = 1e-5;
const MASKED: f64 = -1e30;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    /// Rank of the LoRA adapters on the attention query/value projections.
    /// Zero means no adapters are created.
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub lora_dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_layers: 4,
            hidden_dim: 64,
            num_heads: 4,
            vocab_size: 256,
            max_seq_len: 128,
            lora_rank: 8,
            lora_alpha: 16.0,
            lora_dropout: 0.05,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 {
            return Err(Error::Config("num_layers must be > 0".into()));
        }
        if self.hidden_dim == 0 || self.num_heads == 0 || self.hidden_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} must be a positive multiple of num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if self.vocab_size == 0 {
            return Err(Error::Config("vocab_size must be > 0".into()));
        }
        if self.max_seq_len == 0 {
            return Err(Error::Config("max_seq_len must be > 0".into()));
        }
        if self.lora_rank > self.hidden_dim {
            return Err(Error::Config(format!(
                "lora_rank {} exceeds hidden_dim {}",
                self.lora_rank, self.hidden_dim
            )));
        }
        if !(0.0..1.0).contains(&self.lora_dropout) {
            return Err(Error::Config(format!(
                "lora_dropout must be in [0, 1), got {}",
                self.lora_dropout
            )));
        }
        if !(self.lora_alpha.is_finite() && self.lora_alpha > 0.0) {
            return Err(Error::Config(format!(
                "lora_alpha must be finite and > 0, got {}",
                self.lora_alpha
            )));
        }
        Ok(())
    }
}

/// One low-rank adapter: `delta(x) = dropout(x) . a . b * (alpha / rank)`.
/// `a` starts small-random, `b` starts at zero, so a fresh adapter is an
/// exact no-op.
#[derive(Debug)]
pub struct LoraPair {
    pub a: Tensor, // [hidden, rank]
    pub b: Tensor, // [rank, hidden]
    pub scaling: f64,
    pub dropout: f64,
}

impl LoraPair {
    fn new(hidden: usize, rank: usize, alpha: f64, dropout: f64, rng: &mut Rng) -> Self {
        LoraPair {
            a: Tensor::randn_param(rng, &[hidden, rank], INIT_STD),
            b: Tensor::param(vec![0.0; rank * hidden], &[rank, hidden]).unwrap(),
            scaling: alpha / rank as f64,
            dropout,
        }
    }

    /// The low-rank contribution for flat input `x` (`[n, hidden]`).
    fn delta(&self, x: &Tensor, dropout_rng: Option<&mut Rng>) -> Result<Tensor> {
        let x = match dropout_rng {
            Some(rng) if self.dropout > 0.0 => {
                let keep = 1.0 - self.dropout;
                let mask: Vec<f64> = (0..x.numel())
                    .map(|_| if rng.uniform() < keep { 1.0 / keep } else { 0.0 })
                    .collect();
                x.mul(&Tensor::from_f64s(&mask, x.shape())?)?
            }
            _ => x.clone(),
        };
        Ok(x.matmul(&self.a)?.matmul(&self.b)?.scale(self.scaling))
    }
}

#[derive(Debug)]
pub struct LayerParams {
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub lora_q: Option<LoraPair>,
    pub lora_v: Option<LoraPair>,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

/// A batch of token ids, row-major `[batch, seq]`.
#[derive(Debug, Clone)]
pub struct TokenBatch {
    pub ids: Vec<usize>,
    pub batch: usize,
    pub seq: usize,
}

impl TokenBatch {
    pub fn new(ids: Vec<usize>, batch: usize, seq: usize) -> Result<Self> {
        if ids.len() != batch * seq || batch == 0 || seq == 0 {
            return Err(Error::shape(
                "token_batch",
                format!("{} ids for {batch} x {seq}", ids.len()),
            ));
        }
        Ok(TokenBatch { ids, batch, seq })
    }
}

/// Everything one forward pass produces.
pub struct ForwardTrace {
    /// Post-residual (and post-injection, where applicable) hidden state of
    /// every layer, each `[batch, seq, hidden]`.
    pub hidden_states: Vec<Tensor>,
    /// `[batch, seq, vocab]`.
    pub logits: Tensor,
    /// Detached attention probabilities per layer, `[batch, heads, seq, seq]`,
    /// kept only when requested.
    pub attentions: Option<Vec<Tensor>>,
}

/// Per-pass options: noise plan for noisy passes, a seeded stream for LoRA
/// dropout during training, and whether to keep attention maps around.
pub struct PassOptions<'a> {
    pub noise: Option<NoisePlan<'a>>,
    pub dropout_rng: Option<&'a mut Rng>,
    pub retain_attention: bool,
}

impl PassOptions<'_> {
    /// No noise, no dropout, no attention retention.
    pub fn eval() -> PassOptions<'static> {
        PassOptions {
            noise: None,
            dropout_rng: None,
            retain_attention: false,
        }
    }
}

#[derive(Debug)]
pub struct TransformerModel {
    pub config: ModelConfig,
    pub tok_embed: Tensor, // [vocab, hidden]
    pub pos_embed: Tensor, // [max_seq, hidden]
    pub layers: Vec<LayerParams>,
    pub ln_f_g: Tensor,
    pub ln_f_b: Tensor,
    pub head: Tensor, // [hidden, vocab]
}

impl TransformerModel {
    /// Fresh model: weights `N(0, 0.02)`, LayerNorm gains 1 / biases 0,
    /// no adapters yet.
    pub fn new(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let h = config.hidden_dim;
        let v = config.vocab_size;
        let layers = (0..config.num_layers)
            .map(|_| LayerParams {
                ln1_g: Tensor::param(vec![1.0; h], &[h]).unwrap(),
                ln1_b: Tensor::param(vec![0.0; h], &[h]).unwrap(),
                wq: Tensor::randn_param(rng, &[h, h], INIT_STD),
                wk: Tensor::randn_param(rng, &[h, h], INIT_STD),
                wv: Tensor::randn_param(rng, &[h, h], INIT_STD),
                wo: Tensor::randn_param(rng, &[h, h], INIT_STD),
                lora_q: None,
                lora_v: None,
                ln2_g: Tensor::param(vec![1.0; h], &[h]).unwrap(),
                ln2_b: Tensor::param(vec![0.0; h], &[h]).unwrap(),
                w1: Tensor::randn_param(rng, &[h, 4 * h], INIT_STD),
                b1: Tensor::param(vec![0.0; 4 * h], &[4 * h]).unwrap(),
                w2: Tensor::randn_param(rng, &[4 * h, h], INIT_STD),
                b2: Tensor::param(vec![0.0; h], &[h]).unwrap(),
            })
            .collect();
        Ok(TransformerModel {
            tok_embed: Tensor::randn_param(rng, &[v, h], INIT_STD),
            pos_embed: Tensor::randn_param(rng, &[config.max_seq_len, h], INIT_STD),
            layers,
            ln_f_g: Tensor::param(vec![1.0; h], &[h]).unwrap(),
            ln_f_b: Tensor::param(vec![0.0; h], &[h]).unwrap(),
            head: Tensor::randn_param(rng, &[h, v], INIT_STD),
            config,
        })
    }

    /// Attach LoRA adapters to every layer's query and value projections.
    /// A no-op when `lora_rank` is zero.
    pub fn add_adapters(&mut self, rng: &mut Rng) {
        let c = self.config.clone();
        if c.lora_rank == 0 {
            return;
        }
        for layer in &mut self.layers {
            layer.lora_q = Some(LoraPair::new(
                c.hidden_dim,
                c.lora_rank,
                c.lora_alpha,
                c.lora_dropout,
                rng,
            ));
            layer.lora_v = Some(LoraPair::new(
                c.hidden_dim,
                c.lora_rank,
                c.lora_alpha,
                c.lora_dropout,
                rng,
            ));
        }
    }

    /// Detach every base weight so only adapter parameters (and whatever
    /// the trainer adds, like the noise scale) receive gradients.
    pub fn freeze_base(&mut self) {
        for (name, p) in self.params_mut() {
            if !name.contains("lora") {
                *p = p.detach();
            }
        }
    }

    /// All parameters in a stable, construction-determined order. The names
    /// double as checkpoint keys.
    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("embed.tok".into(), &self.tok_embed),
            ("embed.pos".into(), &self.pos_embed),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.ln1.g"), &l.ln1_g));
            out.push((format!("layer{i}.ln1.b"), &l.ln1_b));
            out.push((format!("layer{i}.attn.wq"), &l.wq));
            out.push((format!("layer{i}.attn.wk"), &l.wk));
            out.push((format!("layer{i}.attn.wv"), &l.wv));
            out.push((format!("layer{i}.attn.wo"), &l.wo));
            if let Some(lq) = &l.lora_q {
                out.push((format!("layer{i}.attn.lora_q.a"), &lq.a));
                out.push((format!("layer{i}.attn.lora_q.b"), &lq.b));
            }
            if let Some(lv) = &l.lora_v {
                out.push((format!("layer{i}.attn.lora_v.a"), &lv.a));
                out.push((format!("layer{i}.attn.lora_v.b"), &lv.b));
            }
            out.push((format!("layer{i}.ln2.g"), &l.ln2_g));
            out.push((format!("layer{i}.ln2.b"), &l.ln2_b));
            out.push((format!("layer{i}.ffn.w1"), &l.w1));
            out.push((format!("layer{i}.ffn.b1"), &l.b1));
            out.push((format!("layer{i}.ffn.w2"), &l.w2));
            out.push((format!("layer{i}.ffn.b2"), &l.b2));
        }
        out.push(("final_ln.g".into(), &self.ln_f_g));
        out.push(("final_ln.b".into(), &self.ln_f_b));
        out.push(("head.w".into(), &self.head));
        out
    }

    /// Mutable view of the same parameters in the same order.
    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("embed.tok".into(), &mut self.tok_embed),
            ("embed.pos".into(), &mut self.pos_embed),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("layer{i}.ln1.g"), &mut l.ln1_g));
            out.push((format!("layer{i}.ln1.b"), &mut l.ln1_b));
            out.push((format!("layer{i}.attn.wq"), &mut l.wq));
            out.push((format!("layer{i}.attn.wk"), &mut l.wk));
            out.push((format!("layer{i}.attn.wv"), &mut l.wv));
            out.push((format!("layer{i}.attn.wo"), &mut l.wo));
            if let Some(lq) = &mut l.lora_q {
                out.push((format!("layer{i}.attn.lora_q.a"), &mut lq.a));
                out.push((format!("layer{i}.attn.lora_q.b"), &mut lq.b));
            }
            if let Some(lv) = &mut l.lora_v {
                out.push((format!("layer{i}.attn.lora_v.a"), &mut lv.a));
                out.push((format!("layer{i}.attn.lora_v.b"), &mut lv.b));
            }
            out.push((format!("layer{i}.ln2.g"), &mut l.ln2_g));
            out.push((format!("layer{i}.ln2.b"), &mut l.ln2_b));
            out.push((format!("layer{i}.ffn.w1"), &mut l.w1));
            out.push((format!("layer{i}.ffn.b1"), &mut l.b1));
            out.push((format!("layer{i}.ffn.w2"), &mut l.w2));
            out.push((format!("layer{i}.ffn.b2"), &mut l.b2));
        }
        out.push(("final_ln.g".into(), &mut self.ln_f_g));
        out.push(("final_ln.b".into(), &mut self.ln_f_b));
        out.push(("head.w".into(), &mut self.head));
        out
    }

    pub fn forward(&self, batch: &TokenBatch, opts: &mut PassOptions) -> Result<ForwardTrace> {
        let c = &self.config;
        let (b, t, h) = (batch.batch, batch.seq, c.hidden_dim);
        if t > c.max_seq_len {
            return Err(Error::Config(format!(
                "sequence length {t} exceeds max_seq_len {}",
                c.max_seq_len
            )));
        }
        let nh = c.num_heads;
        let dh = h / nh;

        let mut x = Tensor::gather_rows(&self.tok_embed, &batch.ids)?.reshape(&[b, t, h])?;
        let pos = self.pos_embed.slice_rows(0, t)?;
        x = x.add_bcast_batch(&pos)?;

        // Additive causal mask over score rows: position i may attend to
        // j <= i only.
        let mut mask = vec![0.0; t * t];
        for i in 0..t {
            for j in (i + 1)..t {
                mask[i * t + j] = MASKED;
            }
        }

        let mut hidden_states = Vec::with_capacity(c.num_layers);
        let mut attentions = opts.retain_attention.then(Vec::new);

        for (l, layer) in self.layers.iter().enumerate() {
            // attention block
            let normed = x.layer_norm(&layer.ln1_g, &layer.ln1_b, LN_EPS)?;
            let flat = normed.reshape(&[b * t, h])?;
            let mut q = flat.matmul(&layer.wq)?;
            if let Some(lora) = &layer.lora_q {
                q = q.add(&lora.delta(&flat, opts.dropout_rng.as_deref_mut())?)?;
            }
            let k = flat.matmul(&layer.wk)?;
            let mut v = flat.matmul(&layer.wv)?;
            if let Some(lora) = &layer.lora_v {
                v = v.add(&lora.delta(&flat, opts.dropout_rng.as_deref_mut())?)?;
            }
            let split = |y: Tensor| -> Result<Tensor> {
                y.reshape(&[b, t, nh, dh])?.swap_axes12()
            };
            let (q, k, v) = (split(q)?, split(k)?, split(v)?);
            let scores = q
                .bmm_nt(&k)?
                .scale(1.0 / (dh as f64).sqrt())
                .add_const_rows(&mask, t, t)?;
            let probs = scores.softmax_last()?;
            if let Some(atts) = &mut attentions {
                atts.push(probs.detach());
            }
            let ctx = probs.bmm(&v)?.swap_axes12()?.reshape(&[b * t, h])?;
            let attn_out = ctx.matmul(&layer.wo)?.reshape(&[b, t, h])?;
            x = x.add(&attn_out)?;

            // feed-forward block
            let normed = x.layer_norm(&layer.ln2_g, &layer.ln2_b, LN_EPS)?;
            let flat = normed.reshape(&[b * t, h])?;
            let inner = flat.matmul(&layer.w1)?.add_bcast_batch(&layer.b1)?.gelu();
            let ffn_out = inner
                .matmul(&layer.w2)?
                .add_bcast_batch(&layer.b2)?
                .reshape(&[b, t, h])?;
            x = x.add(&ffn_out)?;

            // adaptive noise on the post-residual state of selected layers
            if let Some(plan) = &mut opts.noise {
                x = plan.apply(l, &x)?;
            }
            hidden_states.push(x.clone());
        }

        let final_norm = x.layer_norm(&self.ln_f_g, &self.ln_f_b, LN_EPS)?;
        let logits = final_norm
            .reshape(&[b * t, h])?
            .matmul(&self.head)?
            .reshape(&[b, t, c.vocab_size])?;

        Ok(ForwardTrace {
            hidden_states,
            logits,
            attentions,
        })
    }
}
