//! The training loop: SNR profiling, noisy forward passes, the hybrid
//! objective, AdamW with cosine decay, and deterministic resume.
//!
//! Reproducibility contract: every random decision is drawn from a substream
//! keyed by *what* the draw is for — `(purpose, epoch)` for shuffling,
//! `(purpose, step, micro, pass)` for noise and dropout — never from a shared
//! sequential stream. Two runs with the same seed, data, and configuration
//! produce bitwise-identical weights and metrics, and a run resumed from a
//! checkpoint replays the exact tail of the uninterrupted run.

mod checkpoint;

pub use checkpoint::{AdamMoments, Checkpoint};

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{collate, decode, format_prompt, CollatedBatch, DatasetRecord, EncodedSample, IM_END};
use crate::error::{Error, Result};
use crate::model::{
    generate, GenerationConfig, ModelConfig, PassOptions, TransformerModel,
};
use crate::noise::{noise_factor_logits, EtaMode, NoiseConfig, NoisePlan, NoiseState};
use crate::objective::{ce_loss, hybrid_loss, LossBundle, LossConfig};
use crate::rng::Rng;
use crate::snr::{SnrAccumulator, SnrMode, SnrReport};
use crate::Tensor;

/// Epsilon in the profiling ratio `signal / (noise + eps)`.
pub const SNR_EPSILON: f64 = 1e-6;

// Substream purposes. Model init, data order, noise draws, LoRA dropout,
// generation, and profiling each get a disjoint domain so consuming more
// draws in one place can never shift any other.
const STREAM_INIT: u64 = 0;
const STREAM_SHUFFLE: u64 = 1;
const STREAM_NOISE: u64 = 2;
const STREAM_DROPOUT: u64 = 3;
const STREAM_GEN: u64 = 4;
const STREAM_PROFILE: u64 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Update every weight.
    Full,
    /// Freeze the base model and train only the low-rank adapters (plus the
    /// learnable noise scale).
    Peft,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    /// Clean pass + two noisy passes, combined loss.
    Hybrid,
    /// One clean pass, plain masked cross-entropy. No noise, no extra
    /// passes — the comparison baseline.
    PlainCe,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub objective: ObjectiveKind,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Micro-batches whose gradients are averaged into one optimizer step.
    pub grad_accum: usize,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
    pub epochs: usize,
    /// Hard cap on optimizer steps, applied after the epoch count.
    pub max_steps: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    /// How many layers the profiling phase selects for injection.
    pub k_layers: usize,
    pub snr_mode: SnrMode,
    /// Noisy passes per profiling batch.
    pub snr_passes: usize,
    /// Batches used for profiling.
    pub snr_batches: usize,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::Full,
            objective: ObjectiveKind::Hybrid,
            learning_rate: 5e-5,
            batch_size: 4,
            grad_accum: 4,
            clip_norm: 1.0,
            epochs: 5,
            max_steps: 1000,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            k_layers: 3,
            snr_mode: SnrMode::Highest,
            snr_passes: 3,
            snr_batches: 4,
            checkpoint_interval: 200,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning_rate must be finite and > 0, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 || self.grad_accum == 0 {
            return Err(Error::Config(
                "batch_size and grad_accum must be >= 1".into(),
            ));
        }
        if !(self.clip_norm.is_finite() && self.clip_norm >= 0.0) {
            return Err(Error::Config(format!(
                "clip_norm must be finite and >= 0, got {}",
                self.clip_norm
            )));
        }
        if self.epochs == 0 || self.max_steps == 0 {
            return Err(Error::Config("epochs and max_steps must be >= 1".into()));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "weight_decay must be finite and >= 0, got {}",
                self.weight_decay
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config(format!(
                "beta1/beta2 must lie in [0, 1), got {} / {}",
                self.beta1, self.beta2
            )));
        }
        if !(self.adam_epsilon.is_finite() && self.adam_epsilon > 0.0) {
            return Err(Error::Config(format!(
                "adam_epsilon must be finite and > 0, got {}",
                self.adam_epsilon
            )));
        }
        if self.k_layers == 0 {
            return Err(Error::Config("k_layers must be >= 1".into()));
        }
        if self.snr_passes == 0 || self.snr_batches == 0 {
            return Err(Error::Config(
                "snr_passes and snr_batches must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// One optimizer step's telemetry. Loss values are means over the step's
/// micro-batches (unweighted by the accumulation scaling).
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub lr: f64,
    pub l_ce: f64,
    pub l_soft: f64,
    pub l_consistency: f64,
    pub l_final: f64,
    /// Pre-clip global gradient norm.
    pub grad_norm: f64,
    /// Pipe-joined layer indices, e.g. `0|2|3`; empty when nothing is noised.
    pub selected_layers: String,
    pub sigma_base: f64,
    pub eta_mode: String,
}

impl MetricsRow {
    pub const CSV_HEADER: &'static str =
        "step,lr,l_ce,l_soft,l_consistency,l_final,grad_norm,selected_layers,sigma_base,eta_mode";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.lr,
            self.l_ce,
            self.l_soft,
            self.l_consistency,
            self.l_final,
            self.grad_norm,
            self.selected_layers,
            self.sigma_base,
            self.eta_mode
        )
    }
}

#[derive(Debug)]
pub struct TrainSummary {
    /// Rows for the steps this invocation actually ran (a resumed run only
    /// reports its own tail).
    pub history: Vec<MetricsRow>,
    /// Total optimizer steps completed over the trainer's lifetime.
    pub final_step: usize,
}

/// Cosine decay from `lr0` at step 0 to 0 at `total` steps.
pub fn cosine_lr(step: usize, total: usize, lr0: f64) -> f64 {
    if total == 0 {
        return lr0;
    }
    let s = step.min(total) as f64 / total as f64;
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * s).cos())
}

/// Returns the pre-clip global gradient norm over `params`, and scales all
/// gradients by `max_norm / norm` when the norm exceeds a positive
/// `max_norm`. Parameters without a gradient contribute zero.
pub fn clip_global_norm(params: &[(String, &Tensor)], max_norm: f64) -> f64 {
    let mut sq = 0.0;
    for (_, p) in params {
        if let Some(g) = p.grad() {
            for v in &g {
                sq += v * v;
            }
        }
    }
    let norm = sq.sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for (_, p) in params {
            p.scale_grad(s);
        }
    }
    norm
}

/// One AdamW update on a flat parameter, in place. `t` is 1-based.
/// Weight decay is decoupled: it scales the parameter directly instead of
/// entering the moments.
pub(crate) fn adamw_update_vec(
    data: &mut [f64],
    grad: &[f64],
    slot: &mut AdamMoments,
    t: i32,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
) {
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for i in 0..data.len() {
        let g = grad[i];
        slot.m[i] = beta1 * slot.m[i] + (1.0 - beta1) * g;
        slot.v[i] = beta2 * slot.v[i] + (1.0 - beta2) * g * g;
        let m_hat = slot.m[i] / bc1;
        let v_hat = slot.v[i] / bc2;
        data[i] -= lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * data[i]);
    }
}

/// Fail loudly (with position info) instead of silently optimizing on NaNs.
pub(crate) fn assert_finite_losses(step: usize, micro: usize, parts: &[(&str, f64)]) -> Result<()> {
    for (name, v) in parts {
        if !v.is_finite() {
            return Err(Error::Numeric(format!(
                "{name} is {v} at step {step}, micro-batch {micro}"
            )));
        }
    }
    Ok(())
}

fn eta_mode_name(mode: EtaMode) -> &'static str {
    match mode {
        EtaMode::Variance => "variance",
        EtaMode::Logits => "logits",
    }
}

fn join_layers(layers: &BTreeSet<usize>) -> String {
    layers
        .iter()
        .map(|l| l.to_string())
        .collect::<Vec<_>>()
        .join("|")
}

pub struct Trainer {
    pub model: TransformerModel,
    pub noise_config: NoiseConfig,
    pub noise_state: NoiseState,
    pub loss_config: LossConfig,
    pub config: TrainConfig,
    /// Layers the noise plan targets; filled by [`Trainer::profile`] (or a
    /// checkpoint), empty until then.
    pub selected_layers: BTreeSet<usize>,
    /// Completed optimizer steps.
    pub step: usize,
    /// Opaque text stored in checkpoints, typically the TOML echo of the
    /// run configuration.
    pub config_echo: String,
    seed: u64,
    adam: BTreeMap<String, AdamMoments>,
}

impl Trainer {
    pub fn new(
        model_config: ModelConfig,
        noise_config: NoiseConfig,
        loss_config: LossConfig,
        config: TrainConfig,
        seed: u64,
    ) -> Result<Trainer> {
        noise_config.validate()?;
        loss_config.validate()?;
        config.validate()?;
        let mut init_rng = Rng::new(seed).substream(&[STREAM_INIT]);
        let mut model = TransformerModel::new(model_config, &mut init_rng)?;
        if matches!(config.mode, TrainMode::Peft) {
            if model.config.lora_rank == 0 {
                return Err(Error::Config(
                    "peft mode needs lora_rank >= 1 (nothing would be trainable)".into(),
                ));
            }
            model.add_adapters(&mut init_rng);
            model.freeze_base();
        }
        Ok(Trainer {
            model,
            noise_config,
            noise_state: NoiseState::new(),
            loss_config,
            config,
            selected_layers: BTreeSet::new(),
            step: 0,
            config_echo: String::new(),
            seed,
            adam: BTreeMap::new(),
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Everything the optimizer touches: trainable model parameters plus the
    /// noise scale.
    fn trainable(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = self
            .model
            .params()
            .into_iter()
            .filter(|(_, p)| p.requires_grad())
            .collect();
        out.push(("noise.alpha".to_string(), &self.noise_state.alpha));
        out
    }

    fn trainable_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = self
            .model
            .params_mut()
            .into_iter()
            .filter(|(_, p)| p.requires_grad())
            .collect();
        out.push(("noise.alpha".to_string(), &mut self.noise_state.alpha));
        out
    }

    /// Run the profiling phase: clean + noisy passes over the first
    /// `snr_batches` batches (in dataset order, no shuffling) with noise on
    /// *every* layer, then keep the `k_layers` with the highest/lowest
    /// signal-to-noise ratio as the injection targets.
    pub fn profile(&mut self, samples: &[EncodedSample]) -> Result<SnrReport> {
        if samples.is_empty() {
            return Err(Error::Degenerate("profiling needs at least one sample".into()));
        }
        let num_layers = self.model.config.num_layers;
        let all_layers: BTreeSet<usize> = (0..num_layers).collect();
        let bs = self.config.batch_size;
        let mut acc = SnrAccumulator::new(num_layers);
        let n_batches = self.config.snr_batches.min(samples.len().div_ceil(bs));
        for b in 0..n_batches {
            let lo = b * bs;
            let hi = ((b + 1) * bs).min(samples.len());
            let chosen: Vec<usize> = (lo..hi).collect();
            let batch = collate(samples, &chosen)?;
            let clean = self.model.forward(&batch.tokens, &mut PassOptions::eval())?;
            let eta = match self.noise_config.eta_mode {
                EtaMode::Logits => Some(noise_factor_logits(
                    &clean.logits,
                    self.noise_config.epsilon,
                    self.noise_config.eta_min,
                    self.noise_config.eta_max,
                )?),
                EtaMode::Variance => None,
            };
            for pass in 0..self.config.snr_passes {
                let mut noise_rng =
                    Rng::new(self.seed).substream(&[STREAM_PROFILE, b as u64, pass as u64]);
                let mut opts = PassOptions {
                    noise: Some(NoisePlan {
                        layers: &all_layers,
                        config: &self.noise_config,
                        state: &self.noise_state,
                        eta: eta.clone(),
                        rng: &mut noise_rng,
                    }),
                    dropout_rng: None,
                    retain_attention: false,
                };
                let noisy = self.model.forward(&batch.tokens, &mut opts)?;
                acc.add_pass(&clean.hidden_states, &noisy.hidden_states)?;
            }
        }
        let report = acc.finish(SNR_EPSILON)?;
        self.selected_layers = report.select_layers(self.config.k_layers, self.config.snr_mode)?;
        Ok(report)
    }

    /// Forward pass(es) and the loss for one micro-batch. `step` and `micro`
    /// key the noise/dropout substreams, so the same position in the schedule
    /// always sees the same draws.
    fn forward_losses(&self, batch: &CollatedBatch, step: u64, micro: u64) -> Result<LossBundle> {
        let root = Rng::new(self.seed);
        let use_dropout = matches!(self.config.mode, TrainMode::Peft)
            && self.model.config.lora_dropout > 0.0;

        let mut drop0 = root.substream(&[STREAM_DROPOUT, step, micro, 0]);
        let mut opts = PassOptions {
            noise: None,
            dropout_rng: use_dropout.then_some(&mut drop0),
            retain_attention: false,
        };
        let clean = self.model.forward(&batch.tokens, &mut opts)?;

        if matches!(self.config.objective, ObjectiveKind::PlainCe) {
            let l_ce = ce_loss(&clean.logits, &batch.targets, &batch.mask)?;
            return Ok(LossBundle {
                l_final: l_ce.clone(),
                l_ce,
                l_soft: Tensor::scalar(0.0),
                l_consistency: Tensor::scalar(0.0),
            });
        }

        let eta = match self.noise_config.eta_mode {
            EtaMode::Logits => Some(noise_factor_logits(
                &clean.logits,
                self.noise_config.epsilon,
                self.noise_config.eta_min,
                self.noise_config.eta_max,
            )?),
            EtaMode::Variance => None,
        };
        let mut noisy = Vec::with_capacity(2);
        for pass in 1..=2u64 {
            let mut noise_rng = root.substream(&[STREAM_NOISE, step, micro, pass]);
            let mut drop = root.substream(&[STREAM_DROPOUT, step, micro, pass]);
            let mut opts = PassOptions {
                noise: Some(NoisePlan {
                    layers: &self.selected_layers,
                    config: &self.noise_config,
                    state: &self.noise_state,
                    eta: eta.clone(),
                    rng: &mut noise_rng,
                }),
                dropout_rng: use_dropout.then_some(&mut drop),
                retain_attention: false,
            };
            noisy.push(self.model.forward(&batch.tokens, &mut opts)?);
        }
        hybrid_loss(
            &clean.logits,
            &noisy[0].logits,
            &noisy[1].logits,
            &batch.targets,
            &batch.mask,
            &self.loss_config,
        )
    }

    fn adam_update(&mut self, lr: f64) -> Result<()> {
        let t = (self.step + 1) as i32;
        let (b1, b2, eps, wd) = (
            self.config.beta1,
            self.config.beta2,
            self.config.adam_epsilon,
            self.config.weight_decay,
        );
        let mut adam = std::mem::take(&mut self.adam);
        for (name, p) in self.trainable_mut() {
            let n = p.numel();
            let shape = p.shape().to_vec();
            let grad = p.grad().unwrap_or_else(|| vec![0.0; n]);
            let slot = adam.entry(name).or_insert_with(|| AdamMoments {
                m: vec![0.0; n],
                v: vec![0.0; n],
            });
            let mut data = p.to_f64_vec();
            adamw_update_vec(&mut data, &grad, slot, t, lr, b1, b2, eps, wd);
            *p = Tensor::param(data, &shape)?;
        }
        self.adam = adam;
        Ok(())
    }

    /// Train on `samples`. When `out_dir` is given, writes `metrics.csv`
    /// (for this invocation's steps) and periodic + final checkpoints there.
    ///
    /// With a hybrid objective, live noise, and no selection yet, the SNR
    /// profiling phase runs automatically first.
    ///
    /// Resume: load a checkpoint into a freshly constructed trainer, then
    /// call this with the *same* samples and configuration. Completed steps
    /// are skipped and the remainder replays the uninterrupted schedule
    /// draw-for-draw.
    pub fn train(&mut self, samples: &[EncodedSample], out_dir: Option<&Path>) -> Result<TrainSummary> {
        if samples.is_empty() {
            return Err(Error::Degenerate("training set is empty".into()));
        }
        let cfg = self.config.clone();
        let n = samples.len();
        let micros_per_epoch = n.div_ceil(cfg.batch_size);
        let groups_per_epoch = micros_per_epoch.div_ceil(cfg.grad_accum);
        let total_steps = (cfg.epochs * groups_per_epoch).min(cfg.max_steps);

        if matches!(cfg.objective, ObjectiveKind::Hybrid)
            && self.noise_config.sigma_base > 0.0
            && self.selected_layers.is_empty()
        {
            self.profile(samples)?;
        }

        let mut metrics_file = match out_dir {
            Some(dir) => {
                let mut f = std::fs::File::create(dir.join("metrics.csv"))?;
                writeln!(f, "{}", MetricsRow::CSV_HEADER)?;
                Some(f)
            }
            None => None,
        };

        let mut history = Vec::new();
        let start_epoch = self.step / groups_per_epoch;
        let skip_groups = self.step % groups_per_epoch;

        'epochs: for epoch in start_epoch..cfg.epochs {
            let mut order: Vec<usize> = (0..n).collect();
            Rng::new(self.seed)
                .substream(&[STREAM_SHUFFLE, epoch as u64])
                .shuffle(&mut order);
            let micros: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
            for (gi, group) in micros.chunks(cfg.grad_accum).enumerate() {
                if self.step >= total_steps {
                    break 'epochs;
                }
                if epoch == start_epoch && gi < skip_groups {
                    continue;
                }

                for (_, p) in self.trainable() {
                    p.zero_grad();
                }
                let group_len = group.len() as f64;
                let (mut s_ce, mut s_soft, mut s_cons, mut s_final) = (0.0, 0.0, 0.0, 0.0);
                for (micro, chosen) in group.iter().enumerate() {
                    let batch = collate(samples, chosen)?;
                    let bundle = self.forward_losses(&batch, self.step as u64, micro as u64)?;
                    let ce = bundle.l_ce.item()?;
                    let soft = bundle.l_soft.item()?;
                    let cons = bundle.l_consistency.item()?;
                    let fin = bundle.l_final.item()?;
                    assert_finite_losses(
                        self.step,
                        micro,
                        &[
                            ("l_ce", ce),
                            ("l_soft", soft),
                            ("l_consistency", cons),
                            ("l_final", fin),
                        ],
                    )?;
                    s_ce += ce / group_len;
                    s_soft += soft / group_len;
                    s_cons += cons / group_len;
                    s_final += fin / group_len;
                    // Scale before backward so accumulated gradients come out
                    // as the mean over the group's micro-batches.
                    bundle.l_final.scale(1.0 / group_len).backward()?;
                }

                let grad_norm = clip_global_norm(&self.trainable(), cfg.clip_norm);
                let lr = cosine_lr(self.step, total_steps, cfg.learning_rate);
                self.adam_update(lr)?;

                let row = MetricsRow {
                    step: self.step,
                    lr,
                    l_ce: s_ce,
                    l_soft: s_soft,
                    l_consistency: s_cons,
                    l_final: s_final,
                    grad_norm,
                    selected_layers: join_layers(&self.selected_layers),
                    sigma_base: self.noise_config.sigma_base,
                    eta_mode: eta_mode_name(self.noise_config.eta_mode).to_string(),
                };
                if let Some(f) = metrics_file.as_mut() {
                    writeln!(f, "{}", row.to_csv())?;
                }
                history.push(row);
                self.step += 1;

                if cfg.checkpoint_interval > 0 && self.step % cfg.checkpoint_interval == 0 {
                    if let Some(dir) = out_dir {
                        self.save_checkpoint(&dir.join(format!("checkpoint-{}.ntck", self.step)))?;
                    }
                }
            }
        }

        if let Some(dir) = out_dir {
            self.save_checkpoint(&dir.join("checkpoint-final.ntck"))?;
        }
        Ok(TrainSummary {
            history,
            final_step: self.step,
        })
    }

    /// Greedy-decode each record's prompt and score exact match of the text
    /// before the first terminator against the reference response.
    pub fn evaluate_exact_match(&self, records: &[DatasetRecord], max_new_tokens: usize) -> Result<f64> {
        if records.is_empty() {
            return Err(Error::Degenerate("evaluation set is empty".into()));
        }
        let gen_config = GenerationConfig {
            max_new_tokens,
            temperature: 1.0,
            top_p: 1.0,
            top_k: 1,
            repetition_penalty: 1.0,
            stop_text: IM_END.to_string(),
        };
        let mut hits = 0usize;
        for (i, record) in records.iter().enumerate() {
            let prompt: Vec<usize> = format_prompt(&record.prompt)
                .bytes()
                .map(|b| b as usize)
                .collect();
            let mut rng = Rng::new(self.seed).substream(&[STREAM_GEN, i as u64]);
            let out = generate(&self.model, &prompt, &gen_config, &mut rng)?;
            let text = decode(&out);
            let answer = text.split(IM_END).next().unwrap_or("");
            if answer == record.response {
                hits += 1;
            }
        }
        Ok(hits as f64 / records.len() as f64)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut params: BTreeMap<String, (Vec<usize>, Vec<f64>)> = self
            .model
            .params()
            .into_iter()
            .map(|(name, p)| (name, (p.shape().to_vec(), p.to_f64_vec())))
            .collect();
        params.insert(
            "noise.alpha".to_string(),
            (
                self.noise_state.alpha.shape().to_vec(),
                self.noise_state.alpha.to_f64_vec(),
            ),
        );
        let ck = Checkpoint {
            seed: self.seed,
            step: self.step as u64,
            config_echo: self.config_echo.clone(),
            selected_layers: self.selected_layers.iter().copied().collect(),
            params,
            adam: self.adam.clone(),
        };
        ck.save(path)
    }

    /// Restore weights, optimizer moments, step counter, and layer selection.
    /// The trainer must have been constructed with the same seed and model
    /// configuration the checkpoint was written under.
    pub fn load_checkpoint(&mut self, ck: &Checkpoint) -> Result<()> {
        if ck.seed != self.seed {
            return Err(Error::Config(format!(
                "checkpoint seed {} does not match trainer seed {} (bit-exact resume needs the original seed)",
                ck.seed, self.seed
            )));
        }
        {
            let mut slots = self.model.params_mut();
            slots.push(("noise.alpha".to_string(), &mut self.noise_state.alpha));
            if slots.len() != ck.params.len() {
                return Err(Error::Config(format!(
                    "checkpoint has {} parameters, model has {}",
                    ck.params.len(),
                    slots.len()
                )));
            }
            for (name, slot) in slots {
                let (shape, data) = ck
                    .params
                    .get(&name)
                    .ok_or_else(|| Error::Config(format!("checkpoint is missing parameter {name}")))?;
                if shape != slot.shape() {
                    return Err(Error::Config(format!(
                        "checkpoint parameter {name} has shape {:?}, model wants {:?}",
                        shape,
                        slot.shape()
                    )));
                }
                *slot = Tensor::param(data.clone(), shape)?;
            }
        }
        if matches!(self.config.mode, TrainMode::Peft) {
            self.model.freeze_base();
        }
        for (name, mom) in &ck.adam {
            let n: usize = mom.m.len();
            if mom.v.len() != n {
                return Err(Error::Parse(format!(
                    "checkpoint moments for {name} have mismatched lengths"
                )));
            }
        }
        self.adam = ck.adam.clone();
        self.step = ck.step as usize;
        self.selected_layers = ck.selected_layers.iter().copied().collect();
        Ok(())
    }
}

#[cfg(test)]
mod tests;
