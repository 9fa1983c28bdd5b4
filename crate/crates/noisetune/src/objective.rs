//! The hybrid training objective.
//!
//! Three terms, all masked means over target positions:
//!
//! * `l_ce` — cross-entropy of the clean logits against the labels;
//! * `l_soft` — KL(p_soft || softmax(z_noisy)) where
//!   `p_soft = softmax(z_clean / temperature)` acts as a soft target. By
//!   default the soft target is detached, mirroring the usual
//!   stop-gradient on distillation teachers;
//! * `l_consistency` — KL between the predictive distributions of the two
//!   independently noised passes.
//!
//! `l_final = lambda_ce * l_ce + (1 - lambda_ce) * l_soft
//!            + lambda_consistency * l_consistency`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Weight of the hard cross-entropy term; the soft term gets `1 - this`.
    pub lambda_ce: f64,
    /// Weight of the consistency term, added on top of the hybrid blend.
    pub lambda_consistency: f64,
    /// Softmax temperature for the soft targets.
    pub temperature: f64,
    /// Added inside the KL logarithms to keep them finite.
    pub epsilon: f64,
    /// Stop gradients through the soft targets (teacher side). The noisy
    /// (student) side of the soft term always carries gradient.
    pub detach_soft_targets: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_ce: 0.5,
            lambda_consistency: 0.1,
            temperature: 2.0,
            epsilon: 1e-12,
            detach_soft_targets: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_ce >= 0.0 && self.lambda_ce <= 1.0) {
            return Err(Error::Config(format!(
                "lambda_ce must be in [0, 1], got {}",
                self.lambda_ce
            )));
        }
        if !(self.lambda_consistency >= 0.0 && self.lambda_consistency.is_finite()) {
            return Err(Error::Config(format!(
                "lambda_consistency must be finite and >= 0, got {}",
                self.lambda_consistency
            )));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature must be finite and > 0, got {}",
                self.temperature
            )));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!(
                "epsilon must be > 0, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// The individual loss terms plus their weighted combination, all scalar
/// graph nodes. Backward on `l_final` reaches every parameter; the parts
/// are kept for metrics.
pub struct LossBundle {
    pub l_ce: Tensor,
    pub l_soft: Tensor,
    pub l_consistency: Tensor,
    pub l_final: Tensor,
}

/// Masked mean cross-entropy of `logits` (`[..., V]`) against integer
/// targets, one per row.
pub fn ce_loss(logits: &Tensor, targets: &[usize], mask: &[bool]) -> Result<Tensor> {
    logits.cross_entropy(targets, mask)
}

/// `softmax(z_clean / temperature)`, optionally detached.
pub fn soft_targets(clean_logits: &Tensor, config: &LossConfig) -> Result<Tensor> {
    let p = clean_logits.scale(1.0 / config.temperature).softmax_last()?;
    Ok(if config.detach_soft_targets {
        p.detach()
    } else {
        p
    })
}

/// Row-wise `KL(p || q) = sum p * (ln(p + eps) - ln(q + eps))`, shape =
/// input shape minus the last axis.
pub fn kl_rows(p: &Tensor, q: &Tensor, epsilon: f64) -> Result<Tensor> {
    let lp = p.add_scalar(epsilon).ln()?;
    let lq = q.add_scalar(epsilon).ln()?;
    p.mul(&lp.sub(&lq)?)?.sum_last()
}

/// Mean of `rows` over positions where `mask` is true.
pub fn masked_mean(rows: &Tensor, mask: &[bool]) -> Result<Tensor> {
    if mask.len() != rows.numel() {
        return Err(Error::shape(
            "masked_mean",
            format!("{} rows, {} mask entries", rows.numel(), mask.len()),
        ));
    }
    let n_valid = mask.iter().filter(|&&m| m).count();
    if n_valid == 0 {
        return Err(Error::Degenerate("masked_mean: empty mask".into()));
    }
    let gate = Tensor::from_f64s(
        &mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect::<Vec<_>>(),
        rows.shape(),
    )?;
    Ok(rows.mul(&gate)?.sum_all().scale(1.0 / n_valid as f64))
}

/// Masked mean KL from the soft targets to the noisy predictive
/// distribution.
pub fn soft_ce_loss(
    p_soft: &Tensor,
    noisy_logits: &Tensor,
    mask: &[bool],
    epsilon: f64,
) -> Result<Tensor> {
    let q = noisy_logits.softmax_last()?;
    masked_mean(&kl_rows(p_soft, &q, epsilon)?, mask)
}

/// Masked mean KL between the two noisy passes' predictive distributions.
pub fn consistency_loss(
    noisy1_logits: &Tensor,
    noisy2_logits: &Tensor,
    mask: &[bool],
    epsilon: f64,
) -> Result<Tensor> {
    let p = noisy1_logits.softmax_last()?;
    let q = noisy2_logits.softmax_last()?;
    masked_mean(&kl_rows(&p, &q, epsilon)?, mask)
}

/// Weighted combination of the three terms.
pub fn combine(l_ce: &Tensor, l_soft: &Tensor, l_consistency: &Tensor, config: &LossConfig) -> Result<LossBundle> {
    let hybrid = l_ce
        .scale(config.lambda_ce)
        .add(&l_soft.scale(1.0 - config.lambda_ce))?;
    let l_final = hybrid.add(&l_consistency.scale(config.lambda_consistency))?;
    Ok(LossBundle {
        l_ce: l_ce.clone(),
        l_soft: l_soft.clone(),
        l_consistency: l_consistency.clone(),
        l_final,
    })
}

/// The full objective from the three forward passes' logits.
pub fn hybrid_loss(
    clean_logits: &Tensor,
    noisy1_logits: &Tensor,
    noisy2_logits: &Tensor,
    targets: &[usize],
    mask: &[bool],
    config: &LossConfig,
) -> Result<LossBundle> {
    config.validate()?;
    let l_ce = ce_loss(clean_logits, targets, mask)?;
    let p_soft = soft_targets(clean_logits, config)?;
    let l_soft = soft_ce_loss(&p_soft, noisy1_logits, mask, config.epsilon)?;
    let l_cons = consistency_loss(noisy1_logits, noisy2_logits, mask, config.epsilon)?;
    combine(&l_ce, &l_soft, &l_cons, config)
}
