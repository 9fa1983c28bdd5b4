//! Adaptive Gaussian noise injection for hidden states.
//!
//! For a hidden-state tensor `h` whose last axis is the hidden dimension,
//! each coordinate receives zero-mean Gaussian noise with an effective
//! standard deviation built from four factors:
//!
//! * per-token robust statistics — the median of the token's coordinates and
//!   the median absolute deviation (MAD) around it;
//! * an exponential distance weight `w = exp(-beta * |h - median| / (MAD + eps))`
//!   that shrinks the noise on outlier coordinates;
//! * a dynamic factor `eta`, either per token from the token's hidden-state
//!   variance relative to the batch mean, or per sequence from the entropy
//!   of the clean logits;
//! * a learnable global scalar `alpha` times the configured `sigma_base` and
//!   a train/eval gate.
//!
//! `sigma_eff = sigma_base * alpha * gate * MAD * w * eta`, and the noised
//! state is `h + sigma_eff .* xi` with `xi ~ N(0, I)`. Every factor except
//! `xi` is built from autodiff ops, so gradients flow through the statistics
//! into `h` and into `alpha`.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor;
use crate::Tensor;

/// How the dynamic noise factor is derived.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EtaMode {
    /// Per token: `exp(var(h_t) / (mean_batch_var + eps))`, clamped.
    Variance,
    /// Per sequence: `exp(mean position entropy of the clean logits)`,
    /// clamped. Computed from detached logits — no gradient flows back
    /// through the clean pass via this factor.
    Logits,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    /// Base noise standard deviation. Zero disables injection entirely.
    pub sigma_base: f64,
    /// Sharpness of the exponential distance weighting.
    pub beta: f64,
    /// Stabilizer added to denominators (MAD, variance normalizer) and to
    /// probabilities inside the entropy logarithm.
    pub epsilon: f64,
    pub eta_mode: EtaMode,
    /// Clamp range for the dynamic factor.
    pub eta_min: f64,
    pub eta_max: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            sigma_base: 0.01,
            beta: 1.0,
            epsilon: 1e-6,
            eta_mode: EtaMode::Variance,
            eta_min: 1.0,
            eta_max: 10.0,
        }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_base >= 0.0 && self.sigma_base.is_finite()) {
            return Err(Error::Config(format!(
                "sigma_base must be finite and >= 0, got {}",
                self.sigma_base
            )));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!(
                "beta must be finite and >= 0, got {}",
                self.beta
            )));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!(
                "epsilon must be > 0, got {}",
                self.epsilon
            )));
        }
        if !(self.eta_min > 0.0 && self.eta_min <= self.eta_max && self.eta_max.is_finite()) {
            return Err(Error::Config(format!(
                "eta clamp must satisfy 0 < min <= max, got [{}, {}]",
                self.eta_min, self.eta_max
            )));
        }
        Ok(())
    }
}

/// Mutable noise parameters that live across steps.
#[derive(Debug)]
pub struct NoiseState {
    /// Learnable global scale, initialized to 1. A 0-d parameter node; the
    /// trainer updates it alongside the model weights.
    pub alpha: Tensor,
    /// 1.0 during training, 0.0 during evaluation. Multiplies the effective
    /// sigma, so a zero gate makes injection an exact identity.
    pub gate: f64,
}

impl NoiseState {
    pub fn new() -> Self {
        NoiseState {
            alpha: Tensor::scalar_param(1.0),
            gate: 1.0,
        }
    }
}

impl Default for NoiseState {
    fn default() -> Self {
        Self::new()
    }
}

/// Everything a forward pass needs to decide whether and how to noise each
/// layer's output.
pub struct NoisePlan<'a> {
    /// Layer indices (0-based) whose post-residual hidden states get noised.
    pub layers: &'a BTreeSet<usize>,
    pub config: &'a NoiseConfig,
    pub state: &'a NoiseState,
    /// Precomputed dynamic factor with the outer shape of the hidden states
    /// (e.g. `[B, T]`). Required for [`EtaMode::Logits`] — it comes from the
    /// clean pass, which must run first. Ignored in variance mode, where the
    /// factor is derived from each layer's own statistics.
    pub eta: Option<Tensor>,
    /// Source of the Gaussian draws. One substream per pass keeps every
    /// draw reproducible regardless of how many layers are selected.
    pub rng: &'a mut Rng,
}

impl NoisePlan<'_> {
    /// Noise `h` if `layer` is selected, otherwise hand it back untouched.
    pub fn apply(&mut self, layer: usize, h: &Tensor) -> Result<Tensor> {
        if !self.layers.contains(&layer) {
            return Ok(h.clone());
        }
        inject(h, self.config, self.state, self.eta.as_ref(), self.rng)
    }
}

/// Per-token median and MAD over the last axis.
///
/// Returns `(median, mad)`, each shaped like `h` with the last axis dropped.
pub fn robust_stats(h: &Tensor) -> Result<(Tensor, Tensor)> {
    let mu = h.median_last()?;
    let mad = h.sub_bcast_last(&mu)?.abs().median_last()?;
    Ok((mu, mad))
}

/// Exponential distance weighting `exp(-beta * |h - mu| / (mad + eps))`.
pub fn weighting(h: &Tensor, mu: &Tensor, mad: &Tensor, beta: f64, eps: f64) -> Result<Tensor> {
    let dev = h.sub_bcast_last(mu)?.abs();
    let scaled = dev.div_bcast_last(&mad.add_scalar(eps))?;
    Ok(scaled.scale(-beta).exp())
}

/// Per-token dynamic factor from hidden-state variance:
/// `clamp(exp(var_t / (mean_t var + eps)), lo, hi)`.
pub fn noise_factor_variance(h: &Tensor, eps: f64, lo: f64, hi: f64) -> Result<Tensor> {
    let var = h.var_last()?;
    let norm = var.mean_all()?.add_scalar(eps);
    let ratio = var.div_scalar_node(&norm)?;
    ratio.exp().clamp(lo, hi)
}

/// Per-sequence dynamic factor from clean-logit entropy, broadcast over
/// positions: `clamp(exp(mean_t H(softmax(z_bt))), lo, hi)` where
/// `H(p) = -sum_v p_v ln(p_v + eps)`.
///
/// The logits are detached first: this factor modulates the noise magnitude
/// but is never a gradient path back into the clean pass.
pub fn noise_factor_logits(logits: &Tensor, eps: f64, lo: f64, hi: f64) -> Result<Tensor> {
    if logits.ndim() != 3 {
        return Err(Error::shape(
            "noise_factor_logits",
            format!("expected [batch, seq, vocab] logits, got {:?}", logits.shape()),
        ));
    }
    let (b, t) = (logits.shape()[0], logits.shape()[1]);
    let p = logits.detach().softmax_last()?;
    let ent = p.mul(&p.add_scalar(eps).ln()?)?.sum_last()?.neg(); // [B, T]
    let per_seq = ent.sum_last()?.scale(1.0 / t as f64); // [B]
    let eta_b = per_seq.exp().clamp(lo, hi)?;
    // Broadcast each sequence's factor across its positions.
    let table = eta_b.reshape(&[b, 1])?;
    let ids: Vec<usize> = (0..b).flat_map(|i| std::iter::repeat(i).take(t)).collect();
    Tensor::gather_rows(&table, &ids)?.reshape(&[b, t])
}

/// The effective per-coordinate noise standard deviation, shaped like `h`.
///
/// `eta` must have `h`'s outer shape when provided; when absent it is
/// derived from `h` via [`noise_factor_variance`] (variance mode). Logits
/// mode always requires a precomputed `eta`.
pub fn sigma_eff(
    h: &Tensor,
    config: &NoiseConfig,
    state: &NoiseState,
    eta: Option<&Tensor>,
) -> Result<Tensor> {
    let (mu, mad) = robust_stats(h)?;
    let w = weighting(h, &mu, &mad, config.beta, config.epsilon)?;
    let eta = match (eta, config.eta_mode) {
        (Some(e), _) => {
            if e.shape() != mad.shape() {
                return Err(Error::shape(
                    "sigma_eff",
                    format!(
                        "eta shape {:?} does not match hidden outer shape {:?}",
                        e.shape(),
                        mad.shape()
                    ),
                ));
            }
            e.clone()
        }
        (None, EtaMode::Variance) => {
            noise_factor_variance(h, config.epsilon, config.eta_min, config.eta_max)?
        }
        (None, EtaMode::Logits) => {
            return Err(Error::Config(
                "logits-mode noise requires a precomputed eta from the clean pass".into(),
            ))
        }
    };
    let per_token = mad.mul(&eta)?;
    w.mul_bcast_last(&per_token)?
        .scale(config.sigma_base * state.gate)
        .mul_scalar_node(&state.alpha)
}

/// Draw `xi ~ N(0, I)` and return `h + sigma_eff .* xi`.
///
/// When `sigma_base` or the gate is zero this is an exact identity: the
/// input tensor itself is returned (same node, no graph growth) and no
/// random numbers are consumed.
pub fn inject(
    h: &Tensor,
    config: &NoiseConfig,
    state: &NoiseState,
    eta: Option<&Tensor>,
    rng: &mut Rng,
) -> Result<Tensor> {
    config.validate()?;
    if config.sigma_base == 0.0 || state.gate == 0.0 {
        return Ok(h.clone());
    }
    let sigma = sigma_eff(h, config, state, eta)?;
    let xi = tensor::Tensor::gaussian(rng, h.shape());
    h.add(&sigma.mul(&xi)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use proptest::{prop_assert, prop_assert_eq, proptest};

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn robust_stats_hand_values() {
        // Odd row: median picks the middle element exactly.
        let h = Tensor::from_f64s(&[1.0, 2.0, 3.0, 4.0, 100.0], &[1, 5]).unwrap();
        let (mu, mad) = robust_stats(&h).unwrap();
        assert_eq!(mu.to_f64_vec(), vec![3.0]);
        // deviations [2, 1, 0, 1, 97] -> median 1
        assert_eq!(mad.to_f64_vec(), vec![1.0]);

        // Even row: both median and MAD average the middle pair.
        let h = Tensor::from_f64s(&[1.0, 3.0, 2.0, 4.0], &[1, 4]).unwrap();
        let (mu, mad) = robust_stats(&h).unwrap();
        assert_eq!(mu.to_f64_vec(), vec![2.5]);
        // deviations [1.5, 0.5, 0.5, 1.5] -> (0.5 + 1.5) / 2
        assert_eq!(mad.to_f64_vec(), vec![1.0]);
    }

    #[test]
    fn weighting_hand_value() {
        // Row [0, 2, 4]: median 2, deviations [2, 0, 2], MAD 2.
        // w = exp(-beta * dev / (2 + eps)).
        let h = Tensor::from_f64s(&[0.0, 2.0, 4.0], &[1, 3]).unwrap();
        let (mu, mad) = robust_stats(&h).unwrap();
        let eps = 1e-6;
        let w = weighting(&h, &mu, &mad, 1.0, eps).unwrap();
        let expect_outer = (-2.0 / (2.0 + eps) as f64).exp();
        assert!(close(w.data()[0], expect_outer, 1e-15));
        assert_eq!(w.data()[1], 1.0); // zero deviation -> weight exactly 1
        assert!(close(w.data()[2], expect_outer, 1e-15));
        // beta sharpens the falloff
        let w2 = weighting(&h, &mu, &mad, 2.0, eps).unwrap();
        assert!(close(w2.data()[0], expect_outer * expect_outer, 1e-15));
    }

    #[test]
    fn variance_factor_hand_value() {
        // Two tokens with per-token variances 1 and 3; batch mean 2.
        let s3 = 3.0f64.sqrt();
        let h = Tensor::from_f64s(&[-1.0, 1.0, -s3, s3], &[1, 2, 2]).unwrap();
        let eps = 1e-6;
        let eta = noise_factor_variance(&h, eps, 1.0, 10.0).unwrap();
        assert_eq!(eta.shape(), &[1, 2]);
        assert!(close(eta.data()[0], (1.0 / (2.0 + eps)).exp(), 1e-12));
        assert!(close(eta.data()[1], (3.0 / (2.0 + eps)).exp(), 1e-12));
    }

    #[test]
    fn variance_factor_clamps_both_ends() {
        // Four constant tokens (variance 0) and one wild one: the wild
        // token's ratio is ~5, exp(5) ~ 148 -> clamped to the max; the
        // constant tokens sit at exp(0) = 1, the configured floor.
        let mut vals = vec![0.5; 8];
        vals.extend_from_slice(&[-30.0, 30.0]);
        let h = Tensor::from_f64s(&vals, &[1, 5, 2]).unwrap();
        let eta = noise_factor_variance(&h, 1e-6, 1.0, 10.0).unwrap();
        assert_eq!(eta.to_f64_vec(), vec![1.0, 1.0, 1.0, 1.0, 10.0]);
    }

    #[test]
    fn logits_factor_uniform_vocab() {
        // Uniform logits over V=4: entropy ln 4 per position, eta = 4.
        let logits = Tensor::zeros(&[2, 3, 4]);
        let eps = 1e-6;
        let eta = noise_factor_logits(&logits, eps, 1.0, 10.0).unwrap();
        assert_eq!(eta.shape(), &[2, 3]);
        let expect = (-4.0 * 0.25 * (0.25f64 + eps).ln()).exp();
        for &v in eta.data() {
            assert!(close(v, expect, 1e-12));
        }
        assert!(close(expect, 4.0, 1e-4));
    }

    #[test]
    fn logits_factor_is_per_sequence_and_detached() {
        // Sequence 0: peaked logits (low entropy). Sequence 1: uniform.
        // Within a sequence every position shares the factor.
        let mut vals = vec![0.0; 2 * 2 * 8];
        vals[0] = 50.0; // position 0 of sequence 0 strongly peaked
        vals[8] = 50.0; // position 1 of sequence 0 strongly peaked
        let logits = Tensor::param(vals, &[2, 2, 8]).unwrap();
        let eta = noise_factor_logits(&logits, 1e-6, 1.0, 10.0).unwrap();
        assert!(!eta.requires_grad(), "entropy factor must not carry grad");
        let d = eta.to_f64_vec();
        assert_eq!(d[0], d[1]);
        assert_eq!(d[2], d[3]);
        assert!(close(d[0], 1.0, 1e-6)); // near-zero entropy -> floor
        assert!(close(d[2], 8.0f64.ln().exp(), 1e-3)); // ln 8 -> e^{ln 8} = 8
    }

    #[test]
    fn variance_factor_keeps_gradient_path() {
        let h = Tensor::param(vec![0.4, -1.2, 0.9, 2.0, -0.3, 0.1], &[1, 3, 2]).unwrap();
        let eta = noise_factor_variance(&h, 1e-6, 1.0, 10.0).unwrap();
        assert!(eta.requires_grad());
    }

    #[test]
    fn zero_noise_is_the_identity_node() {
        let h = Tensor::param(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let mut rng = Rng::new(1);
        let state = NoiseState::new();

        let cfg = NoiseConfig {
            sigma_base: 0.0,
            ..NoiseConfig::default()
        };
        let out = inject(&h, &cfg, &state, None, &mut rng).unwrap();
        assert!(out.same_node(&h));

        let cfg = NoiseConfig::default();
        let evaled = NoiseState {
            gate: 0.0,
            ..NoiseState::new()
        };
        let out = inject(&h, &cfg, &evaled, None, &mut rng).unwrap();
        assert!(out.same_node(&h));
        // No random numbers were consumed by either short circuit.
        let mut fresh = Rng::new(1);
        assert_eq!(rng.next_u64(), fresh.next_u64());
    }

    #[test]
    fn injection_is_seed_deterministic() {
        let h = Tensor::from_f64s(&[0.3, -1.1, 2.2, 0.5, 0.9, -0.7], &[1, 2, 3]).unwrap();
        let cfg = NoiseConfig {
            sigma_base: 0.1,
            ..NoiseConfig::default()
        };
        let state = NoiseState::new();
        let a = inject(&h, &cfg, &state, None, &mut Rng::new(9)).unwrap();
        let b = inject(&h, &cfg, &state, None, &mut Rng::new(9)).unwrap();
        let c = inject(&h, &cfg, &state, None, &mut Rng::new(10)).unwrap();
        assert_eq!(a.data(), b.data());
        assert_ne!(a.data(), c.data());
        assert_eq!(a.shape(), h.shape());
        assert_ne!(a.data(), h.data());
    }

    #[test]
    fn plan_applies_only_to_selected_layers() {
        let layers: BTreeSet<usize> = [1usize, 3].into_iter().collect();
        let cfg = NoiseConfig::default();
        let state = NoiseState::new();
        let mut rng = Rng::new(2);
        let mut plan = NoisePlan {
            layers: &layers,
            config: &cfg,
            state: &state,
            eta: None,
            rng: &mut rng,
        };
        let h = Tensor::from_f64s(&[0.1, 0.9, -0.4, 1.3], &[1, 2, 2]).unwrap();
        assert!(plan.apply(0, &h).unwrap().same_node(&h));
        assert!(!plan.apply(1, &h).unwrap().same_node(&h));
        assert!(plan.apply(2, &h).unwrap().same_node(&h));
        assert!(!plan.apply(3, &h).unwrap().same_node(&h));
    }

    #[test]
    fn gradients_flow_through_injection_into_h_and_alpha() {
        // Freeze xi by reseeding inside the closure, then finite-difference
        // the whole pipeline with respect to h and alpha. h is chosen with
        // well-separated coordinates and deviations so the median/abs kinks
        // are far from the FD step.
        let h = Tensor::param(
            vec![0.1, 1.3, -2.2, 0.7, 2.9, -0.6, -1.4, 0.3, 1.8, -0.2, 2.3, -3.0],
            &[1, 2, 6],
        )
        .unwrap();
        let alpha = Tensor::scalar_param(1.1);
        let cfg = NoiseConfig {
            sigma_base: 0.05,
            ..NoiseConfig::default()
        };
        let report = grad_check(
            &mut |xs: &[Tensor]| {
                let state = NoiseState {
                    alpha: xs[1].clone(),
                    gate: 1.0,
                };
                let out = inject(&xs[0], &cfg, &state, None, &mut Rng::new(123))?;
                Ok(out.mul(&out)?.sum_all())
            },
            &[h, alpha],
            1e-5,
        )
        .unwrap();
        assert!(
            report.max_rel_error < 1e-6,
            "max rel err {} at {:?}",
            report.max_rel_error,
            report.worst
        );
    }

    #[test]
    fn logits_mode_without_eta_is_a_config_error() {
        let h = Tensor::from_f64s(&[0.2, 0.4], &[1, 1, 2]).unwrap();
        let cfg = NoiseConfig {
            eta_mode: EtaMode::Logits,
            ..NoiseConfig::default()
        };
        let state = NoiseState::new();
        let r = inject(&h, &cfg, &state, None, &mut Rng::new(1));
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn config_validation_rejects_bad_ranges() {
        let mut c = NoiseConfig::default();
        c.sigma_base = -0.1;
        assert!(c.validate().is_err());
        let mut c = NoiseConfig::default();
        c.epsilon = 0.0;
        assert!(c.validate().is_err());
        let mut c = NoiseConfig::default();
        c.eta_min = 5.0;
        c.eta_max = 2.0;
        assert!(c.validate().is_err());
        assert!(NoiseConfig::default().validate().is_ok());
    }

    proptest! {
        /// Permuting a token's coordinates permutes w identically and leaves
        /// the median, MAD, and variance factor unchanged; adding a constant
        /// shifts the median by that constant and changes nothing else.
        #[test]
        fn robust_pipeline_equivariance(
            mut vals in proptest::collection::vec(-5.0f64..5.0, 6),
            shift in -3.0f64..3.0,
        ) {
            let h = Tensor::from_f64s(&vals, &[1, 6]).unwrap();
            let (mu, mad) = robust_stats(&h).unwrap();
            let w = weighting(&h, &mu, &mad, 1.0, 1e-6).unwrap();

            // permutation: reverse the row
            vals.reverse();
            let hr = Tensor::from_f64s(&vals, &[1, 6]).unwrap();
            let (mur, madr) = robust_stats(&hr).unwrap();
            let wr = weighting(&hr, &mur, &madr, 1.0, 1e-6).unwrap();
            prop_assert_eq!(mu.data()[0], mur.data()[0]);
            prop_assert_eq!(mad.data()[0], madr.data()[0]);
            let mut wd = w.to_f64_vec();
            wd.reverse();
            prop_assert_eq!(wd, wr.to_f64_vec());

            // shift invariance
            vals.reverse();
            let shifted: Vec<f64> = vals.iter().map(|v| v + shift).collect();
            let hs = Tensor::from_f64s(&shifted, &[1, 6]).unwrap();
            let (mus, mads) = robust_stats(&hs).unwrap();
            let ws = weighting(&hs, &mus, &mads, 1.0, 1e-6).unwrap();
            prop_assert!((mus.data()[0] - (mu.data()[0] + shift)).abs() < 1e-12);
            prop_assert!((mads.data()[0] - mad.data()[0]).abs() < 1e-12);
            for (a, b) in w.data().iter().zip(ws.data()) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        /// sigma_eff is elementwise nonnegative and bounded by
        /// sigma_base * alpha * MAD * eta_max (since w <= 1).
        #[test]
        fn sigma_eff_bounds(
            vals in proptest::collection::vec(-4.0f64..4.0, 12),
        ) {
            let h = Tensor::from_f64s(&vals, &[1, 2, 6]).unwrap();
            let cfg = NoiseConfig { sigma_base: 0.07, ..NoiseConfig::default() };
            let state = NoiseState::new();
            let sigma = sigma_eff(&h, &cfg, &state, None).unwrap();
            let (_, mad) = robust_stats(&h).unwrap();
            for t in 0..2 {
                let cap = cfg.sigma_base * mad.data()[t] * cfg.eta_max + 1e-12;
                for i in 0..6 {
                    let s = sigma.data()[t * 6 + i];
                    prop_assert!(s >= 0.0);
                    prop_assert!(s <= cap, "sigma {} exceeds cap {}", s, cap);
                }
            }
        }
    }
}
