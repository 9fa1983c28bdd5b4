//! Signal-to-noise profiling of transformer layers.
//!
//! During calibration the model runs each batch once cleanly and several
//! times with noise injected into *every* layer. For layer `l`, the signal
//! is the mean absolute clean activation and the noise is the mean absolute
//! deviation of the noisy activation from the clean one, both averaged over
//! all calibration passes. Layers are then ranked by
//! `snr = signal / (noise + epsilon)` and the top (or bottom) `k` are
//! selected to receive noise during training.
//!
//! This module owns the pure numerics: metric computation, accumulation
//! across passes, ranking, and tie-breaking. Running the actual forward
//! passes is the trainer's job.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Tensor;

/// Whether to noise the layers that tolerate it best (highest SNR) or the
/// most sensitive ones (lowest SNR).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SnrMode {
    Highest,
    Lowest,
}

/// Mean absolute activation.
pub fn signal_metric(h: &Tensor) -> f64 {
    let n = h.numel().max(1) as f64;
    h.data().iter().map(|v| v.abs()).sum::<f64>() / n
}

/// Mean absolute difference between a noisy and a clean activation.
pub fn noise_metric(clean: &Tensor, noisy: &Tensor) -> Result<f64> {
    if clean.shape() != noisy.shape() {
        return Err(Error::shape(
            "noise_metric",
            format!("clean {:?} vs noisy {:?}", clean.shape(), noisy.shape()),
        ));
    }
    let n = clean.numel().max(1) as f64;
    Ok(clean
        .data()
        .iter()
        .zip(noisy.data())
        .map(|(c, x)| (x - c).abs())
        .sum::<f64>()
        / n)
}

/// Accumulates per-layer metrics over calibration passes.
pub struct SnrAccumulator {
    signal_sums: Vec<f64>,
    noise_sums: Vec<f64>,
    passes: usize,
}

impl SnrAccumulator {
    pub fn new(num_layers: usize) -> Self {
        SnrAccumulator {
            signal_sums: vec![0.0; num_layers],
            noise_sums: vec![0.0; num_layers],
            passes: 0,
        }
    }

    /// Record one noisy pass: `clean[l]` and `noisy[l]` are layer `l`'s
    /// hidden states from the clean and the noisy forward of the same batch.
    pub fn add_pass(&mut self, clean: &[Tensor], noisy: &[Tensor]) -> Result<()> {
        if clean.len() != self.signal_sums.len() || noisy.len() != self.signal_sums.len() {
            return Err(Error::shape(
                "snr_add_pass",
                format!(
                    "expected {} layers, got clean {} / noisy {}",
                    self.signal_sums.len(),
                    clean.len(),
                    noisy.len()
                ),
            ));
        }
        for (l, (c, x)) in clean.iter().zip(noisy).enumerate() {
            self.signal_sums[l] += signal_metric(c);
            self.noise_sums[l] += noise_metric(c, x)?;
        }
        self.passes += 1;
        Ok(())
    }

    pub fn passes(&self) -> usize {
        self.passes
    }

    pub fn finish(self, epsilon: f64) -> Result<SnrReport> {
        if self.passes == 0 {
            return Err(Error::Degenerate(
                "SNR profile has no calibration passes".into(),
            ));
        }
        let n = self.passes as f64;
        let rows = self
            .signal_sums
            .iter()
            .zip(&self.noise_sums)
            .enumerate()
            .map(|(layer, (s, d))| {
                let signal = s / n;
                let noise = d / n;
                SnrRow {
                    layer,
                    signal,
                    noise,
                    snr: signal / (noise + epsilon),
                }
            })
            .collect();
        Ok(SnrReport { rows, epsilon })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SnrRow {
    pub layer: usize,
    pub signal: f64,
    pub noise: f64,
    pub snr: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SnrReport {
    pub rows: Vec<SnrRow>,
    pub epsilon: f64,
}

impl SnrReport {
    /// Pick `k` layers by SNR rank. Ties prefer the lower layer index, so
    /// the selection is deterministic even for exactly equal ratios.
    pub fn select_layers(&self, k: usize, mode: SnrMode) -> Result<BTreeSet<usize>> {
        let l = self.rows.len();
        if k == 0 || k > l {
            return Err(Error::Config(format!(
                "k must satisfy 0 < k <= {l} (number of layers), got {k}"
            )));
        }
        let mut order: Vec<&SnrRow> = self.rows.iter().collect();
        order.sort_by(|a, b| {
            let by_snr = match mode {
                SnrMode::Highest => b.snr.partial_cmp(&a.snr),
                SnrMode::Lowest => a.snr.partial_cmp(&b.snr),
            }
            .expect("snr values are finite");
            by_snr.then(a.layer.cmp(&b.layer))
        });
        Ok(order[..k].iter().map(|r| r.layer).collect())
    }
}

impl fmt::Display for SnrReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:>5}  {:>12}  {:>12}  {:>12}", "layer", "signal", "noise", "snr")?;
        for r in &self.rows {
            writeln!(
                f,
                "{:>5}  {:>12.6}  {:>12.6}  {:>12.4}",
                r.layer, r.signal, r.noise, r.snr
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    /// Brute-force oracle: recompute every mean with plain nested loops over
    /// an explicit (batch, pass, layer) record of the same tensors.
    #[test]
    fn accumulator_matches_triple_loop_oracle() {
        let mut rng = Rng::new(41);
        let layers = 3;
        let batches = 2;
        let passes_per_batch = 3;
        let shape = [2, 4, 5];

        let mut acc = SnrAccumulator::new(layers);
        // record[b][p][l] = (clean, noisy)
        let mut record: Vec<Vec<Vec<(Tensor, Tensor)>>> = Vec::new();
        for _b in 0..batches {
            let clean: Vec<Tensor> = (0..layers)
                .map(|_| Tensor::gaussian(&mut rng, &shape))
                .collect();
            let mut per_batch = Vec::new();
            for _p in 0..passes_per_batch {
                let noisy: Vec<Tensor> = clean
                    .iter()
                    .map(|c| {
                        let noise = Tensor::gaussian(&mut rng, &shape).scale(0.05);
                        c.add(&noise).unwrap()
                    })
                    .collect();
                acc.add_pass(&clean, &noisy).unwrap();
                per_batch.push(clean.iter().cloned().zip(noisy).collect());
            }
            record.push(per_batch);
        }
        assert_eq!(acc.passes(), batches * passes_per_batch);
        let report = acc.finish(1e-6).unwrap();

        for l in 0..layers {
            let mut s_sum = 0.0;
            let mut n_sum = 0.0;
            let mut count = 0usize;
            for b in 0..batches {
                for p in 0..passes_per_batch {
                    let (clean, noisy): &(Tensor, Tensor) = &record[b][p][l];
                    let numel = clean.numel() as f64;
                    let mut s = 0.0;
                    let mut d = 0.0;
                    for i in 0..clean.numel() {
                        s += clean.data()[i].abs();
                        d += (noisy.data()[i] - clean.data()[i]).abs();
                    }
                    s_sum += s / numel;
                    n_sum += d / numel;
                    count += 1;
                }
            }
            let signal = s_sum / count as f64;
            let noise = n_sum / count as f64;
            let snr = signal / (noise + 1e-6);
            assert!((report.rows[l].signal - signal).abs() < 1e-12);
            assert!((report.rows[l].noise - noise).abs() < 1e-12);
            assert!((report.rows[l].snr - snr).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_noise_divides_by_epsilon_only() {
        let h = Tensor::from_f64s(&[1.0, -2.0, 3.0, -4.0], &[2, 2]).unwrap();
        let mut acc = SnrAccumulator::new(1);
        acc.add_pass(std::slice::from_ref(&h), std::slice::from_ref(&h))
            .unwrap();
        let report = acc.finish(1e-6).unwrap();
        assert_eq!(report.rows[0].signal, 2.5);
        assert_eq!(report.rows[0].noise, 0.0);
        assert_eq!(report.rows[0].snr, 2.5 / 1e-6);
    }

    fn report_from_snrs(snrs: &[f64]) -> SnrReport {
        SnrReport {
            rows: snrs
                .iter()
                .enumerate()
                .map(|(layer, &snr)| SnrRow {
                    layer,
                    signal: snr,
                    noise: 1.0,
                    snr,
                })
                .collect(),
            epsilon: 1e-6,
        }
    }

    #[test]
    fn selection_ranks_highest_and_lowest() {
        let report = report_from_snrs(&[5.0, 1.0, 9.0, 3.0]);
        let hi = report.select_layers(2, SnrMode::Highest).unwrap();
        assert_eq!(hi.into_iter().collect::<Vec<_>>(), vec![0, 2]);
        let lo = report.select_layers(2, SnrMode::Lowest).unwrap();
        assert_eq!(lo.into_iter().collect::<Vec<_>>(), vec![1, 3]);
    }

    #[test]
    fn selection_breaks_ties_toward_lower_layers() {
        let report = report_from_snrs(&[2.0, 7.0, 7.0, 2.0, 7.0]);
        let hi = report.select_layers(2, SnrMode::Highest).unwrap();
        assert_eq!(hi.into_iter().collect::<Vec<_>>(), vec![1, 2]);
        let lo = report.select_layers(1, SnrMode::Lowest).unwrap();
        assert_eq!(lo.into_iter().collect::<Vec<_>>(), vec![0]);
        // All equal: the first k layers win in both modes.
        let flat = report_from_snrs(&[4.0, 4.0, 4.0]);
        assert_eq!(
            flat.select_layers(2, SnrMode::Highest)
                .unwrap()
                .into_iter()
                .collect::<Vec<_>>(),
            vec![0, 1]
        );
        assert_eq!(
            flat.select_layers(2, SnrMode::Lowest)
                .unwrap()
                .into_iter()
                .collect::<Vec<_>>(),
            vec![0, 1]
        );
    }

    #[test]
    fn selection_validates_k() {
        let report = report_from_snrs(&[1.0, 2.0]);
        assert!(report.select_layers(0, SnrMode::Highest).is_err());
        assert!(report.select_layers(3, SnrMode::Highest).is_err());
        assert!(report.select_layers(2, SnrMode::Highest).is_ok());
    }

    #[test]
    fn empty_profile_is_degenerate() {
        let acc = SnrAccumulator::new(2);
        assert!(matches!(acc.finish(1e-6), Err(Error::Degenerate(_))));
    }

    #[test]
    fn mismatched_layer_count_is_rejected() {
        let h = Tensor::from_f64s(&[1.0], &[1]).unwrap();
        let mut acc = SnrAccumulator::new(2);
        let r = acc.add_pass(std::slice::from_ref(&h), std::slice::from_ref(&h));
        assert!(matches!(r, Err(Error::Shape { .. })));
    }
}
