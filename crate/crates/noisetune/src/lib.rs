//! Noise-augmented fine-tuning for tiny byte-level transformers.
//!
//! The crate trains a small decoder-only transformer while injecting
//! adaptive Gaussian noise into the hidden states of selected layers. Which
//! layers receive noise is decided by a signal-to-noise-ratio profile; how
//! much noise each coordinate receives is scaled by per-token robust
//! statistics (median / MAD), an exponential distance weighting, and a
//! dynamic factor derived from hidden-state variance or logit entropy. The
//! training objective blends standard cross-entropy on the clean pass with a
//! soft knowledge-distillation term and a consistency term between two
//! independently noised passes.
//!
//! Layout:
//!
//! * [`tensor`] — reverse-mode autodiff on dense row-major tensors, generic
//!   over the scalar type ([`Scalar`]); everything downstream uses the `f64`
//!   default.
//! * [`rng`] — seeded, bit-reproducible random streams.
//! * [`noise`] — robust statistics and the noise-injection operator.
//! * [`snr`] — layer profiling and selection.
//! * [`model`] — the toy transformer, LoRA adapters, sampling.
//! * [`objective`] — the hybrid loss.
//! * [`trainer`] — AdamW loop, cosine schedule, checkpoints, metrics.
//! * [`analysis`] — per-layer activation statistics and the
//!   Epps–Singleton / Holm statistical toolkit.
//! * [`verifier`] — empirical checks of the distributional and stability
//!   guarantees the noise operator is designed around.
//! * [`config`] / [`dataset`] — run configuration and data plumbing for the
//!   CLI.

pub mod analysis;
pub mod config;
pub mod dataset;
pub mod error;
pub mod model;
pub mod noise;
pub mod objective;
pub mod rng;
pub mod scalar;
pub mod snr;
pub mod tensor;
pub mod trainer;
pub mod verifier;

pub use error::{Error, Result};
pub use rng::Rng;
pub use scalar::Scalar;

/// Double-precision tensor; the concrete type used by every module above
/// the tensor engine. (`tensor::Tensor` defaults its scalar parameter to
/// `f64`, so this alias is spelled-out documentation more than machinery.)
pub type Tensor = tensor::Tensor<f64>;

/// Single-precision instantiation of the same engine. Exercised by the
/// tensor-level tests; the training stack itself stays in f64 because the
/// gradient checks and bit-exactness guarantees are calibrated there.
pub type Tensor32 = tensor::Tensor<f32>;
