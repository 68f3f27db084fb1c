//! Data plane and architecture mechanics for an ECG-conditioned language model.
//!
//! The crate covers the full path from raw multi-lead waveforms to model
//! inputs and evaluation:
//!
//! - [`signal`]: record model, on-disk format and a synthetic ECG generator
//!   whose fiducials are known exactly.
//! - [`preprocess`]: powerline notch, baseline high-pass, rational resampling
//!   and the NaN/flat-line exclusion rule.
//! - [`stats`]: R-peak detection, RR/HRV statistics, PAC detection,
//!   wave fiducials and per-lead/global reports.
//! - [`tokenizer`]: one-second segmentation and mixed ECG/text sequences.
//! - [`mask`]: lead-aware, full-ECG and causal attention masks plus an
//!   independent rule oracle.
//! - [`neural`]: a small reverse-mode autodiff engine, the CNN autoencoder,
//!   projection, LoRA adapters and a tiny masked transformer.
//! - [`datagen`]: curriculum question templates, prompt construction, an
//!   LLM client with an offline mock, and conversation validators.
//! - [`forecast`]: rhythm-transition benchmark extraction, baselines and the
//!   window/horizon evaluation grid.
//! - [`metrics`]: F1, accuracy, hamming, AUROC, RMSE and linear probing.
//! - [`pipeline`]: configuration, manifests and the end-to-end demo.

pub mod datagen;
pub mod error;
pub mod forecast;
pub mod mask;
pub mod metrics;
pub mod neural;
pub mod pipeline;
pub mod preprocess;
pub mod signal;
pub mod stats;
pub mod tokenizer;

pub use error::{Error, Result};

/// Version of every on-disk schema written by this crate.
pub const SCHEMA_VERSION: u32 = 1;
