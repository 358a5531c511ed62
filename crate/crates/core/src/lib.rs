//! In-context tuning laboratory.
//!
//! A from-scratch `f64` autodiff engine drives a tiny decoder-only language
//! model, which is meta-trained on procedurally generated few-shot task suites
//! by in-context tuning and the competing methods (first-order MAML,
//! instruction tuning with and without fine-tuning, raw prompting). The
//! evaluation side computes P@1, AUC-ROC and the variance decomposition of
//! episode accuracy over instruction wording, example choice and example order.

pub mod autodiff;
pub mod episodes;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod infer;
pub mod lm;
pub mod meta;
pub mod rng;
pub mod sense;
pub mod tasks;

pub use error::{Error, Result};

/// Majority-label filter operating point: every answer must appear in less
/// than 2.5% of a task's examples.
pub const DEFAULT_FILTER_THRESHOLD: f64 = 0.025;
