//! Weakly supervised video anomaly detection over precomputed per-snippet
//! features, guided by a dictionary of anomaly-event prompts.
//!
//! The pipeline consumes feature files produced offline (visual snippet
//! embeddings and caption sentence embeddings) and trains a small score
//! predictor from video-level labels only. Three signals drive training:
//!
//! * top-k multiple instance learning on the video labels,
//! * a triplet term over feature means selected by prompt similarity,
//! * per-snippet pseudo labels thresholded from the prompt similarities.
//!
//! At inference only fusion and the predictor run; the prompt machinery
//! adds nothing to the scoring path.
//!
//! Module map:
//!
//! * [`features`] — LAPF tensor files, manifests, resampling, bags, and the
//!   synthetic planted-anomaly benchmark.
//! * [`prompts`] — the prompt dictionary and snippet/prompt similarities.
//! * [`model`] — fusion, the MLP predictor, checkpoints.
//! * [`losses`] — the training objectives with analytic gradients.
//! * [`optim`] — Adam, the training loop, and the gradient checker.
//! * [`metrics`] — frame-level AUC/AP/FAR and the evaluation report.
//! * [`cli`] / [`config`] — the command surface used by the `lap` binary.
//!
//! The `examples/` directory contains one runnable walkthrough per
//! capability; start with `gen_synth` and `train_synthetic`.

pub mod cli;
pub mod config;
pub mod error;
pub mod features;
mod ioutil;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod prompts;

pub use error::{LapError, Result};
