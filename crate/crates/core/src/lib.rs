//! Schema-free EHR mortality-risk pipeline.
//!
//! Raw clinical event tables go in; an hourly in-hospital mortality
//! probability per ICU stay comes out. No variable selection, cleaning or
//! unit handling happens anywhere: every chart, lab and output event is
//! kept, continuous readings are quantized into percentile bins, and each
//! event becomes a token in one shared vocabulary. A single-layer LSTM over
//! learned token embeddings, aggregated per hour with learned softmax
//! weights, emits a risk trajectory that updates every hour.
//!
//! The crate also carries the full measurement stack (ROC/AUROC with tie
//! handling, bootstrap confidence intervals, per-hour dynamic AUROC,
//! calibration curves, per-hour event rankings), the training protocol
//! (stratified splits, cross-validation, early stopping, grid search), the
//! curve fitters used for severity-score baselines, and a synthetic cohort
//! generator with an analytically known risk posterior so everything can be
//! verified end to end without restricted clinical data.

pub mod error;
pub mod eval;
pub mod ingest;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod synth;
pub mod tokenize;
pub mod train;
pub mod util;

pub use error::{Error, Result};
