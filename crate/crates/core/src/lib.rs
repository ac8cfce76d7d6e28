//! Churn prediction from RFM (recency, frequency, monetary value) sequences.
//!
//! The crate covers the whole experiment loop on a desk-scale panel:
//!
//! - [`dataset`]: panel data model, synthetic generator, CSV persistence,
//!   stratified folds, under-sampling and standardization.
//! - [`features`]: RFM aggregations and named design matrices.
//! - [`logit`]: L1-regularized logistic regression (proximal gradient).
//! - [`lstm`]: single-layer LSTM classifier with BPTT and Adam.
//! - [`metrics`]: AUC, lift, lift curves, ROC convex hull and EMPC.
//! - [`pipeline`]: nested cross-validation, out-of-fold stacking and the
//!   nine-row model matrix.
//!
//! Data-parallel loops go through [`exec::Execution`]; with the `parallel`
//! feature disabled every loop runs sequentially and results are identical.

pub mod dataset;
pub mod error;
pub mod exec;
pub mod features;
pub mod logit;
pub mod lstm;
pub mod metrics;
pub mod pipeline;
pub mod report;
pub mod seed;

pub use error::{ChurnError, Result};
