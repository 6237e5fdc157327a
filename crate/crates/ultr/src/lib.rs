//! Counterfactual learning-to-rank toolkit.
//!
//! The crate bundles everything needed to run click-based ranking
//! experiments end to end with known ground truth:
//!
//! * [`corpus`] — judged datasets (LETOR/SVMLight), click logs (JSON Lines),
//!   preprocessing filters, and deterministic splits.
//! * [`simulate`] — position-based-model click simulation over a judged
//!   dataset, with a configurable logging policy and swap interventions.
//! * [`propensity`] — position-bias estimation from click logs via
//!   intervention harvesting (Adjacent Pair, Pivot Rank, All Pairs) plus
//!   model-based extraction.
//! * [`model`] — a feed-forward scorer with log1p feature scaling, exact
//!   analytic gradients, and an AdamW optimizer.
//! * [`losses`] — nine click-based training objectives, from naive
//!   pointwise/listwise/LambdaRank baselines to IPS, two-tower,
//!   RegressionEM, DLA, and pairwise debiasing.
//! * [`train`] — deterministic epoch training with validation-loss early
//!   stopping, and hyperparameter sweeps.
//! * [`eval`] — DCG/MRR/NLL metrics, a random-ranker baseline, and the
//!   paired t-test comparison protocol.
//! * [`harness`] — experiment pipelines (simulate → estimate → train →
//!   evaluate → report) behind the `ultr` CLI.

pub mod corpus;
pub mod error;
pub mod eval;
pub mod harness;
pub mod losses;
pub mod model;
pub mod propensity;
pub mod rng;
pub mod simulate;
pub mod train;

pub use error::{Error, Result};
