//! # fdnml
//!
//! Library behind the `fdnml` command line tool: multifractal characterization
//! of EEG channels, identification of time-varying fractional-order dynamical
//! networks, complexity and distance summaries of the identified networks, and
//! a contrastive-learning classifier that predicts three cognitive-fatigue
//! levels from raw signal windows plus coupling matrices.
//!
//! ## Pipeline overview
//!
//! ```text
//! delimited EEG files
//!   │
//!   ├─ ingest        column-mapped load, NaN row drop, windowing
//!   ├─ multifractal  DWT → wavelet leaders → ζ(q), D(h), D_q, c₁..c₃, bootstrap CIs
//!   ├─ fracnet       Grünwald–Letnikov machinery, per-window EM fit of Δ^α x = Ax + Bu
//!   ├─ complexity    median binarization of coupling trajectories → LZ76 → CI
//!   ├─ distance      pairwise 1-D Wasserstein between per-level D_q distributions
//!   └─ learn         contrastive pretraining + classifier, stratified k-fold CV
//! ```
//!
//! Every stage is deterministic given the master seed; synthetic generators in
//! [`synth`] provide ground-truth oracles for the estimators.

pub mod complexity;
pub mod distance;
pub mod error;
pub mod fracnet;
pub mod ingest;
pub mod learn;
pub mod multifractal;
pub mod pipeline;
pub mod seed;
pub mod synth;
pub mod tabular;

pub use error::{Error, Result};
