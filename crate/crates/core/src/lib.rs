//! Variant-contamination detection for language-model benchmarks.
//!
//! The central statistic is the variance, across temperature-sampled
//! generations, of each generation's *synthetic difficulty*: the sum of the
//! `m` least likely token log-probabilities normalized by sequence length.
//! Items a model has memorized (possibly through surface-rewritten variants)
//! flip between a template-following state and a free-drift state, which
//! inflates that variance; clean items stay in the drift state.
//!
//! Module map:
//!
//! - [`trace`]: items, generation evidence, and the line-delimited file formats.
//! - [`backend`]: acquisition of traces over an OpenAI-compatible wire protocol
//!   or from the in-process toy model.
//! - [`toy`]: a seedable two-state model used for offline end-to-end checks.
//! - [`detectors`]: the variance statistic and seven reference baselines.
//! - [`mixture`]: closed-form and Monte-Carlo two-component mixture model.
//! - [`eval`]: AUC, ROC, histograms, dip test, multi-seed summaries, sweeps.
//! - [`pipeline`]: orchestration of the above into on-disk artifacts.

pub mod backend;
pub mod detectors;
pub mod error;
pub mod eval;
pub mod exec;
pub mod mixture;
pub mod pipeline;
pub mod toy;
pub mod trace;

mod io_util;

pub use error::{Error, Result};
pub use exec::Execution;
