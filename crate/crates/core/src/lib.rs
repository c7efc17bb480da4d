//! Causal-fairness pipeline: a sparse-MLP SCM prior, an in-context
//! transformer trained to map biased tabular data to fair targets, and the
//! case-study/metrics harness used to evaluate it.

pub mod baselines;
pub mod case_studies;
pub mod dataset;
pub mod harness;
pub mod error;
pub mod io;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod scm_prior;
pub mod stats;

pub use dataset::TabularDataset;
pub use error::{ForgeError, Result};
pub use scm_prior::{PriorConfig, PriorSample, ScmSpec};
