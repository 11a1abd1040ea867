//! Measuring temporal model deterioration and temporal domain adaptation.
//!
//! A corpus of timestamped, labelled records is cut into equal-size temporal
//! splits; a model trained on each split is evaluated on every later split,
//! giving a lower-triangular grid of task metrics. The grid is condensed into
//! deterioration and adaptation scores, each tested with an exact two-sided
//! Wilcoxon signed-rank test. Label-free adaptation (self-labeling, continual
//! pre-training through an external trainer) is scored with the same
//! machinery.

pub mod error;
pub mod adaptation;
pub mod drift;
pub mod exec;
pub mod harness;
pub mod io;
pub mod learners;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod split;
pub mod summary;
pub mod wilcoxon;

pub use error::{Error, Result};
