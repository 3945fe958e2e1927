//! Statistically controlled discovery over sparse feature dictionaries.
//!
//! The pipeline turns per-document dictionary indicators into a selected set
//! of features with k-FWER control, using a Gaussian multiplier bootstrap of
//! the k-th largest (studentized) coordinate, and then evaluates
//! natural-language descriptions of the discoveries on a held-out split.
//!
//! Module map:
//!
//! - [`data`]: corpora, activation ingestion, max-pool binarization, degenerate
//!   feature filtering, sample splitting and the dictionary file format.
//! - [`transform`]: hypothesis transforms `X = h(W, Y)` and per-feature
//!   estimates / t-statistics.
//! - [`bootstrap`]: multiplier bootstrap draws and k-max critical values.
//! - [`inference`]: one-step and step-down k-FWER selection, simultaneous CIs
//!   and the report file format.
//! - [`autointerp`]: exemplar extraction, prompt construction and LLM-backed
//!   description generation / detection classification.
//! - [`scoring`]: accuracy, precision and recall scores with conditional CIs.
//! - [`sim`]: synthetic data-generating processes and Monte Carlo validation.

pub mod autointerp;
pub mod bootstrap;
pub mod data;
mod error;
mod ids;
pub mod inference;
pub mod rng;
pub mod scoring;
pub mod sim;
pub mod stats;
pub mod transform;

pub use error::{Error, Result};
pub use ids::FeatureId;
