//! Disentangled-representation estimation of individual treatment effects.
//!
//! Pre-treatment covariates are embedded into four latent factor spaces —
//! instrumental, confounding, adjustment, and irrelevant — by four encoder
//! networks trained jointly with two outcome heads, a treatment classifier,
//! and a reconstruction decoder. A dedicated embedding space plus
//! reconstruction and orthogonality objectives keep irrelevant covariates
//! from leaking into the factors used for effect prediction.
//!
//! Module map:
//! - [`tensor`], [`graph`]: dense f64 tensors and the reverse-mode autodiff
//!   tape every loss is expressed on.
//! - [`networks`]: the four encoders, outcome/treatment heads, decoder, and
//!   per-feature weight-contribution vectors.
//! - [`losses`]: factual regression, treatment classification, Sinkhorn
//!   discrepancy, reconstruction, orthogonality, and head regularization.
//! - [`data`]: synthetic generation with known factor structure, artificial
//!   contrasts, CSV ingestion, splitting, standardization.
//! - [`trainer`]: minibatch Adam training with nearest-neighbor-PEHE model
//!   selection.
//! - [`evaluation`]: PEHE, policy risk, permutation feature importance, and
//!   weight-based identification reports.

pub mod data;
pub mod error;
pub mod evaluation;
pub mod graph;
pub mod losses;
pub mod networks;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
