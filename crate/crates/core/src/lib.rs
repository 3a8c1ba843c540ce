//! Differentiable average-precision surrogates for metric learning.
//!
//! The crate is organised around the quantities a retrieval loss sees for a
//! single query: a vector of similarity scores and a partition of the
//! retrieval set into positives and negatives.
//!
//! - [`embedding`]: embedding containers, cosine scoring and its backward pass,
//!   and construction of per-query [`RankingInstance`]s.
//! - [`surrogates`]: the `H⁻` smooth step, the SupAP upper-bound loss, the
//!   SmoothAP baseline, the calibration hinge loss and the combined ROADMAP
//!   objective, all with analytic score gradients.
//! - [`metrics`]: exact AP, Recall@K and mAP@R.
//! - [`decomp`]: decomposability gap between batch-wise and global AP, plus the
//!   worst-case and calibration-refined upper bounds.
//! - [`oracle`]: independent reference implementations used for verification.
//! - [`train`]: a small linear-embedder training harness on synthetic data.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`). The aliases
//! at the crate root fix it to `f64`, which is what the training harness and
//! the command-line tool use.

// Negated comparisons below double as NaN rejection.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod decomp;
pub mod embedding;
mod error;
pub mod metrics;
pub mod oracle;
mod scalar;
pub mod surrogates;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub use embedding::{build_instance, cosine_similarity, cosine_similarity_backward, Label, QueryIndex, RankingInstance};
pub use surrogates::LossKind;

/// Working precision of the training harness and CLI.
pub type Real = f64;

pub type EmbeddingMatrix = embedding::EmbeddingMatrix<Real>;
pub type SurrogateConfig = surrogates::SurrogateConfig<Real>;
pub type LossConfig = surrogates::LossConfig<Real>;
pub type LossOutput = surrogates::LossOutput<Real>;
pub type RankBreakdown = surrogates::RankBreakdown<Real>;
pub type CalibrationStats = decomp::CalibrationStats;
pub type DgReport = decomp::DgReport;
pub type MetricsReport = metrics::MetricsReport;
