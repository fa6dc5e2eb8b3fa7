//! Positional and language bias audits for long-context text embeddings.
//!
//! Documents are built from segment sets under every (or a position-balanced
//! subset of) ordering. Each segment's standalone embedding is compared with
//! the document embedding (representation, sim¹) and with its in-document
//! span embedding (retention, sim²). Position effects are estimated by OLS
//! on position dummies with segment-set clustered standard errors.
//!
//! The [`calibration`] module equalizes the `<s>` query's attention mass
//! across contiguous key baskets at inference time, which the audit can then
//! compare against the uncalibrated baseline.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix it to `f64`, which the pipeline uses throughout.

pub mod calibration;
pub mod corpus;
pub mod encoder;
mod error;
pub mod linalg;
pub mod metrics;
pub mod pipeline;
pub mod report;
mod scalar;
pub mod stats;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Double-precision encoder used by the audit pipeline.
pub type Encoder = encoder::MiniEncoder<f64>;
pub type Encoder32 = encoder::MiniEncoder<f32>;
pub type EncodeOutput = encoder::EncodeOutput<f64>;
pub type OlsFit = stats::OlsFit<f64>;
pub type Observation = stats::Observation<f64>;
pub type AttentionProfile = calibration::AttentionProfile<f64>;
pub type Matrix = linalg::Matrix<f64>;
