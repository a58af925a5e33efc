//! Semi-supervised learning that stays robust when the unlabeled pool is
//! contaminated with out-of-distribution samples.
//!
//! The crate provides, bottom to top:
//!
//! - [`autodiff`]: a reverse-mode tape over `f64` tensors whose backward
//!   passes are themselves differentiable (second-order products come from
//!   repeated differentiation);
//! - [`nn`]: small multilayer perceptrons with selectable normalization,
//!   including a weighted batch-normalization layer whose statistics
//!   discount low-weight samples;
//! - [`losses`]: supervised cross-entropy plus the standard consistency
//!   objectives (pseudo-labeling, two-branch perturbation consistency,
//!   an exponential-moving-average teacher, and adversarial-direction
//!   consistency), combined into a per-sample-weighted training loss;
//! - [`reweight`]: seeded k-means clustering of the unlabeled pool and the
//!   per-cluster weight vector learned by the outer loop;
//! - [`bilevel`]: the two-loop training procedure that learns those
//!   cluster weights by descending the validation loss, either by
//!   differentiating through the unrolled inner steps or through a
//!   truncated inverse-curvature series;
//! - [`data`]: deterministic synthetic datasets (two moons and friends)
//!   with controllable out-of-distribution contamination, plus CSV I/O;
//! - [`report`]: run reports and per-iteration metrics shared with the
//!   command-line harness.

pub mod autodiff;
pub mod bilevel;
pub mod data;
pub mod error;
pub mod losses;
pub mod nn;
pub mod report;
pub mod reweight;

pub use error::{Error, Result};
