//! Hyperspectral image classification with 3-D spectral-spatial selective
//! state-space scanning.
//!
//! The crate is organized bottom-up:
//!
//! - [`ssm`] — state-space kernels (ZOH discretization, recurrence,
//!   convolutional form, selective scan), generic over the scalar type;
//! - [`tensor`] / [`graph`] / [`gradcheck`] — a dense f64 tensor, a
//!   define-by-run reverse-mode tape, and finite-difference verification;
//! - [`routes`] — flattening of P×P×K token cubes into directed pixel
//!   sequences along five dimension-priority routes, and the
//!   scan-and-merge step built on them;
//! - [`blocks`] — the tokenizer, the gated scan block, and the classifier
//!   network assembled from tape ops;
//! - [`data`] — cube I/O, PCA reduction, patch extraction, stratified
//!   splits, and a synthetic dataset generator;
//! - [`metrics`], [`train`], [`eval`], [`bench`], [`verify`] — the
//!   experiment layer behind the CLI.

pub mod bench;
pub mod blocks;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod routes;
pub mod scalar;
pub mod ssm;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Working precision for the tape and everything above it.
pub type Real = f64;

/// Concrete kernel aliases at working precision.
pub type LtiSsm = ssm::LtiSsm<Real>;
pub type DiscreteSsm = ssm::DiscreteSsm<Real>;
pub type S6Params = ssm::S6Params<Real>;
