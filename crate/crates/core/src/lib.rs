//! Cross-splitting information-geometry detectors for uplink multi-user MIMO.
//!
//! The crate is organized bottom-up:
//!
//! - [`model`]: constellations, synthetic channels, the transmission model and
//!   the Gram/matched-filter precomputation shared by every detector.
//! - [`ig_core`]: complex-Gaussian exponential-family machinery (coordinate
//!   transforms, free energy, KL divergence, diagonal m-projection).
//! - [`splitting`]: the cross decomposition of the Gram matrix into per-user
//!   rank-two components plus its diagonal.
//! - [`cs_iga`]: the linear detector, whose fixed point is the LMMSE estimate.
//! - [`ncs_iga`]: the nonlinear detector with a discrete constellation prior and
//!   bit-LLR output.
//! - [`baselines`]: direct LMMSE, matched filter and exhaustive-posterior oracles.
//! - [`harness`]: Monte Carlo sweeps, timing scans and result files.

// `!(x > 0.0)` is used on purpose so NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod cs_iga;
pub mod error;
pub mod harness;
pub mod ig_core;
pub mod model;
pub mod ncs_iga;
pub mod splitting;

pub use error::{Error, Result};
pub use model::{CMatrix, CVector, C64};
