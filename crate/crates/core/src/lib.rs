//! Boundary-aware motion forecasting.
//!
//! A vectorized scene (actors, lane-centerline graph, lane boundaries) is
//! encoded by three encoders, fused by four sub-fusion blocks, and decoded in
//! two stages into six target points and six full trajectories with
//! confidences. The crate also carries the training losses, the NAdam optimizer
//! with a cosine warm-restart schedule, benchmark metrics, and a
//! confidence-weighted k-means ensemble.

// `!(x > 0.0)` is how the validators reject NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod check;
pub mod cli;
pub mod diffcore;
pub mod ensemble;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod net_decoder;
pub mod net_encoder;
pub mod net_fusion;
pub mod nn;
pub mod optim;
pub mod scene;

pub use error::{Error, Result};
