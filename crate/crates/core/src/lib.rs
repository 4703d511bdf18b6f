//! Communication cost of distributed optimization with gradient compression.
//!
//! The crate is organized around the affine transmission-time model
//! `T(s) = alpha + beta * s`:
//!
//! * [`compression`] implements Rand-k, Top-k, natural and rank-r compressors
//!   with exact bit accounting and their compression degrees.
//! * [`commodel`] evaluates the time model, the real speedup `eta` and the
//!   latency/bandwidth region classification.
//! * [`estimator`] fits `(alpha, beta)` online from four running sums.
//! * [`optimizer`] simulates synchronous distributed gradient descent and
//!   charges simulated wall clock under the time model.
//! * [`adaptive`] picks the compression power minimizing predicted cost.
//! * [`netprobe`] measures real size/delay pairs over a TCP ping-pong.

// `!(x > 0.0)` style checks deliberately reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adaptive;
pub mod commodel;
pub mod compression;
pub mod estimator;
pub mod netprobe;
pub mod optimizer;
pub mod rng;

pub use adaptive::{AdaptiveController, Decision, Family, SelectionObjective};
pub use commodel::{Region, SpeedupReport, SpeedupRow, TimeModelParams};
pub use compression::{CompressedMessage, CompressorSpec, DenseVector, Kind};
pub use estimator::{EstimatorState, FitResult, SizePolicy};
pub use optimizer::{Problem, SimConfig, SimTrace};
pub use rng::SeedKey;

/// Bits per byte at every byte/bit boundary of the crate.
pub const BITS_PER_BYTE: u64 = 8;
