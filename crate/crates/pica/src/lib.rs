//! Pixel codec avatar: a compact VAE avatar whose screen-space appearance is
//! produced by a tiny per-pixel decoder running only on rasterized pixels.
//!
//! The crate is organized bottom-up:
//!
//! - [`diff`]: tape-based reverse-mode autodiff over dense tensors, with the
//!   fixed kernel set the model needs (convolutions, bilinear sampling,
//!   sparse matvec, per-pixel MLP batches) plus Adam and a finite-difference
//!   gradient checker.
//! - [`geometry`]: grid meshes, position maps and resampling between them,
//!   cotangent Laplacians, OBJ export.
//! - [`raster`]: pinhole cameras and a deterministic CPU rasterizer that
//!   produces the G-buffer consumed by the per-pixel decoder.
//! - [`model`]: the encoder/decoder networks, learned positional encodings,
//!   the per-pixel decoder, and the full differentiable rendering graph.
//! - [`losses`]: the training objective.
//! - [`scenegen`]: a procedural multiview RGB-D scene used for tests,
//!   benchmarks and the bundled training harness.
//! - [`harness`]: training/eval/ablation/benchmark drivers shared by the CLI
//!   and the integration tests.
//!
//! Scalars are [`Real`] (`f32` by default, `f64` with the `f64` feature).
//! Every kernel has a sequential fallback; with the `parallel` feature the
//! heavy ones split across threads over disjoint output ranges, so results
//! are bitwise identical in all configurations.

pub mod checkpoint;
pub mod diff;
pub mod exec;
pub mod geometry;
pub mod harness;
pub mod losses;
pub mod math;
pub mod model;
pub mod raster;
pub mod scenegen;

/// Scalar type used throughout. Checkpoints and datasets store `f32` on disk
/// regardless of this setting.
#[cfg(not(feature = "f64"))]
pub type Real = f32;
#[cfg(feature = "f64")]
pub type Real = f64;

/// Machine epsilon for [`Real`].
#[cfg(not(feature = "f64"))]
pub const REAL_EPS: Real = f32::EPSILON;
#[cfg(feature = "f64")]
pub const REAL_EPS: Real = f64::EPSILON;

/// True when the crate was built with `Real = f64`.
pub const REAL_IS_F64: bool = cfg!(feature = "f64");
