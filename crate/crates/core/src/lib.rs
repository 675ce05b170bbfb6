//! Dent segmentation on 3D surface scans.
//!
//! The pipeline runs in four stages:
//!
//! 1. [`synth`] produces labelled dented surfaces and [`noisebank`] replays
//!    real scanner noise onto them.
//! 2. [`preprocess`] rotates a scan so its mean normal is the optical axis,
//!    fits a bivariate quadric and keeps the z-residuals as a 2D image.
//! 3. [`net`] segments that image with a small encoder/decoder FCN built on
//!    the [`tensor`] autodiff engine.
//! 4. [`eval`] scores predictions and measures throughput; [`dataio`] handles
//!    every file format.

pub mod dataio;
pub mod error;
pub mod eval;
pub mod grid;
pub mod net;
pub mod noisebank;
pub mod preprocess;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use grid::{FlipAxis, Grid, LabelMask, Point3, ProbMask, ResidualGrid, SurfaceGrid};
