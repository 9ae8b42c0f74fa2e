//! Desk-scale engine for dynamic-scene Gaussian splatting with per-splat
//! semantic features and zero-shot feature-space stylization.
//!
//! The pipeline: a canonical [`scene::GaussianScene`] is deformed per
//! timestamp by a hexplane field + MLP head ([`deform`]), splatted by a
//! tile-based differentiable rasterizer that composites color and feature
//! channels with shared weights ([`raster`]), trained in two phases
//! ([`train`]) against RGB and distilled encoder features ([`codec`]), and
//! stylized at inference by an affine transform applied directly on the
//! per-splat feature vectors with running-average content statistics
//! ([`style`]). [`eval`] measures warped spatio-temporal consistency.

pub mod codec;
pub mod dataio;
pub mod deform;
pub mod error;
pub mod eval;
pub mod fmap;
pub mod gradops;
pub mod optim;
pub mod raster;
pub mod scene;
pub mod style;
pub mod train;

pub use error::{Error, Result};
pub use fmap::FeatureMap;
pub use scene::{Camera, Gaussian, GaussianScene};
