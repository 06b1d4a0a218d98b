//! Activation maximization (AM) for point-cloud classifiers.
//!
//! The crate bundles everything needed to run the pipeline at desk scale:
//!
//! - [`diffgraph`]: a small reverse-mode tape with the handful of primitives
//!   the fixed architectures need, plus Adam.
//! - [`shapes`] and [`io`]: a synthetic labeled shape dataset, random clouds,
//!   normalization and PLY / raw-binary files.
//! - [`classifier`]: a PointNet-style classifier exposing its feature taps.
//! - [`generators`]: autoencoder priors (AE, AED, NAED) and their training rules.
//! - [`am`]: input-space and latent-space activation maximization.
//! - [`metrics`]: Chamfer, exact EMD, Fréchet feature distance, modified
//!   inception score, PC-AMS and the diffusion-degree study.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod am;
pub mod checkpoint;
pub mod classifier;
pub mod diffgraph;
pub mod error;
pub mod generators;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod shapes;

pub use error::{Error, Result};
pub use shapes::PointCloud;

