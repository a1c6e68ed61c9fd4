//! Workbench for TR-sampled encoding analyses: feature alignment, incremental
//! PCA, linear and network encoders, noise-ceiling-normalized evaluation,
//! error-difference clustering, and variance partitioning, over generic
//! feature/response matrices.
//!
//! The crate is organized around the pipeline stages:
//!
//! * [`tensorio`] — portable matrix containers, manifests, atlases, z-scoring
//! * [`alignment`] — irregular-event resampling, delay embedding, window plans
//! * [`reduction`] — incremental PCA with project / inverse-project
//! * [`encoders`] — ridge with bootstrapped regularization and the network family
//! * [`metrics`] — correlations, noise ceiling, normalized correlation, FDR
//! * [`analysis`] — error-difference fields, ROI clustering, variance partitioning
//! * [`synthgen`] — seeded synthetic datasets with known ground truth
//!
//! All randomized procedures take explicit seeds and are deterministic on a
//! given platform.

pub mod alignment;
pub mod analysis;
pub mod encoders;
pub mod error;
pub mod linalg;
pub mod metrics;
pub mod reduction;
pub mod rng;
pub mod synthgen;
pub mod tensorio;

pub use error::{EncxError, Result};
