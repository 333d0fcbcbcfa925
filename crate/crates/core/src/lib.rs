//! Adversarial robustness toolkit for point-cloud classifiers.
//!
//! The crate bundles everything needed to run imperceptible, transferable
//! attacks on small point-set classifiers and to defend against them:
//!
//! * [`geometry`]: point clouds, exact k-NN, covariance analysis and normals.
//! * [`metrics`]: point-to-point and point-to-plane perturbation metrics.
//! * [`nn`]: a from-scratch per-point MLP classifier with exact backprop and Adam.
//! * [`attack`]: the normal-direction, hard-bounded attack and an FGSM comparator.
//! * [`transform`]: the learnable point-wise transformation and analytic baselines.
//! * [`defense`]: input-space defenses and latent-constraint adversarial training.
//! * [`harness`]: synthetic data, mesh ingestion, experiments and reporting.
//!
//! Per-instance work is fanned out through [`par::Exec`], which uses rayon when
//! the `parallel` feature is enabled and falls back to a plain loop otherwise.
//! Both paths produce bit-identical results.

pub mod attack;
pub mod defense;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod par;
pub mod seed;
pub mod transform;

pub use error::{Error, Result};
pub use geometry::{PointCloud, Vec3};
