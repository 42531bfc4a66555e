//! Synthetic CT from multi-echo MR.
//!
//! The crate covers the whole pipeline: a voxel volume model with a small
//! detached-header file format ([`volume`]), rigid CT-to-MR registration by
//! iterative closest point ([`registration`]), a from-scratch UNet generator
//! and patch discriminator ([`nn`]) trained as a conditional GAN
//! ([`train`]), bone-oriented evaluation ([`metrics`]) and a procedural
//! lower-arm phantom that stands in for real paired scans ([`phantom`]).

pub mod error;
pub mod metrics;
pub mod nn;
pub mod phantom;
pub mod registration;
pub mod train;
pub mod volume;

pub use error::{Error, Result};
pub use metrics::{MetricsRow, TriMesh};
pub use registration::RigidTransform;
pub use volume::{Grid, Mask3D, Unit, Volume3D};

/// A point in millimetres.
pub type Point3 = [f64; 3];
