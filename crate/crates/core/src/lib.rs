//! Quantitative toolkit for object-wise digitally reconstructed radiographs.
//!
//! The pipeline converts a labeled HU volume into per-object volumes
//! ([`convert`]), renders them into DRR stacks whose intensity sums are
//! physical volumes and masses ([`project`]), supervises decomposition
//! models with the losses in [`losses`], aligns rigid objects with
//! [`register`], and scores predictions with [`metrics`]. [`phantom`]
//! generates synthetic scenes with closed-form ground truth.

pub mod convert;
pub mod error;
pub mod format;
pub mod gradcheck;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod phantom;
pub mod pose;
pub mod project;
pub mod register;
pub mod volume;

pub use error::{Error, ErrorClass, Result};
pub use image::Image;
pub use pose::RigidPose;
pub use project::{DrrKind, DrrStack, ProjectionGeometry};
pub use volume::{Grid3, LabelMap, ObjectClass, ObjectEntry, ObjectSet, ScalarVolume, VolumeKind};
