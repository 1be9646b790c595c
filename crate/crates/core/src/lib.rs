//! Dense depth propagation for dynamic scenes without explicit 3D motion.
//!
//! The reference frame is over-segmented into superpixels, each treated as
//! a 3D plane represented by three pixels. Next-frame depths of those
//! points are recovered by minimising an as-rigid-as-possible energy over
//! a k-nearest-neighbour graph, planes are refit and then smoothed by
//! particle-based tree-reweighted message passing.
//!
//! The crate is `no_std` (with `alloc`); the `std` feature only enables
//! wall-clock timing of solver runs.

#![no_std]
// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
extern crate alloc;
#[cfg(feature = "std")]
extern crate std;

pub mod arap;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod mrf;
pub mod pipeline;
pub mod raster;
pub mod refine;
pub mod segmentation;
pub mod synth;

pub use error::{Error, Result};
pub use geometry::{CameraIntrinsics, PlaneParams, Point3, UnitRay, Vec3};
pub use raster::{DepthMap, FlowField, Image, Segmentation};
