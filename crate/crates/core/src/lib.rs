//! Patch composition for panoptic segmentation.
//!
//! Given an image and a pool of class-agnostic patch proposals, a set of
//! semantic queries (one per class) and instance queries (one per patch)
//! predict an affinity matrix linking queries to patches. Thresholding the
//! affinity rows merges patches into semantic regions and instances, which
//! combine into a panoptic map.
//!
//! The crate is `no_std` (with `alloc`) when built without the default `std`
//! feature. File formats, configuration files and the command line live in
//! the `patchmerge` companion crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod autodiff;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod inference;
pub mod mask;
pub mod metrics;
pub mod math;
pub mod model;
pub mod nn;
pub mod supervision;
pub mod synth;
pub mod train;

pub use error::{AutodiffError, GeometryError, ModelError, SynthError};
pub use mask::{BBox, BinaryMask};
