//! Semantic part completion for voxelized object scans.
//!
//! Given a partial scan of a detected object (occupancy grid + class label),
//! the pipeline predicts the object's complete decomposition into semantic
//! part masks: a small graph decoder predicts the part tree, geometric part
//! priors (k-means centroids of training masks) seed each part's geometry,
//! and a convolutional refiner conditions the result on the observed scan.
//!
//! The crate is organized around the pipeline stages:
//!
//! - [`voxelgrid`]: dense cubic occupancy grids, rotations, voxelization, I/O
//! - [`taxonomy`]: object classes, part types, and part-tree validation
//! - [`autodiff`]: minimal reverse-mode tensor engine used by the networks
//! - [`priorbank`]: k-means part priors in canonical orientation
//! - [`model`]: encoder, part-tree decoder, prior composition, refiner,
//!   losses, and end-to-end inference for one object
//! - [`synthdata`]: procedural dataset generator and manifest I/O
//! - [`metrics`]: IoU / Chamfer / mAP@25 evaluation protocols
//! - [`trainer`]: Adam optimization loop with the two-stage schedule

pub mod autodiff;
pub mod metrics;
pub mod model;
pub mod priorbank;
pub mod seed;
pub mod synthdata;
pub mod taxonomy;
pub mod trainer;
pub mod voxelgrid;
