//! Semantic RGB-D reconstruction.
//!
//! Turns a posed RGB-D sequence with 2D instance detections into
//! view-consistent semantic masks, a TSDF mesh, and a labeled mesh built by
//! projecting per-view features onto surface voxels.

pub mod camera;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod ingest;
pub mod project;
pub mod raster;
pub mod segment2d;
pub mod semmap;
pub mod synth;

pub use camera::{project, unproject, Convention, Intrinsics, PixelCoord, Pose};
pub use error::{Error, Result};
pub use nalgebra::{Point3, Vector3};
pub use raster::{DepthMap, Mask, Raster};
