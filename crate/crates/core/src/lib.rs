//! Gaussian-splat sensor simulation: camera and LiDAR rendering of 3D
//! Gaussian scenes through a tile rasterizer and a BVH ray tracer, mesh
//! actor insertion, block partitioning, pose alignment and training loss
//! terms.

// Negated float comparisons are used on purpose so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod align;
pub mod blocks;
pub mod buffers;
pub mod camera;
pub mod cli;
pub mod error;
pub mod kernel;
pub mod lidar;
pub mod math;
pub mod mesh;
pub mod modality;
pub mod ply;
pub mod raster;
pub mod raytrace;
pub mod regularizers;
pub mod scene;
pub mod settings;
pub mod sh;

pub use error::{Error, Result};
