//! Real-time opti-acoustic reconstruction: imaging sonar frames are binarized
//! and carved into a world occupancy grid through a precomputed frustum
//! template, the grid is meshed, and masked camera images are back-projected
//! onto the mesh as a colored point cloud. A synthetic tank simulator drives
//! every stage with ground truth.

pub mod carve;
pub mod error;
pub mod fusion;
pub mod geometry;
pub mod io;
pub mod mesh;
pub mod pipeline;
pub mod sim;
pub mod sonar;

pub use error::{Error, Result};
