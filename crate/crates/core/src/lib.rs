//! Voxel-based LiDAR localization against a reference map: voxel statistics,
//! FPFH + RANSAC coarse registration, point-to-plane ICP refinement, scan
//! combination odometry, parking occupancy and trajectory evaluation.

pub mod cloud;
pub mod error;
pub mod evaluation;
pub mod fpfh;
pub mod io;
pub mod odometry;
pub mod parking;
pub mod pipeline;
pub mod registration;
pub mod scene;
pub mod spatial;
pub mod synth;
pub mod voxel;

pub use cloud::{Point3, PointCloud, RigidTransform, Rgb, Trajectory};
pub use error::{Error, Result};
