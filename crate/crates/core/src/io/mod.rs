//! File formats: PLY clouds, pose text files and the JSON pipeline config.

pub mod config;
pub mod ply;
pub mod poses;

pub use config::{parse_config, PipelineConfig};
pub use ply::{read_ply, write_ply};
pub use poses::{read_poses, write_poses};
