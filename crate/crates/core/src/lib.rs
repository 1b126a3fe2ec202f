//! Dense SLAM loop closure: global registration, robust pose-graph
//! verification, bundle adjustment and surfel map correction.

pub mod error;
pub mod features;
pub mod geometry;
pub mod harness;
pub mod loop_pipeline;
pub mod map_correction;
pub mod optimization;
pub mod pipeline;
pub mod preprocess;
pub mod registration;
pub mod spatial_index;
pub mod verification;

pub use error::{Error, Result};
pub use geometry::{compose, PointCloud, RigidTransform, Twist};
