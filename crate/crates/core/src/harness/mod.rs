//! File formats, synthetic data and evaluation metrics.

pub mod ba_file;
pub mod config;
pub mod dataset;
pub mod metrics;
pub mod ply;
pub mod reglog;
pub mod synth;
pub mod trajectory;

pub use ba_file::{parse_ba_problem, read_ba_problem, write_ba_problem};
pub use config::FlatConfig;
pub use dataset::Dataset;
pub use metrics::{eval_ate_rmse, eval_registration, eval_surface, RegistrationScore};
pub use ply::{read_ply, read_surfel_ply, write_ply, write_surfel_ply, PlyFormat};
pub use reglog::{LogEntry, RegistrationLog};
pub use synth::{synth_scene, SynthConfig, SynthScene};
pub use trajectory::{TrajectoryFile, TrajectoryRecord};
