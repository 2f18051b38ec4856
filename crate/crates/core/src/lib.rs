pub mod app;
pub mod config;
pub mod dataset;
pub mod estimator;
pub mod evaluation;
pub mod geometry;
pub mod imu;
pub mod initialization;
pub mod pipeline;
pub mod preprocessing;
pub mod simulator;
pub mod voxel_map;
