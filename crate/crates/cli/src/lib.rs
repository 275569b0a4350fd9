//! Command-line orchestration of the anomaly segmentation pipeline.

pub mod config;
pub mod error;
pub mod pipeline;
pub mod app;
pub mod report;
pub mod rundir;
pub mod stages;
