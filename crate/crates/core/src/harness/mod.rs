//! Datasets, configuration, persistence, reports and experiment recipes.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod report;
pub mod recipe;
