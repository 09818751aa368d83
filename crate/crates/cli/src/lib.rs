//! Experiment runner for MetaXL studies: config handling, the study grid,
//! artifact formats and representation analysis.

pub mod analyze;
pub mod artifacts;
pub mod config;
pub mod datagen;
pub mod study;
