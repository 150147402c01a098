//! Pipeline configuration, file formats and stage orchestration.

pub mod config;
pub mod formats;
pub mod stages;
