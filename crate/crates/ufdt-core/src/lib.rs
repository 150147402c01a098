//! Desk-scale ultrafast Doppler tomography pipeline.
//!
//! The crate covers the whole processing chain on synthetic data: vascular
//! phantom generation, plane-wave RF simulation, delay-and-sum beamforming
//! with coherent compounding, spatiotemporal SVD clutter rejection,
//! multi-orientation tomographic fusion with Wiener PSF deconvolution, and
//! quantitative vessel-network / perfusion analytics.
//!
//! Everything here is pure computation on in-memory values; file formats,
//! configuration and stage orchestration live in the companion CLI crate.

pub mod beamform;
pub mod clutter;
pub mod dceus;
pub mod fft;
pub mod fusion;
pub mod geometry;
pub mod grid;
pub mod metrics;
pub mod phantom;
pub mod rf_sim;
pub mod stats;
pub mod vessel;

pub use grid::{GridSpec, IndexBox, Volume};
