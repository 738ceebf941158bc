//! Crowdsourced GPS samples to road masks.
//!
//! The crate turns noisy vehicle GPS feeds into raster layers that line up
//! with aerial imagery tiles, and ships the pieces needed around that:
//!
//! * [`ingest`] streams CSV records into [`GpsSample`]s and derives
//!   per-vehicle sampling intervals; [`stats`] summarises a feed
//!   (interval/speed histograms, measurement resolution detection).
//! * [`geo`] projects coordinates into tile pixel space and indexes samples.
//! * [`augment`] holds the seeded point-set augmentations (subsampling,
//!   sub-resolution, perturbation, omission).
//! * [`render`] rasterizes point sets into density and feature channels;
//!   [`rfr`] and [`png_io`] are the file formats.
//! * [`extract`] is the kernel density baseline and [`eval`] the IoU
//!   protocol, degradation curves and dataset splits.
//! * [`nn`] contains double precision reference kernels for directional 1D
//!   transpose convolution, the four-direction decoder block, and gradient
//!   checking.
//! * [`synth`] generates labelled synthetic road tiles.

pub mod augment;
pub mod cli;
pub mod error;
pub mod eval;
pub mod extract;
pub mod geo;
pub mod ingest;
pub mod nn;
pub mod png_io;
pub mod render;
pub mod rfr;
pub mod stats;
pub mod synth;

pub use augment::{AugmentConfig, RngStream};
pub use error::{Error, Result};
pub use geo::{PixelPoint, SpatialIndex, TileSpec};
pub use ingest::{GpsSample, IngestSummary};
pub use eval::{EvalReport, Split, SplitAssignment};
pub use extract::{ExtractionParams, Mask, TriState};
pub use render::{Raster, RenderConfig, RenderMode, Scale};
pub use stats::StatsReport;
