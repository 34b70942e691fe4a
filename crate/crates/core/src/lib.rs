//! Promptable segmentation of georeferenced rasters.
//!
//! The crate is organised around the pipeline stages:
//!
//! * [`geodata`] holds the raster, mask and prompt types together with GeoTIFF/PNG
//!   and GeoJSON/Shapefile I/O, mask mosaicking and raster vectorization.
//! * [`backends`] defines the inference interface (grounded detection plus
//!   promptable segmentation) and ships a deterministic scene-driven mock.
//! * [`promptseg`] runs the zero-shot engines: general, box, point and the
//!   iterative text loop.
//! * [`oneshot`] implements text-derived exemplar selection, scale-weight
//!   fine-tuning and the location-prior segmentation loop.
//! * [`metrics`] computes confusion counts, the five pixel metrics and aggregates.
//! * [`pipeline`] turns dataset manifests into runs, output directories and reports.
//! * [`api`] contains the JSON wire types shared by the HTTP server and client.

pub mod api;
pub mod backends;
pub mod geodata;
pub mod metrics;
pub mod oneshot;
pub mod pipeline;
pub mod promptseg;

pub use backends::{Backend, BackendError};
pub use geodata::{
    BinaryMask, GeoError, GeoRaster, GeoTransform, Grid, InstanceMask, LabelRaster, PixelBox,
    PixelPoint, PromptKind, PromptSet,
};
