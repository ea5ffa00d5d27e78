//! Rasterization and classification pipeline for gas-chromatography / mass
//! spectrometry (GCMS) ion-count samples.
//!
//! A sample is a sparse list of `(time, m/z, intensity)` readings. The
//! pipeline turns it into a dense 256 x N_t mass-by-time raster, extracts
//! time-averaged per-mass features, fits a linear multilabel head, and
//! combines predictions across time sizes and models by averaging clipped
//! logits. Evaluation uses the aggregated multilabel log loss.
//!
//! Module map:
//!
//! - [`ingest`]: sample, labels and metadata CSV parsing.
//! - [`raster`]: binning, log scaling, normalization, positional channels.
//! - [`augment`]: time resize, power-law time warp, mixup.
//! - [`model`]: time-averaged head, loss, schedule, training, saliency.
//! - [`ensemble`]: clipping, logit averaging, TTA, log loss, k-fold OOF.
//! - [`formats`]: GCR1 rasters, GCMP params, predictions CSV, PNG.
//! - [`synth`]: synthetic datasets with known label signatures.
//! - [`config`]: the flat key/value run config.

pub mod augment;
pub mod config;
pub mod ensemble;
pub mod error;
pub mod formats;
pub mod ingest;
pub mod model;
pub mod raster;
pub mod rng;
pub mod synth;

pub use error::{GcmsError, Result};

/// Number of target labels per sample.
pub const NUM_LABELS: usize = 9;

/// Number of integer m/z rows kept in a mass-by-time raster (m/z 0..=255).
pub const N_MASS_BINS: usize = 256;
