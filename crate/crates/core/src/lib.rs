//! Unsupervised pseudo-label domain adaptation for Ki-67 proliferation-index
//! scoring.
//!
//! The crate covers the whole experiment: colour-histogram nuclei detection
//! used as a silver-standard label source ([`ihcch`]), heatmap label
//! encoding and dataset construction ([`labels`]), a compact trainable
//! detector with five training regimes ([`regimes`]), the evaluation
//! protocol ([`metrics`]), t-SNE feature analysis ([`embed`]), a synthetic
//! histology generator with planted ground truth ([`synth`]) and the
//! experiment driver ([`experiment`]).

pub mod centroid;
pub mod color;
pub mod embed;
pub mod experiment;
pub mod error;
pub mod ihcch;
pub mod labels;
pub mod image;
pub mod metrics;
mod nan_serde;
pub mod pi;
pub mod regimes;
pub mod rng;
pub mod synth;

pub use centroid::{CellClass, Centroid, CentroidSet, DEFAULT_MICRONS_PER_PIXEL};
pub use error::{Error, Result};
pub use image::{LabImage, Mask, Raster, RgbImage};
pub use pi::{compute_pi, delta_pi, PiScore};
