//! Unsupervised Ki-67 nuclei detection from the immunohistochemical colour
//! histogram: vector median filtering, background subtraction, b\*-channel
//! blue/brown separation and adaptive-radius detection.
//!
//! Its output serves as silver-standard labels for target-domain training.

mod detect;
mod median;
mod stains;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::centroid::{CellClass, CentroidSet};
use crate::color::rgb_to_lab;
use crate::error::Result;
use crate::image::RgbImage;

pub use detect::{detect_in_mask, detect_nuclei, distance_transform, label_components};
pub use median::vector_median_filter;
pub use stains::{
    histogram_valley, separate_stains, subtract_background, StainMasks, BACKGROUND_MAX_CHROMA,
    MIN_TISSUE_PIXELS,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BSplit {
    /// Deepest bin between the two dominant b\* modes; b\* = 0 if unimodal.
    HistogramValley,
    FixedZero,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IhcchConfig {
    pub median_window: usize,
    /// Bright, nearly neutral pixels above this L\* are background.
    pub background_l_threshold: f32,
    pub b_split: BSplit,
    /// Tissue pixels below this chroma are unstained and join neither mask.
    pub stain_chroma_min: f32,
    pub min_nucleus_radius_px: f64,
    pub max_nucleus_radius_px: f64,
}

impl Default for IhcchConfig {
    fn default() -> Self {
        Self {
            median_window: 3,
            background_l_threshold: 85.0,
            b_split: BSplit::HistogramValley,
            stain_chroma_min: 8.0,
            min_nucleus_radius_px: 2.0,
            max_nucleus_radius_px: 12.0,
        }
    }
}

impl IhcchConfig {
    pub fn validate(&self) -> Result<()> {
        use crate::error::Error::InvalidArgument;
        if self.median_window < 3 || self.median_window.is_multiple_of(2) {
            return Err(InvalidArgument(format!("median_window must be odd and >= 3, got {}", self.median_window)));
        }
        if !(self.min_nucleus_radius_px > 0.0 && self.min_nucleus_radius_px < self.max_nucleus_radius_px) {
            return Err(InvalidArgument("need 0 < min_nucleus_radius_px < max_nucleus_radius_px".into()));
        }
        Ok(())
    }

    /// Short content hash used in dataset manifests.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(&Sha256::digest(json)[..8])
    }
}

/// Full IHCCH detection on one RGB image.
pub fn ihcch_pipeline(img: &RgbImage, cfg: &IhcchConfig, microns_per_pixel: f64) -> Result<CentroidSet> {
    cfg.validate()?;
    let filtered = vector_median_filter(img, cfg.median_window);
    let lab = rgb_to_lab(&filtered);
    let tissue = subtract_background(&lab, cfg);
    let masks = separate_stains(&lab, &tissue, cfg)?;
    Ok(detect_nuclei(&masks, cfg, microns_per_pixel))
}

/// Copy of `img` with a small cross drawn on every centroid
/// (red for Ki-67⁺, cyan for Ki-67⁻).
pub fn overlay(img: &RgbImage, cs: &CentroidSet) -> RgbImage {
    let mut out = img.clone();
    let (w, h) = (img.width() as isize, img.height() as isize);
    for c in cs.centroids() {
        let color = match c.class {
            CellClass::Ki67Pos => [255, 0, 0],
            CellClass::Ki67Neg => [0, 220, 255],
        };
        let (px, py) = c.pixel();
        for d in -2isize..=2 {
            for (x, y) in [(px as isize + d, py as isize), (px as isize, py as isize + d)] {
                if x >= 0 && y >= 0 && x < w && y < h {
                    out.put(x as usize, y as usize, color);
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    #[test]
    fn white_patch_has_no_tissue() {
        let img = RgbImage::filled(32, 32, [255, 255, 255]);
        let err = ihcch_pipeline(&img, &IhcchConfig::default(), 0.5).unwrap_err();
        assert!(matches!(err, Error::EmptyTissue { found: 0, .. }));
        let lab = rgb_to_lab(&img);
        assert_eq!(subtract_background(&lab, &IhcchConfig::default()).count(), 0);
    }

    #[test]
    fn dark_patch_is_all_tissue() {
        let img = RgbImage::filled(16, 16, [90, 60, 50]);
        let lab = rgb_to_lab(&img);
        assert_eq!(subtract_background(&lab, &IhcchConfig::default()).fraction(), 1.0);
    }

    #[test]
    fn rejects_even_window() {
        let cfg = IhcchConfig { median_window: 4, ..IhcchConfig::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn hash_tracks_config() {
        let a = IhcchConfig::default();
        let b = IhcchConfig { background_l_threshold: 80.0, ..IhcchConfig::default() };
        assert_eq!(a.hash(), IhcchConfig::default().hash());
        assert_ne!(a.hash(), b.hash());
    }
}
