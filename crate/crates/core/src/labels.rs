//! Silver-standard dataset construction: tiling, tissue filtering,
//! centroid/heatmap encoding and incremental dataset builds.

use std::fs;
use std::path::Path;

use image::{ImageBuffer, Luma};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::centroid::{CellClass, Centroid, CentroidSet};
use crate::color::rgb_to_lab;
use crate::error::{Error, Result, ResultExt};
use crate::ihcch::{ihcch_pipeline, subtract_background, IhcchConfig};
use crate::image::{Mask, Raster, RgbImage};
use crate::rng::substream;

pub const DEFAULT_SIGMA_PX: f64 = 2.0;
pub const DEFAULT_PEAK_THRESHOLD: f32 = 0.5;
pub const DEFAULT_TISSUE_FRACTION_MIN: f64 = 0.8;

/// Two-channel Gaussian target map, one channel per class.
#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapLabel {
    pub width: usize,
    pub height: usize,
    pub neg: Raster,
    pub pos: Raster,
    pub sigma_px: f64,
}

impl HeatmapLabel {
    pub fn zeros(width: usize, height: usize, sigma_px: f64) -> Self {
        Self { width, height, neg: Raster::zeros(width, height), pos: Raster::zeros(width, height), sigma_px }
    }

    pub fn channel(&self, class: CellClass) -> &Raster {
        match class {
            CellClass::Ki67Neg => &self.neg,
            CellClass::Ki67Pos => &self.pos,
        }
    }

    pub fn channel_mut(&mut self, class: CellClass) -> &mut Raster {
        match class {
            CellClass::Ki67Neg => &mut self.neg,
            CellClass::Ki67Pos => &mut self.pos,
        }
    }

    /// Channel-major `[neg, pos]` buffer of length `2·w·h`.
    pub fn to_planar(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(2 * self.width * self.height);
        out.extend_from_slice(&self.neg.data);
        out.extend_from_slice(&self.pos.data);
        out
    }

    pub fn from_planar(width: usize, height: usize, data: &[f32], sigma_px: f64) -> Result<Self> {
        let n = width * height;
        if data.len() != 2 * n {
            return Err(Error::ShapeMismatch(format!("expected {} values, got {}", 2 * n, data.len())));
        }
        let mut hm = Self::zeros(width, height, sigma_px);
        hm.neg.data.copy_from_slice(&data[..n]);
        hm.pos.data.copy_from_slice(&data[n..]);
        Ok(hm)
    }
}

/// An image patch with its two-channel target.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledPatch {
    pub image: RgbImage,
    pub label: HeatmapLabel,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tile {
    pub image: RgbImage,
    /// Top-left corner in the source image.
    pub offset: (usize, usize),
}

/// Cuts `img` into `patch × patch` tiles on a `stride` grid; partial tiles
/// at the right and bottom edges are dropped.
pub fn tile_image(img: &RgbImage, patch: usize, stride: usize) -> Result<Vec<Tile>> {
    if patch == 0 || stride == 0 {
        return Err(Error::InvalidArgument("patch and stride must be positive".into()));
    }
    if patch > img.width().min(img.height()) {
        return Err(Error::InvalidArgument(format!(
            "patch {patch} larger than image {}x{}",
            img.width(),
            img.height()
        )));
    }
    let mut out = Vec::new();
    for y in (0..=img.height() - patch).step_by(stride) {
        for x in (0..=img.width() - patch).step_by(stride) {
            out.push(Tile { image: img.crop(x, y, patch, patch)?, offset: (x, y) });
        }
    }
    Ok(out)
}

pub fn tissue_mask(img: &RgbImage, cfg: &IhcchConfig) -> Mask {
    subtract_background(&rgb_to_lab(img), cfg)
}

/// Keeps the tiles whose tissue fraction reaches `min_fraction`.
/// `tissue_masks[i]` belongs to `tiles[i]`.
pub fn filter_patches(tiles: Vec<Tile>, tissue_masks: &[Mask], min_fraction: f64) -> Result<Vec<Tile>> {
    if !(min_fraction > 0.0 && min_fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!("min_fraction {min_fraction} outside (0, 1]")));
    }
    if tiles.len() != tissue_masks.len() {
        return Err(Error::ShapeMismatch(format!("{} tiles but {} masks", tiles.len(), tissue_masks.len())));
    }
    Ok(tiles.into_iter().zip(tissue_masks).filter(|(_, m)| m.fraction() >= min_fraction).map(|(t, _)| t).collect())
}

/// Renders centroids as truncated Gaussians (3σ), combined by per-pixel
/// maximum. Each kernel is centred on the pixel containing its centroid,
/// so that pixel holds exactly 1.0.
pub fn centroids_to_heatmap(cs: &CentroidSet, sigma_px: f64) -> Result<HeatmapLabel> {
    if !(sigma_px > 0.0) {
        return Err(Error::InvalidArgument(format!("sigma_px must be positive, got {sigma_px}")));
    }
    let (w, h) = (cs.width(), cs.height());
    let mut hm = HeatmapLabel::zeros(w, h, sigma_px);
    let reach = (3.0 * sigma_px).floor() as isize;
    let cutoff = (3.0 * sigma_px).powi(2);
    let inv = 1.0 / (2.0 * sigma_px * sigma_px);
    for c in cs.centroids() {
        let (px, py) = c.pixel();
        let ch = hm.channel_mut(c.class);
        for dy in -reach..=reach {
            let y = py as isize + dy;
            if y < 0 || y >= h as isize {
                continue;
            }
            for dx in -reach..=reach {
                let x = px as isize + dx;
                let d2 = (dx * dx + dy * dy) as f64;
                if x < 0 || x >= w as isize || d2 > cutoff {
                    continue;
                }
                let v = (-d2 * inv).exp() as f32;
                let i = y as usize * w + x as usize;
                if v > ch.data[i] {
                    ch.data[i] = v;
                }
            }
        }
    }
    Ok(hm)
}

/// Decodes each channel into centroids: 8-neighbourhood local maxima at or
/// above `peak_threshold`, accepted greedily by descending value and
/// suppressing later maxima closer than `min_separation_px`.
pub fn heatmap_to_centroids(
    hm: &HeatmapLabel,
    peak_threshold: f32,
    min_separation_px: f64,
    microns_per_pixel: f64,
) -> Result<CentroidSet> {
    if !(peak_threshold > 0.0 && peak_threshold < 1.0) {
        return Err(Error::InvalidArgument(format!("peak_threshold {peak_threshold} outside (0, 1)")));
    }
    let mut out = CentroidSet::new(hm.width, hm.height, microns_per_pixel);
    for class in CellClass::ALL {
        for (x, y) in decode_peaks(hm.channel(class), peak_threshold, min_separation_px) {
            out.push(Centroid::at_pixel(x, y, class))?;
        }
    }
    Ok(out)
}

fn decode_peaks(r: &Raster, threshold: f32, min_sep: f64) -> Vec<(usize, usize)> {
    let (w, h) = (r.width, r.height);
    let mut cand: Vec<(f32, usize)> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let v = r.data[y * w + x];
            if v < threshold {
                continue;
            }
            let mut is_max = true;
            'nb: for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                    if r.data[ny * w + nx] > v {
                        is_max = false;
                        break 'nb;
                    }
                }
            }
            if is_max {
                cand.push((v, y * w + x));
            }
        }
    }
    cand.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let sep2 = min_sep * min_sep;
    let mut accepted: Vec<(usize, usize)> = Vec::new();
    for (_, i) in cand {
        let (x, y) = (i % w, i / w);
        let clear = accepted.iter().all(|&(ax, ay)| {
            let (dx, dy) = (ax as f64 - x as f64, ay as f64 - y as f64);
            dx * dx + dy * dy >= sep2
        });
        if clear {
            accepted.push((x, y));
        }
    }
    accepted
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SsDatasetSpec {
    /// Number of patches; builds with the same seed nest as prefixes.
    pub increment: usize,
    pub patch_size: usize,
    pub tumor_fraction_min: f64,
    pub seed: u64,
    pub sigma_px: f64,
}

impl SsDatasetSpec {
    pub fn new(increment: usize, seed: u64) -> Self {
        Self {
            increment,
            patch_size: crate::synth::PATCH_SIZE,
            tumor_fraction_min: DEFAULT_TISSUE_FRACTION_MIN,
            seed,
            sigma_px: DEFAULT_SIGMA_PX,
        }
    }
}

/// Where a dataset patch came from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchOrigin {
    pub image_id: String,
    pub offset: (usize, usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SsSample {
    pub patch: LabeledPatch,
    pub centroids: CentroidSet,
    pub origin: PatchOrigin,
}

/// Tiles and filters the images, orders the qualifying patches by a seeded
/// shuffle and labels the first `spec.increment` of them with IHCCH.
pub fn build_ss_dataset(
    images: &[(String, RgbImage)],
    cfg: &IhcchConfig,
    spec: &SsDatasetSpec,
    microns_per_pixel: f64,
) -> Result<Vec<SsSample>> {
    cfg.validate()?;
    let mut candidates: Vec<(PatchOrigin, RgbImage)> = Vec::new();
    for (id, img) in images {
        let tiles = tile_image(img, spec.patch_size, spec.patch_size)?;
        let masks: Vec<Mask> = tiles.par_iter().map(|t| tissue_mask(&t.image, cfg)).collect();
        for t in filter_patches(tiles, &masks, spec.tumor_fraction_min)? {
            candidates.push((PatchOrigin { image_id: id.clone(), offset: t.offset }, t.image));
        }
    }
    if candidates.len() < spec.increment {
        return Err(Error::InsufficientPatches { found: candidates.len(), required: spec.increment });
    }
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.shuffle(&mut substream(spec.seed, "labels/ss-order"));
    order.truncate(spec.increment);

    order
        .par_iter()
        .map(|&k| {
            let (origin, img) = &candidates[k];
            let cs = ihcch_pipeline(img, cfg, microns_per_pixel)
                .context(format!("IHCCH on {} at {:?}", origin.image_id, origin.offset))?;
            let label = centroids_to_heatmap(&cs, spec.sigma_px)?;
            Ok(SsSample {
                patch: LabeledPatch { image: img.clone(), label },
                centroids: cs,
                origin: origin.clone(),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub spec: Option<SsDatasetSpec>,
    pub ihcch_config_hash: Option<String>,
    pub sigma_px: f64,
    pub microns_per_pixel: f64,
    pub patch_count: usize,
    pub origins: Vec<PatchOrigin>,
}

/// Writes `patches/NNNN.png`, `labels/NNNN_{neg,pos}.png` (16-bit) and `manifest.json`.
pub fn save_dataset(dir: &Path, patches: &[LabeledPatch], manifest: &DatasetManifest) -> Result<()> {
    fs::create_dir_all(dir.join("patches"))?;
    fs::create_dir_all(dir.join("labels"))?;
    for (i, p) in patches.iter().enumerate() {
        p.image.save_png(dir.join("patches").join(format!("{i:04}.png")))?;
        for class in CellClass::ALL {
            let r = p.label.channel(class);
            let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_raw(
                r.width as u32,
                r.height as u32,
                r.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16).collect(),
            )
            .expect("buffer sized from raster");
            buf.save(dir.join("labels").join(format!("{i:04}_{class}.png")))?;
        }
    }
    fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(manifest)?)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<LabeledPatch>)> {
    let manifest_path = dir.join("manifest.json");
    if !manifest_path.exists() {
        return Err(Error::DatasetMissing(dir.to_path_buf()));
    }
    let manifest: DatasetManifest = serde_json::from_slice(&fs::read(&manifest_path)?)?;
    let mut out = Vec::with_capacity(manifest.patch_count);
    for i in 0..manifest.patch_count {
        let image = RgbImage::load_png(dir.join("patches").join(format!("{i:04}.png")))?;
        let mut label = HeatmapLabel::zeros(image.width(), image.height(), manifest.sigma_px);
        for class in CellClass::ALL {
            let path = dir.join("labels").join(format!("{i:04}_{class}.png"));
            let raw = image::open(&path)?.into_luma16();
            if (raw.width() as usize, raw.height() as usize) != (image.width(), image.height()) {
                return Err(Error::ShapeMismatch(format!("{} does not match its patch", path.display())));
            }
            let ch = label.channel_mut(class);
            for (dst, &v) in ch.data.iter_mut().zip(raw.as_raw()) {
                *dst = v as f32 / 65535.0;
            }
        }
        out.push(LabeledPatch { image, label });
    }
    Ok((manifest, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn tiling_counts() {
        assert_eq!(tile_image(&RgbImage::filled(2000, 2000, [0; 3]), 256, 256).unwrap().len(), 49);
        let one = tile_image(&RgbImage::filled(256, 256, [0; 3]), 256, 256).unwrap();
        assert_eq!((one.len(), one[0].offset), (1, (0, 0)));
        assert_eq!(tile_image(&RgbImage::filled(300, 300, [0; 3]), 256, 256).unwrap().len(), 1);
        assert!(tile_image(&RgbImage::filled(100, 300, [0; 3]), 256, 256).is_err());
    }

    #[test]
    fn filter_by_tissue() {
        let cfg = IhcchConfig::default();
        let white = Tile { image: RgbImage::filled(32, 32, [255; 3]), offset: (0, 0) };
        let stained = Tile { image: RgbImage::filled(32, 32, [120, 90, 70]), offset: (32, 0) };
        let masks = [tissue_mask(&white.image, &cfg), tissue_mask(&stained.image, &cfg)];
        let kept = filter_patches(vec![white, stained], &masks, 0.8).unwrap();
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].offset, (32, 0));
    }

    fn one(x: usize, y: usize, class: CellClass) -> CentroidSet {
        let mut cs = CentroidSet::new(64, 64, 0.5);
        cs.push(Centroid::at_pixel(x, y, class)).unwrap();
        cs
    }

    #[test]
    fn gaussian_identity() {
        let hm = centroids_to_heatmap(&one(32, 32, CellClass::Ki67Pos), 2.0).unwrap();
        assert_eq!(hm.pos.get(32, 32), 1.0);
        assert!((hm.pos.get(34, 32) - (-0.5f32).exp()).abs() < 1e-6);
        assert_eq!(hm.neg.max(), 0.0);
        // truncated beyond 3σ
        assert_eq!(hm.pos.get(39, 32), 0.0);
    }

    #[test]
    fn overlapping_kernels_take_max() {
        let mut cs = CentroidSet::new(64, 64, 0.5);
        cs.push(Centroid::at_pixel(30, 30, CellClass::Ki67Neg)).unwrap();
        cs.push(Centroid::at_pixel(32, 30, CellClass::Ki67Neg)).unwrap();
        let hm = centroids_to_heatmap(&cs, 2.0).unwrap();
        assert!((hm.neg.get(31, 30) - (-1.0f32 / 8.0).exp()).abs() < 1e-6);
        assert!(hm.neg.max() <= 1.0);
    }

    #[test]
    fn empty_round_trip() {
        let hm = centroids_to_heatmap(&CentroidSet::new(16, 16, 0.5), 2.0).unwrap();
        assert_eq!(hm.neg.max(), 0.0);
        assert!(heatmap_to_centroids(&hm, 0.5, 6.0, 0.5).unwrap().is_empty());
    }

    #[test]
    fn single_round_trip() {
        let cs = one(10, 50, CellClass::Ki67Neg);
        let hm = centroids_to_heatmap(&cs, 2.0).unwrap();
        let back = heatmap_to_centroids(&hm, 0.5, 6.0, 0.5).unwrap();
        assert_eq!(back.centroids(), cs.centroids());
    }

    #[test]
    fn random_separated_round_trip() {
        let sigma = 2.0;
        for seed in 0..100u64 {
            let mut rng = crate::rng::seeded(seed);
            let mut cs = CentroidSet::new(128, 128, 0.5);
            let mut tries = 0;
            while cs.len() < 20 {
                tries += 1;
                assert!(tries < 100_000);
                let c = Centroid::at_pixel(
                    rng.gen_range(0..128),
                    rng.gen_range(0..128),
                    if rng.gen_bool(0.5) { CellClass::Ki67Pos } else { CellClass::Ki67Neg },
                );
                if cs.centroids().iter().all(|o| o.dist(&c) > 4.0 * sigma) {
                    cs.push(c).unwrap();
                }
            }
            let hm = centroids_to_heatmap(&cs, sigma).unwrap();
            let back = heatmap_to_centroids(&hm, 0.5, 3.0 * sigma, 0.5).unwrap();
            assert_eq!(back.len(), 20, "seed {seed}");
            for class in CellClass::ALL {
                assert_eq!(back.count(class), cs.count(class));
            }
            for c in cs.centroids() {
                assert!(back.of_class(c.class).any(|b| b.dist(c) <= 1.0), "seed {seed}");
            }
        }
    }

    #[test]
    fn planar_round_trip() {
        let hm = centroids_to_heatmap(&one(3, 4, CellClass::Ki67Pos), 2.0).unwrap();
        let back = HeatmapLabel::from_planar(64, 64, &hm.to_planar(), 2.0).unwrap();
        assert_eq!(back, hm);
        assert!(HeatmapLabel::from_planar(64, 64, &[0.0; 5], 2.0).is_err());
    }
}
