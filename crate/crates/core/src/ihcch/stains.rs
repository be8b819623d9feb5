use crate::error::{Error, Result};
use crate::image::{LabImage, Mask};

use super::{BSplit, IhcchConfig};

/// Chroma below which a bright pixel counts as background.
pub const BACKGROUND_MAX_CHROMA: f32 = 10.0;

/// Fewer tissue pixels than this makes a patch unusable.
pub const MIN_TISSUE_PIXELS: usize = 64;

/// Histogram bin width in b\* units.
const BIN_WIDTH: f64 = 0.25;
const MAX_BINS: usize = 4096;
/// Peaks closer than this (b\* units) belong to the same mode.
const MIN_PEAK_SEPARATION: f64 = 8.0;
/// Box-smoothing half-width in b\* units. Wider than the gaps 8-bit
/// quantisation leaves in the b\* histogram of noiseless images.
const SMOOTH_RADIUS: f64 = 2.0;
/// A secondary peak must reach this fraction of the main peak.
const MIN_PEAK_RATIO: f64 = 0.05;
/// The valley must dip below this fraction of the smaller peak.
const MAX_VALLEY_RATIO: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct StainMasks {
    /// Hematoxylin (Ki-67⁻).
    pub blue_mask: Mask,
    /// DAB (Ki-67⁺).
    pub brown_mask: Mask,
    pub b_threshold_used: f32,
}

/// Tissue mask: `true` unless the pixel is bright and nearly achromatic.
pub fn subtract_background(img: &LabImage, cfg: &IhcchConfig) -> Mask {
    let data = (0..img.len())
        .map(|i| !(img.l[i] > cfg.background_l_threshold && img.chroma(i) < BACKGROUND_MAX_CHROMA))
        .collect();
    Mask { width: img.width, height: img.height, data }
}

/// Splits chromatic tissue pixels into blue and brown by a b\* threshold.
///
/// Tissue pixels with chroma below `cfg.stain_chroma_min` (unstained
/// stroma) belong to neither mask.
pub fn separate_stains(img: &LabImage, tissue: &Mask, cfg: &IhcchConfig) -> Result<StainMasks> {
    let found = tissue.count();
    if found < MIN_TISSUE_PIXELS {
        return Err(Error::EmptyTissue { found, required: MIN_TISSUE_PIXELS });
    }
    let stained: Vec<usize> = (0..img.len())
        .filter(|&i| tissue.data[i] && img.chroma(i) >= cfg.stain_chroma_min)
        .collect();
    let values: Vec<f32> = stained.iter().map(|&i| img.b[i]).collect();
    let threshold = match cfg.b_split {
        BSplit::FixedZero => 0.0,
        BSplit::HistogramValley => histogram_valley(&values).unwrap_or(0.0),
    };
    let mut blue_mask = Mask::new(img.width, img.height);
    let mut brown_mask = Mask::new(img.width, img.height);
    for &i in &stained {
        if img.b[i] > threshold {
            brown_mask.data[i] = true;
        } else {
            blue_mask.data[i] = true;
        }
    }
    Ok(StainMasks { blue_mask, brown_mask, b_threshold_used: threshold })
}

/// Threshold at the deepest point between the two dominant histogram modes.
///
/// The histogram uses fixed-width bins in b\* units and is box-smoothed
/// before both peaks and valley are located. Ties go toward b\* = 0.
/// `None` when the data is not bimodal.
pub fn histogram_valley(values: &[f32]) -> Option<f32> {
    if values.len() < 2 {
        return None;
    }
    let lo = values.iter().copied().fold(f32::INFINITY, f32::min) as f64;
    let hi = values.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    if hi - lo < 1e-6 {
        return None;
    }
    let bins = (((hi - lo) / BIN_WIDTH).ceil() as usize).clamp(1, MAX_BINS);
    let width = (hi - lo) / bins as f64;
    let mut hist = vec![0u32; bins];
    for &v in values {
        let bin = (((v as f64 - lo) / width) as usize).min(bins - 1);
        hist[bin] += 1;
    }
    let center = |bin: usize| (lo + (bin as f64 + 0.5) * width) as f32;

    let r = (SMOOTH_RADIUS / width).round().max(1.0) as usize;
    let smooth: Vec<f64> = (0..bins)
        .map(|i| {
            let a = i.saturating_sub(r);
            let b = (i + r).min(bins - 1);
            hist[a..=b].iter().map(|&c| c as f64).sum::<f64>() / (b - a + 1) as f64
        })
        .collect();

    let peaks: Vec<usize> = (0..bins)
        .filter(|&i| {
            let left = if i == 0 { f64::NEG_INFINITY } else { smooth[i - 1] };
            let right = if i + 1 == bins { f64::NEG_INFINITY } else { smooth[i + 1] };
            smooth[i] > 0.0 && smooth[i] > left && smooth[i] >= right
        })
        .collect();
    let min_sep = (MIN_PEAK_SEPARATION / width).ceil() as usize;
    let &p1 = peaks.iter().max_by(|&&a, &&b| smooth[a].total_cmp(&smooth[b]).then(b.cmp(&a)))?;
    let &p2 = peaks
        .iter()
        .filter(|&&p| p.abs_diff(p1) >= min_sep)
        .max_by(|&&a, &&b| smooth[a].total_cmp(&smooth[b]).then(b.cmp(&a)))?;
    if smooth[p2] < MIN_PEAK_RATIO * smooth[p1] {
        return None;
    }
    let (left, right) = (p1.min(p2), p1.max(p2));
    let valley = (left..=right)
        .min_by(|&a, &b| smooth[a].total_cmp(&smooth[b]).then(center(a).abs().total_cmp(&center(b).abs())))
        .expect("non-empty range");
    if smooth[valley] > MAX_VALLEY_RATIO * smooth[p1].min(smooth[p2]) {
        return None;
    }
    Some(center(valley))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn bimodal_threshold_between_modes() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let blue = Normal::new(-20.0f32, 3.0).unwrap();
        let brown = Normal::new(25.0f32, 3.0).unwrap();
        let mut v: Vec<f32> = (0..4000).map(|_| blue.sample(&mut rng)).collect();
        v.extend((0..2500).map(|_| brown.sample(&mut rng)));
        let t = histogram_valley(&v).expect("bimodal");
        assert!((-10.0..=15.0).contains(&t), "threshold {t}");
    }

    #[test]
    fn quantised_comb_keeps_valley_between_modes() {
        // noiseless 8-bit images only hit every other b* value
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let blue = Normal::new(-12.0f32, 3.5).unwrap();
        let brown = Normal::new(11.0f32, 3.5).unwrap();
        let mut v: Vec<f32> = (0..1500).map(|_| (blue.sample(&mut rng) / 2.0).round() * 2.0).collect();
        v.extend((0..700).map(|_| (brown.sample(&mut rng) / 2.0).round() * 2.0 + 0.3));
        let t = histogram_valley(&v).expect("bimodal");
        assert!((-5.0..=5.0).contains(&t), "threshold {t}");
    }

    #[test]
    fn unimodal_falls_back() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let blue = Normal::new(-25.0f32, 4.0).unwrap();
        let v: Vec<f32> = (0..3000).map(|_| blue.sample(&mut rng)).collect();
        assert_eq!(histogram_valley(&v), None);
        assert_eq!(histogram_valley(&[1.0]), None);
        assert_eq!(histogram_valley(&[2.0, 2.0, 2.0]), None);
    }

    #[test]
    fn empty_tissue_is_an_error() {
        let lab = LabImage { width: 4, height: 4, l: vec![50.0; 16], a: vec![0.0; 16], b: vec![0.0; 16] };
        let tissue = Mask { width: 4, height: 4, data: vec![true; 16] };
        let err = separate_stains(&lab, &tissue, &IhcchConfig::default()).unwrap_err();
        assert!(matches!(err, Error::EmptyTissue { found: 16, .. }));
    }

    #[test]
    fn masks_partition_stained_tissue() {
        let n = 100;
        let b: Vec<f32> = (0..n).map(|i| i as f32 - 50.0).collect();
        let a = vec![0.0; n];
        let lab = LabImage { width: 10, height: 10, l: vec![50.0; n], a, b };
        let tissue = Mask { width: 10, height: 10, data: vec![true; n] };
        let cfg = IhcchConfig { b_split: BSplit::FixedZero, ..IhcchConfig::default() };
        let m = separate_stains(&lab, &tissue, &cfg).unwrap();
        for i in 0..n {
            let stained = lab.chroma(i) >= cfg.stain_chroma_min;
            assert!(!(m.blue_mask.data[i] && m.brown_mask.data[i]));
            assert_eq!(m.blue_mask.data[i] || m.brown_mask.data[i], stained);
            if m.brown_mask.data[i] {
                assert!(lab.b[i] > 0.0);
            }
        }
    }
}
