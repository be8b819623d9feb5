//! Joint geometric augmentation of a patch and its label: quarter-turn
//! rotation followed by isotropic scaling about the patch centre.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::labels::HeatmapLabel;

pub const SCALE_RANGE: (f64, f64) = (0.8, 1.2);
const PAD_RGB: f64 = 255.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transform {
    /// Clockwise quarter turns, 0..4.
    pub quarter_turns: u8,
    pub scale: f64,
}

impl Transform {
    pub const IDENTITY: Transform = Transform { quarter_turns: 0, scale: 1.0 };

    pub fn sample(rng: &mut crate::rng::Rng) -> Self {
        Self { quarter_turns: rng.gen_range(0..4), scale: rng.gen_range(SCALE_RANGE.0..=SCALE_RANGE.1) }
    }

    /// Where the point `(x, y)` of a `w × h` frame lands after the transform.
    pub fn map_point(&self, x: f64, y: f64, w: usize, h: usize) -> (f64, f64) {
        let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
        let (mut dx, mut dy) = (x - cx, y - cy);
        for _ in 0..self.quarter_turns % 4 {
            (dx, dy) = (-dy, dx);
        }
        (cx + self.scale * dx, cy + self.scale * dy)
    }

    /// Source point that lands on `(x, y)`.
    pub fn inverse_point(&self, x: f64, y: f64, w: usize, h: usize) -> (f64, f64) {
        let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
        let (mut dx, mut dy) = ((x - cx) / self.scale, (y - cy) / self.scale);
        for _ in 0..self.quarter_turns % 4 {
            (dx, dy) = (dy, -dx);
        }
        (cx + dx, cy + dy)
    }
}

/// Bilinear sample of a planar channel at continuous coordinates; pixel
/// `(i, j)` has its centre at `(i + 0.5, j + 0.5)`.
#[inline]
fn bilinear(plane: &[f32], w: usize, h: usize, x: f64, y: f64, pad: f64) -> f64 {
    let fx = x - 0.5;
    let fy = y - 0.5;
    let x0 = fx.floor();
    let y0 = fy.floor();
    let (tx, ty) = (fx - x0, fy - y0);
    let at = |xi: f64, yi: f64| -> f64 {
        if xi < 0.0 || yi < 0.0 || xi >= w as f64 || yi >= h as f64 {
            pad
        } else {
            plane[yi as usize * w + xi as usize] as f64
        }
    };
    let top = at(x0, y0) * (1.0 - tx) + at(x0 + 1.0, y0) * tx;
    let bottom = at(x0, y0 + 1.0) * (1.0 - tx) + at(x0 + 1.0, y0 + 1.0) * tx;
    top * (1.0 - ty) + bottom * ty
}

fn check_square(w: usize, h: usize, t: &Transform) -> Result<()> {
    if w != h && t.quarter_turns % 2 == 1 {
        return Err(Error::ShapeMismatch(format!("quarter turn of a non-square {w}x{h} frame")));
    }
    Ok(())
}

/// Window `(x0, y0, cw, ch)` of the transformed pair as planar floats:
/// the image scaled to `[-1, 1]` (`3 × ch × cw`) and the label (`2 × ch × cw`).
pub fn warp_window(
    rgb_planes: &[f32],
    label_planes: &[f32],
    w: usize,
    h: usize,
    t: &Transform,
    window: (usize, usize, usize, usize),
) -> Result<(Vec<f32>, Vec<f32>)> {
    check_square(w, h, t)?;
    let (x0, y0, cw, ch) = window;
    let n = w * h;
    let m = cw * ch;
    let mut input = vec![0.0f32; 3 * m];
    let mut target = vec![0.0f32; 2 * m];
    for v in 0..ch {
        for u in 0..cw {
            let (sx, sy) = t.inverse_point((x0 + u) as f64 + 0.5, (y0 + v) as f64 + 0.5, w, h);
            let o = v * cw + u;
            for c in 0..3 {
                let val = bilinear(&rgb_planes[c * n..(c + 1) * n], w, h, sx, sy, PAD_RGB);
                input[c * m + o] = (val / 127.5 - 1.0) as f32;
            }
            for c in 0..2 {
                target[c * m + o] = bilinear(&label_planes[c * n..(c + 1) * n], w, h, sx, sy, 0.0) as f32;
            }
        }
    }
    Ok((input, target))
}

/// 8-bit RGB as three `f32` planes of raw values.
pub fn rgb_planes(img: &RgbImage) -> Vec<f32> {
    let n = img.width() * img.height();
    let mut out = vec![0.0; 3 * n];
    for (i, px) in img.data().chunks_exact(3).enumerate() {
        for c in 0..3 {
            out[c * n + i] = px[c] as f32;
        }
    }
    out
}

/// Applies `t` to a patch and its label over the full frame; image pixels
/// outside the source are white, label pixels zero.
pub fn augment(patch: &RgbImage, label: &HeatmapLabel, t: &Transform) -> Result<(RgbImage, HeatmapLabel)> {
    let (w, h) = (patch.width(), patch.height());
    if (label.width, label.height) != (w, h) {
        return Err(Error::ShapeMismatch("label and patch sizes differ".into()));
    }
    check_square(w, h, t)?;
    let rgb = rgb_planes(patch);
    let lab = label.to_planar();
    let n = w * h;
    let mut img = vec![0u8; 3 * n];
    let mut out = vec![0.0f32; 2 * n];
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = t.inverse_point(x as f64 + 0.5, y as f64 + 0.5, w, h);
            let o = y * w + x;
            for c in 0..3 {
                img[3 * o + c] = bilinear(&rgb[c * n..(c + 1) * n], w, h, sx, sy, PAD_RGB).round().clamp(0.0, 255.0) as u8;
            }
            for c in 0..2 {
                out[c * n + o] = bilinear(&lab[c * n..(c + 1) * n], w, h, sx, sy, 0.0) as f32;
            }
        }
    }
    Ok((RgbImage::new(w, h, img)?, HeatmapLabel::from_planar(w, h, &out, label.sigma_px)?))
}

/// Draws a transform and applies it.
pub fn augment_random(
    patch: &RgbImage,
    label: &HeatmapLabel,
    seed: u64,
) -> Result<(RgbImage, HeatmapLabel)> {
    let t = Transform::sample(&mut crate::rng::substream(seed, "regimes/augment"));
    augment(patch, label, &t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::centroid::{CellClass, Centroid, CentroidSet};
    use crate::labels::{centroids_to_heatmap, heatmap_to_centroids};

    fn sample_pair() -> (RgbImage, HeatmapLabel) {
        let (img, gt) = crate::synth::gen_patch(&crate::synth::DomainParams::source(), 40.0, 9).unwrap();
        let label = centroids_to_heatmap(&gt.centroids, 2.0).unwrap();
        (img, label)
    }

    #[test]
    fn identity_is_exact() {
        let (img, label) = sample_pair();
        let (a, b) = augment(&img, &label, &Transform::IDENTITY).unwrap();
        assert_eq!(a, img);
        assert_eq!(b, label);
    }

    #[test]
    fn half_turn_twice_is_identity() {
        let (img, label) = sample_pair();
        let t = Transform { quarter_turns: 2, scale: 1.0 };
        let (a, b) = augment(&img, &label, &t).unwrap();
        assert_ne!(a, img);
        let (a2, b2) = augment(&a, &b, &t).unwrap();
        assert_eq!(a2, img);
        assert_eq!(b2, label);
    }

    #[test]
    fn quarter_turn_moves_peak() {
        let mut cs = CentroidSet::new(256, 256, 0.5);
        cs.push(Centroid::at_pixel(10, 10, CellClass::Ki67Pos)).unwrap();
        let label = centroids_to_heatmap(&cs, 2.0).unwrap();
        let img = RgbImage::filled(256, 256, [200, 180, 170]);
        let t = Transform { quarter_turns: 1, scale: 1.0 };
        let (_, rotated) = augment(&img, &label, &t).unwrap();
        let back = heatmap_to_centroids(&rotated, 0.5, 6.0, 0.5).unwrap();
        assert_eq!(back.len(), 1);
        let (ex, ey) = t.map_point(10.5, 10.5, 256, 256);
        assert_eq!((ex, ey), (245.5, 10.5));
        let c = &back.centroids()[0];
        assert!(((c.x - ex).powi(2) + (c.y - ey).powi(2)).sqrt() <= 1.0);
        assert_eq!(c.class, CellClass::Ki67Pos);
    }

    #[test]
    fn scaling_pads_with_white() {
        let img = RgbImage::filled(32, 32, [10, 20, 30]);
        let label = HeatmapLabel::zeros(32, 32, 2.0);
        let (a, _) = augment(&img, &label, &Transform { quarter_turns: 0, scale: 0.8 }).unwrap();
        assert_eq!(a.get(0, 0), [255, 255, 255]);
        assert_eq!(a.get(16, 16), [10, 20, 30]);
    }

    #[test]
    fn window_matches_full_frame() {
        let (img, label) = sample_pair();
        let t = Transform { quarter_turns: 3, scale: 1.13 };
        let (full_img, full_label) = augment(&img, &label, &t).unwrap();
        let (input, target) =
            warp_window(&rgb_planes(&img), &label.to_planar(), 256, 256, &t, (40, 100, 16, 8)).unwrap();
        for v in 0..8 {
            for u in 0..16 {
                let px = full_img.get(40 + u, 100 + v);
                let got = ((input[v * 16 + u] + 1.0) * 127.5).round() as u8;
                assert!((got as i32 - px[0] as i32).abs() <= 1);
                assert!((target[128 + v * 16 + u] - full_label.pos.get(40 + u, 100 + v)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn inverse_undoes_map() {
        let t = Transform { quarter_turns: 1, scale: 0.9 };
        let (x, y) = t.map_point(12.25, 200.5, 256, 256);
        let (bx, by) = t.inverse_point(x, y, 256, 256);
        assert!((bx - 12.25).abs() < 1e-9 && (by - 200.5).abs() < 1e-9);
    }
}
