//! sRGB ↔ CIE L\*a\*b\* conversion (D65 reference white, 2° observer).

use std::sync::OnceLock;

use crate::image::{LabImage, RgbImage};

const XYZ_FROM_RGB: [[f64; 3]; 3] = [
    [0.412453, 0.357580, 0.180423],
    [0.212671, 0.715160, 0.072169],
    [0.019334, 0.119193, 0.950227],
];

const RGB_FROM_XYZ: [[f64; 3]; 3] = [
    [3.240481340, -1.537151516, -0.498536326],
    [-0.969254949, 1.875990001, 0.041555930],
    [0.055646640, -0.204041338, 1.057311069],
];

pub const D65_WHITE: [f64; 3] = [0.95047, 1.0, 1.08883];

const EPSILON: f64 = 216.0 / 24389.0; // (6/29)^3
const KAPPA: f64 = 24389.0 / 27.0;

fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn linear_to_srgb(c: f64) -> f64 {
    if c <= 0.0031308 {
        12.92 * c
    } else {
        1.055 * c.powf(1.0 / 2.4) - 0.055
    }
}

fn linear_lut() -> &'static [f64; 256] {
    static LUT: OnceLock<[f64; 256]> = OnceLock::new();
    LUT.get_or_init(|| {
        let mut t = [0.0; 256];
        for (i, v) in t.iter_mut().enumerate() {
            *v = srgb_to_linear(i as f64 / 255.0);
        }
        t
    })
}

#[inline]
fn lab_f(t: f64) -> f64 {
    if t > EPSILON {
        t.cbrt()
    } else {
        (KAPPA * t + 16.0) / 116.0
    }
}

#[inline]
fn lab_f_inv(f: f64) -> f64 {
    let t = f * f * f;
    if t > EPSILON {
        t
    } else {
        (116.0 * f - 16.0) / KAPPA
    }
}

/// Converts one 8-bit sRGB triplet to `[L, a, b]`.
pub fn rgb_pixel_to_lab(rgb: [u8; 3]) -> [f64; 3] {
    let lut = linear_lut();
    let lin = [lut[rgb[0] as usize], lut[rgb[1] as usize], lut[rgb[2] as usize]];
    let mut xyz = [0.0; 3];
    for (k, row) in XYZ_FROM_RGB.iter().enumerate() {
        xyz[k] = (row[0] * lin[0] + row[1] * lin[1] + row[2] * lin[2]) / D65_WHITE[k];
    }
    let (fx, fy, fz) = (lab_f(xyz[0]), lab_f(xyz[1]), lab_f(xyz[2]));
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

/// Converts `[L, a, b]` to continuous sRGB in `[0, 1]` (clipped to gamut).
pub fn lab_to_rgb_unit(lab: [f64; 3]) -> [f64; 3] {
    let fy = (lab[0] + 16.0) / 116.0;
    let fx = fy + lab[1] / 500.0;
    let fz = fy - lab[2] / 200.0;
    let xyz = [
        lab_f_inv(fx) * D65_WHITE[0],
        lab_f_inv(fy) * D65_WHITE[1],
        lab_f_inv(fz) * D65_WHITE[2],
    ];
    let mut out = [0.0; 3];
    for (k, row) in RGB_FROM_XYZ.iter().enumerate() {
        let lin = row[0] * xyz[0] + row[1] * xyz[1] + row[2] * xyz[2];
        out[k] = linear_to_srgb(lin.clamp(0.0, 1.0)).clamp(0.0, 1.0);
    }
    out
}

/// Converts `[L, a, b]` to the nearest 8-bit sRGB triplet.
pub fn lab_to_rgb(lab: [f64; 3]) -> [u8; 3] {
    let u = lab_to_rgb_unit(lab);
    [0, 1, 2].map(|k| (u[k] * 255.0).round() as u8)
}

pub fn rgb_to_lab(img: &RgbImage) -> LabImage {
    let n = img.width() * img.height();
    let (mut l, mut a, mut b) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for px in img.pixels() {
        let lab = rgb_pixel_to_lab(px);
        l.push(lab[0] as f32);
        a.push(lab[1] as f32);
        b.push(lab[2] as f32);
    }
    LabImage { width: img.width(), height: img.height(), l, a, b }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn white_and_black() {
        let w = rgb_pixel_to_lab([255, 255, 255]);
        assert!((w[0] - 100.0).abs() < 1e-3);
        assert!(w[1].abs() < 0.01 && w[2].abs() < 0.01);
        assert_eq!(rgb_pixel_to_lab([0, 0, 0]), [0.0, 0.0, 0.0]);
    }

    #[test]
    fn matches_reference_colorimetry() {
        // Values from an independent sRGB/D65 implementation.
        let cases: [([u8; 3], [f64; 3]); 5] = [
            ([0, 0, 255], [32.295673, 79.185591, -107.857300]),
            ([255, 0, 0], [53.240588, 80.092308, 67.202751]),
            ([0, 255, 0], [87.735099, -86.183030, 83.179703]),
            ([128, 64, 32], [34.724796, 24.999568, 31.372840]),
            ([200, 150, 100], [65.760061, 12.758895, 33.564737]),
        ];
        for (rgb, want) in cases {
            let got = rgb_pixel_to_lab(rgb);
            for k in 0..3 {
                assert!((got[k] - want[k]).abs() < 0.1, "{rgb:?}: {got:?} vs {want:?}");
            }
        }
    }

    #[test]
    fn gray_axis_is_neutral() {
        for g in 0..=255u8 {
            let lab = rgb_pixel_to_lab([g, g, g]);
            assert!(lab[1].abs() < 0.01 && lab[2].abs() < 0.01, "gray {g}: {lab:?}");
            assert!((0.0..=100.0 + 1e-9).contains(&lab[0]));
        }
    }

    #[test]
    fn lab_round_trip_on_palette() {
        for rgb in [[10u8, 200, 30], [240, 240, 238], [90, 60, 40], [70, 80, 160]] {
            let back = lab_to_rgb(rgb_pixel_to_lab(rgb));
            assert_eq!(back, rgb);
        }
    }
}
