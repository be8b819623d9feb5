use std::f64::consts::PI;

use crate::centroid::{CellClass, Centroid, CentroidSet};
use crate::image::Mask;

use super::{IhcchConfig, StainMasks};

/// 8-connected component labels; 0 is background, components are `1..=n`.
pub fn label_components(mask: &Mask) -> (Vec<u32>, usize) {
    let (w, h) = (mask.width, mask.height);
    let mut labels = vec![0u32; w * h];
    let mut next = 0u32;
    let mut stack = Vec::new();
    for start in 0..w * h {
        if !mask.data[start] || labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (x, y) = ((i % w) as isize, (i / w) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if mask.data[j] && labels[j] == 0 {
                        labels[j] = next;
                        stack.push(j);
                    }
                }
            }
        }
    }
    (labels, next as usize)
}

/// 1-D squared distance transform of a sampled function (lower envelope of parabolas).
fn edt_1d(f: &[f64], d: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let mut s;
        loop {
            let p = v[k];
            s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q - p) as f64);
            if s <= z[k] {
                k -= 1;
            } else {
                break;
            }
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, dq) in d.iter_mut().enumerate().take(n) {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        *dq = (q as f64 - p as f64).powi(2) + f[p];
    }
}

const FAR: f64 = 1e20;

/// Euclidean distance from every mask pixel to the nearest non-mask pixel.
///
/// Pixels outside the image count as background. Background pixels get 0.
pub fn distance_transform(mask: &Mask) -> Vec<f64> {
    let (w, h) = (mask.width + 2, mask.height + 2);
    let mut grid = vec![0.0f64; w * h];
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.get(x, y) {
                grid[(y + 1) * w + x + 1] = FAR;
            }
        }
    }
    let n = w.max(h);
    let (mut f, mut d) = (vec![0.0; n], vec![0.0; n]);
    let (mut v, mut z) = (vec![0usize; n], vec![0.0; n + 1]);
    for x in 0..w {
        for y in 0..h {
            f[y] = grid[y * w + x];
        }
        edt_1d(&f[..h], &mut d[..h], &mut v, &mut z);
        for y in 0..h {
            grid[y * w + x] = d[y];
        }
    }
    for y in 0..h {
        f[..w].copy_from_slice(&grid[y * w..(y + 1) * w]);
        edt_1d(&f[..w], &mut d[..w], &mut v, &mut z);
        grid[y * w..(y + 1) * w].copy_from_slice(&d[..w]);
    }
    let mut out = vec![0.0; mask.width * mask.height];
    for y in 0..mask.height {
        for x in 0..mask.width {
            out[y * mask.width + x] = grid[(y + 1) * w + x + 1].sqrt();
        }
    }
    out
}

/// Adaptive-radius centroid detection on one binary mask.
///
/// Components smaller than a minimum-radius disk are dropped as debris.
/// Inside each component, local maxima of the distance transform with value
/// in `[min_radius, max_radius]` are visited from largest to smallest and
/// accepted unless an accepted maximum of the same component lies closer
/// than the larger of the two distance values.
pub fn detect_in_mask(mask: &Mask, class: CellClass, cfg: &IhcchConfig, out: &mut CentroidSet) {
    let (w, h) = (mask.width, mask.height);
    let (labels, n) = label_components(mask);
    if n == 0 {
        return;
    }
    let mut area = vec![0usize; n + 1];
    for &l in &labels {
        area[l as usize] += 1;
    }
    let min_area = PI * cfg.min_nucleus_radius_px * cfg.min_nucleus_radius_px;
    let dist = distance_transform(mask);

    let mut candidates: Vec<(f64, usize)> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let l = labels[i] as usize;
            if l == 0 || (area[l] as f64) < min_area {
                continue;
            }
            let d = dist[i];
            if d < cfg.min_nucleus_radius_px || d > cfg.max_nucleus_radius_px {
                continue;
            }
            let mut is_max = true;
            'nb: for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let (nx, ny) = (x as isize + dx, y as isize + dy);
                    if (dx, dy) == (0, 0) || nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                        continue;
                    }
                    if dist[ny as usize * w + nx as usize] > d {
                        is_max = false;
                        break 'nb;
                    }
                }
            }
            if is_max {
                candidates.push((d, i));
            }
        }
    }
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));

    let mut accepted: Vec<(f64, usize)> = Vec::new();
    for (d, i) in candidates {
        let (x, y) = ((i % w) as f64, (i / w) as f64);
        let clash = accepted.iter().any(|&(da, j)| {
            labels[j] == labels[i] && {
                let (ax, ay) = ((j % w) as f64, (j / w) as f64);
                (x - ax).hypot(y - ay) < d.max(da)
            }
        });
        if !clash {
            accepted.push((d, i));
        }
    }
    for (_, i) in accepted {
        out.push(Centroid::at_pixel(i % w, i / w, class)).expect("pixel centers are in bounds");
    }
}

pub fn detect_nuclei(masks: &StainMasks, cfg: &IhcchConfig, microns_per_pixel: f64) -> CentroidSet {
    let (w, h) = (masks.blue_mask.width, masks.blue_mask.height);
    let mut out = CentroidSet::new(w, h, microns_per_pixel);
    detect_in_mask(&masks.blue_mask, CellClass::Ki67Neg, cfg, &mut out);
    detect_in_mask(&masks.brown_mask, CellClass::Ki67Pos, cfg, &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn disk(mask: &mut Mask, cx: f64, cy: f64, r: f64) {
        for y in 0..mask.height {
            for x in 0..mask.width {
                if (x as f64 + 0.5 - cx).hypot(y as f64 + 0.5 - cy) <= r {
                    mask.set(x, y, true);
                }
            }
        }
    }

    fn brute_edt(mask: &Mask) -> Vec<f64> {
        let (w, h) = (mask.width as isize, mask.height as isize);
        let mut out = vec![0.0; (w * h) as usize];
        for y in 0..h {
            for x in 0..w {
                if !mask.get(x as usize, y as usize) {
                    continue;
                }
                let mut best = f64::INFINITY;
                for by in -1..=h {
                    for bx in -1..=w {
                        let outside = bx < 0 || by < 0 || bx >= w || by >= h;
                        if outside || !mask.get(bx as usize, by as usize) {
                            best = best.min(((bx - x) as f64).hypot((by - y) as f64));
                        }
                    }
                }
                out[(y * w + x) as usize] = best;
            }
        }
        out
    }

    #[test]
    fn edt_matches_brute_force() {
        let mut m = Mask::new(23, 17);
        disk(&mut m, 8.0, 8.0, 6.0);
        disk(&mut m, 16.0, 9.0, 5.0);
        m.set(0, 0, true);
        m.set(22, 16, true);
        let fast = distance_transform(&m);
        let slow = brute_edt(&m);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn single_disk_one_centroid() {
        let mut m = Mask::new(40, 40);
        disk(&mut m, 20.0, 21.0, 8.0);
        let mut out = CentroidSet::new(40, 40, 0.5);
        detect_in_mask(&m, CellClass::Ki67Neg, &IhcchConfig::default(), &mut out);
        assert_eq!(out.len(), 1);
        let c = out.centroids()[0];
        assert!((c.x - 20.0).hypot(c.y - 21.0) <= 1.0, "{c:?}");
    }

    #[test]
    fn overlapping_pair_split() {
        // radius 6, overlap 20% of the diameter -> centers 9.6 px apart
        let mut m = Mask::new(48, 32);
        let (a, b) = ((18.0, 16.0), (27.6, 16.0));
        disk(&mut m, a.0, a.1, 6.0);
        disk(&mut m, b.0, b.1, 6.0);
        assert_eq!(label_components(&m).1, 1);
        let mut out = CentroidSet::new(48, 32, 0.5);
        detect_in_mask(&m, CellClass::Ki67Pos, &IhcchConfig::default(), &mut out);
        assert_eq!(out.len(), 2);
        for (px, py) in [a, b] {
            assert!(out.centroids().iter().any(|c| (c.x - px).hypot(c.y - py) <= 3.0));
        }
    }

    #[test]
    fn empty_mask_empty_set() {
        let masks = StainMasks { blue_mask: Mask::new(8, 8), brown_mask: Mask::new(8, 8), b_threshold_used: 0.0 };
        assert!(detect_nuclei(&masks, &IhcchConfig::default(), 0.5).is_empty());
    }

    #[test]
    fn debris_is_dropped() {
        let mut m = Mask::new(20, 20);
        disk(&mut m, 10.0, 10.0, 1.5);
        let mut out = CentroidSet::new(20, 20, 0.5);
        detect_in_mask(&m, CellClass::Ki67Neg, &IhcchConfig::default(), &mut out);
        assert!(out.is_empty());
    }

    proptest! {
        #[test]
        fn adding_disjoint_disk_never_lowers_count(
            cx in 6.0f64..26.0, cy in 6.0f64..58.0, r in 2.5f64..6.0, r2 in 2.5f64..6.0, cy2 in 8.0f64..56.0,
        ) {
            let cfg = IhcchConfig::default();
            let mut m = Mask::new(64, 64);
            disk(&mut m, cx, cy, r);
            let mut before = CentroidSet::new(64, 64, 0.5);
            detect_in_mask(&m, CellClass::Ki67Neg, &cfg, &mut before);
            // second disk in the right half, at least 2 px from the first
            disk(&mut m, 46.0, cy2, r2);
            let mut after = CentroidSet::new(64, 64, 0.5);
            detect_in_mask(&m, CellClass::Ki67Neg, &cfg, &mut after);
            prop_assert!(after.len() >= before.len());
        }
    }
}
