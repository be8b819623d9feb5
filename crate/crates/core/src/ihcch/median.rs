use crate::image::RgbImage;

/// Vector median filter in RGB space.
///
/// Every output pixel is the window member with the smallest summed
/// Euclidean distance to the other members, so no new colors appear.
/// Borders replicate the nearest edge pixel. Ties go to the first member
/// in row-major window order.
pub fn vector_median_filter(img: &RgbImage, window: usize) -> RgbImage {
    assert!(window >= 3 && window % 2 == 1, "window must be odd and >= 3, got {window}");
    let (w, h) = (img.width(), img.height());
    let r = (window / 2) as isize;
    let n = window * window;
    let mut out = img.clone();
    let mut members: Vec<[f32; 3]> = vec![[0.0; 3]; n];
    let mut raw: Vec<[u8; 3]> = vec![[0; 3]; n];
    let mut sums = vec![0.0f32; n];

    for y in 0..h {
        for x in 0..w {
            let mut k = 0;
            for dy in -r..=r {
                let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                for dx in -r..=r {
                    let xx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                    let p = img.get(xx, yy);
                    raw[k] = p;
                    members[k] = [p[0] as f32, p[1] as f32, p[2] as f32];
                    k += 1;
                }
            }
            if raw.iter().all(|p| *p == raw[0]) {
                continue;
            }
            sums.iter_mut().for_each(|s| *s = 0.0);
            for i in 0..n {
                for j in i + 1..n {
                    let (a, b) = (members[i], members[j]);
                    let d = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
                    sums[i] += d;
                    sums[j] += d;
                }
            }
            let mut best = 0;
            for i in 1..n {
                if sums[i] < sums[best] {
                    best = i;
                }
            }
            out.put(x, y, raw[best]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    /// Brute-force vector median of an explicit list (f64 sums, first minimum).
    fn brute_vector_median(pixels: &[[u8; 3]]) -> [u8; 3] {
        let cost = |p: &[u8; 3]| -> f64 {
            pixels
                .iter()
                .map(|q| {
                    (0..3).map(|k| (p[k] as f64 - q[k] as f64).powi(2)).sum::<f64>().sqrt()
                })
                .sum()
        };
        let mut best = pixels[0];
        let mut best_cost = cost(&best);
        for p in &pixels[1..] {
            let c = cost(p);
            if c < best_cost {
                best = *p;
                best_cost = c;
            }
        }
        best
    }

    #[test]
    fn constant_image_unchanged() {
        let img = RgbImage::filled(9, 7, [120, 80, 200]);
        assert_eq!(vector_median_filter(&img, 3), img);
        assert_eq!(vector_median_filter(&img, 5), img);
    }

    #[test]
    fn impulse_removed() {
        let mut img = RgbImage::filled(7, 7, [200, 190, 180]);
        img.put(3, 3, [10, 250, 10]);
        let window: Vec<[u8; 3]> = (2..5).flat_map(|y| (2..5).map(move |x| (x, y))).map(|(x, y)| img.get(x, y)).collect();
        let want = brute_vector_median(&window);
        assert_eq!(want, [200, 190, 180]);
        assert_eq!(vector_median_filter(&img, 3).get(3, 3), want);
    }

    #[test]
    fn half_plane_edge_preserved() {
        let mut img = RgbImage::filled(10, 8, [240, 240, 240]);
        for y in 0..8 {
            for x in 5..10 {
                img.put(x, y, [60, 70, 150]);
            }
        }
        let out = vector_median_filter(&img, 3);
        let palette: HashSet<[u8; 3]> = img.pixels().collect();
        assert!(out.pixels().all(|p| palette.contains(&p)));
        assert_eq!(out, img);
    }

    #[test]
    fn matches_brute_force_on_noise() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let data: Vec<u8> = (0..6 * 5 * 3).map(|_| rng.gen()).collect();
        let img = RgbImage::new(6, 5, data).unwrap();
        let out = vector_median_filter(&img, 3);
        for y in 0..5 {
            for x in 0..6 {
                let mut win = Vec::new();
                for dy in -1isize..=1 {
                    for dx in -1isize..=1 {
                        let xx = (x as isize + dx).clamp(0, 5) as usize;
                        let yy = (y as isize + dy).clamp(0, 4) as usize;
                        win.push(img.get(xx, yy));
                    }
                }
                assert_eq!(out.get(x, y), brute_vector_median(&win), "pixel ({x},{y})");
            }
        }
    }
}
