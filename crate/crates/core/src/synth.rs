//! Synthetic Ki-67 IHC images with planted nuclei and controllable
//! inter-laboratory covariate shift.
//!
//! Nuclei are anti-aliased ellipses painted over a stroma-coloured tissue
//! region on a near-white slide background. Every image carries its exact
//! ground truth: centroids, classes, radii, per-pixel footprints and the
//! proliferation index implied by the class counts.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::centroid::{CellClass, Centroid, CentroidSet, DEFAULT_MICRONS_PER_PIXEL};
use crate::color::{lab_to_rgb_unit, rgb_pixel_to_lab};
use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::pi::{compute_pi, PiScore};
use crate::rng::{self, Rng};

pub const PATCH_SIZE: usize = 256;
pub const TMA_SIZE: usize = 2000;

/// Seed of the shift that turns the source preset into the target preset:
/// the first seed whose shift narrows the b\* gap between the two stains.
pub const TARGET_SHIFT_SEED: u64 = 3;
pub const TARGET_SHIFT_SEVERITY: f64 = 0.6;

/// Nuclei are darker toward their center by this many L\* units.
const CENTER_DARKENING: f64 = 6.0;
const MIN_AXIS_RATIO: f64 = 0.7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RadiusDist {
    pub mean: f64,
    pub sd: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainParams {
    pub blue_stain_lab: [f64; 3],
    pub brown_stain_lab: [f64; 3],
    /// Unstained tissue colour; `None` paints nuclei directly on the slide background.
    pub stroma_lab: Option<[f64; 3]>,
    pub background_rgb: [u8; 3],
    pub nucleus_radius_um: RadiusDist,
    /// Nuclei per (100 µm)² of image frame.
    pub cell_density: f64,
    /// Two nuclei may overlap by at most this fraction of their summed semi-major axes.
    pub overlap_fraction: f64,
    /// Per-nucleus Lab standard deviation.
    pub stain_jitter: f64,
    /// Per-pixel Gaussian noise, 8-bit units.
    pub sensor_noise_sigma: f64,
    /// Probability an image receives a blur, fold or dust artifact.
    pub artifact_rate: f64,
    pub microns_per_pixel: f64,
}

impl DomainParams {
    /// The standard source laboratory.
    pub fn source() -> Self {
        Self {
            blue_stain_lab: [40.0, 8.0, -12.0],
            brown_stain_lab: [48.0, 12.0, 12.0],
            stroma_lab: Some([80.0, 3.0, -3.0]),
            background_rgb: [243, 242, 240],
            nucleus_radius_um: RadiusDist { mean: 2.0, sd: 0.25 },
            cell_density: 20.0,
            overlap_fraction: 0.1,
            stain_jitter: 3.5,
            sensor_noise_sigma: 1.5,
            artifact_rate: 0.15,
            microns_per_pixel: DEFAULT_MICRONS_PER_PIXEL,
        }
    }

    /// The standard target laboratory: the source shifted at severity 0.6.
    pub fn target() -> Self {
        shift_domain(&Self::source(), TARGET_SHIFT_SEVERITY, TARGET_SHIFT_SEED)
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "source" => Ok(Self::source()),
            "target" => Ok(Self::target()),
            other => Err(Error::InvalidArgument(format!("unknown preset {other:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if !(self.nucleus_radius_um.mean > 0.0) {
            return bad("nucleus radius mean must be positive");
        }
        if !(self.cell_density > 0.0) {
            return bad("cell density must be positive");
        }
        if !(0.0..=0.5).contains(&self.overlap_fraction) {
            return bad("overlap_fraction must be in [0, 0.5]");
        }
        if !(0.0..=1.0).contains(&self.artifact_rate) {
            return bad("artifact_rate must be in [0, 1]");
        }
        if !(self.microns_per_pixel > 0.0) {
            return bad("microns_per_pixel must be positive");
        }
        let labs = [Some(self.blue_stain_lab), Some(self.brown_stain_lab), self.stroma_lab];
        for lab in labs.into_iter().flatten() {
            if !(0.0..=100.0).contains(&lab[0]) || lab[1].abs() > 128.0 || lab[2].abs() > 128.0 {
                return bad("stain colour outside the Lab gamut");
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Artifact {
    Blur,
    Fold,
    Dust,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Nucleus {
    pub centroid: Centroid,
    /// Semi-axes in pixels, `major >= minor`.
    pub major_px: f64,
    pub minor_px: f64,
    pub angle: f64,
    pub footprint_px: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthGroundTruth {
    pub centroids: CentroidSet,
    pub true_pi: PiScore,
    pub nuclei: Vec<Nucleus>,
    /// Per pixel: 1-based index of the nucleus covering most of it, 0 if none.
    pub footprint: Vec<u32>,
    /// Fraction of pixels that are tissue (stroma or nucleus).
    pub tissue_fraction: f64,
    pub artifact: Option<Artifact>,
}

impl SynthGroundTruth {
    /// Pixels covered by nuclei of `class`.
    pub fn class_mask(&self, class: CellClass) -> crate::image::Mask {
        let (w, h) = (self.centroids.width(), self.centroids.height());
        let data = self
            .footprint
            .iter()
            .map(|&k| k > 0 && self.nuclei[k as usize - 1].centroid.class == class)
            .collect();
        crate::image::Mask { width: w, height: h, data }
    }
}

/// Where tissue lies inside the frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// A band of tissue from the left edge covering this fraction of the width.
    Band { coverage: f64 },
    /// Circular tissue core centered in the frame.
    Core,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameSpec {
    pub width: usize,
    pub height: usize,
    pub layout: Layout,
    /// Exact nucleus count instead of one derived from the density.
    pub count: Option<usize>,
}

impl FrameSpec {
    pub fn patch() -> Self {
        Self { width: PATCH_SIZE, height: PATCH_SIZE, layout: Layout::Band { coverage: 1.0 }, count: None }
    }

    pub fn tma(size: usize) -> Self {
        Self { width: size, height: size, layout: Layout::Core, count: None }
    }

    fn in_tissue(&self, x: f64, y: f64) -> bool {
        match self.layout {
            Layout::Band { coverage } => x < coverage * self.width as f64,
            Layout::Core => {
                let (cx, cy) = (self.width as f64 / 2.0, self.height as f64 / 2.0);
                (x - cx).hypot(y - cy) <= core_radius(self.width, self.height)
            }
        }
    }
}

fn core_radius(w: usize, h: usize) -> f64 {
    0.47 * w.min(h) as f64
}

/// A 256×256 all-tissue patch.
pub fn gen_patch(params: &DomainParams, target_pi: f64, seed: u64) -> Result<(RgbImage, SynthGroundTruth)> {
    gen_image(params, &FrameSpec::patch(), target_pi, seed)
}

/// A 2000×2000 tissue-microarray core.
pub fn gen_tma(params: &DomainParams, target_pi: f64, seed: u64) -> Result<(RgbImage, SynthGroundTruth)> {
    gen_image(params, &FrameSpec::tma(TMA_SIZE), target_pi, seed)
}

pub fn gen_image(
    params: &DomainParams,
    frame: &FrameSpec,
    target_pi: f64,
    seed: u64,
) -> Result<(RgbImage, SynthGroundTruth)> {
    params.validate()?;
    if !(0.0..=100.0).contains(&target_pi) {
        return Err(Error::InvalidArgument(format!("target PI {target_pi} outside [0, 100]")));
    }
    let (w, h) = (frame.width, frame.height);
    if w == 0 || h == 0 {
        return Err(Error::InvalidImage("zero-sized frame".into()));
    }
    let mpp = params.microns_per_pixel;
    let mut place_rng = rng::substream(seed, "synth/place");
    let mut paint_rng = rng::substream(seed, "synth/paint");

    let area_units = (w as f64 * mpp) * (h as f64 * mpp) / 1e4;
    let n = frame.count.unwrap_or_else(|| ((params.cell_density * area_units).round() as usize).max(1));

    let shapes = place_nuclei(params, frame, n, &mut place_rng)?;
    let n_pos = ((target_pi / 100.0) * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut place_rng);
    let mut classes = vec![CellClass::Ki67Neg; n];
    for &i in &order[..n_pos] {
        classes[i] = CellClass::Ki67Pos;
    }

    // Canvas in continuous sRGB.
    let bg = params.background_rgb.map(|c| c as f64 / 255.0);
    let mut canvas = vec![bg; w * h];
    let mut tissue = vec![false; w * h];
    if let Some(stroma) = params.stroma_lab {
        let rgb = lab_to_rgb_unit(stroma);
        for y in 0..h {
            for x in 0..w {
                if frame.in_tissue(x as f64 + 0.5, y as f64 + 0.5) {
                    canvas[y * w + x] = rgb;
                    tissue[y * w + x] = true;
                }
            }
        }
    }

    let jitter = Normal::new(0.0, params.stain_jitter.max(1e-12)).expect("finite sd");
    let mut footprint = vec![0u32; w * h];
    let mut best_cov = vec![0.0f32; w * h];
    let mut nuclei = Vec::with_capacity(n);
    for (k, (shape, class)) in shapes.iter().zip(&classes).enumerate() {
        let base = match class {
            CellClass::Ki67Neg => params.blue_stain_lab,
            CellClass::Ki67Pos => params.brown_stain_lab,
        };
        let lab = if params.stain_jitter > 0.0 {
            [0, 1, 2].map(|i| base[i] + jitter.sample(&mut paint_rng))
        } else {
            base
        };
        let count = paint_ellipse(
            &mut canvas,
            w,
            h,
            shape,
            lab,
            k as u32 + 1,
            &mut footprint,
            &mut best_cov,
            &mut tissue,
        );
        nuclei.push(Nucleus {
            centroid: Centroid::new(shape.cx, shape.cy, *class),
            major_px: shape.a,
            minor_px: shape.b,
            angle: shape.theta,
            footprint_px: count,
        });
    }

    let artifact = if params.artifact_rate > 0.0 && paint_rng.gen_bool(params.artifact_rate) {
        let kind = [Artifact::Blur, Artifact::Fold, Artifact::Dust][paint_rng.gen_range(0..3)];
        apply_artifact(&mut canvas, w, h, kind, &mut paint_rng);
        Some(kind)
    } else {
        None
    };

    let noise = Normal::new(0.0, params.sensor_noise_sigma.max(1e-12)).expect("finite sd");
    let mut data = Vec::with_capacity(w * h * 3);
    for px in &canvas {
        for &c in px {
            let mut v = c * 255.0;
            if params.sensor_noise_sigma > 0.0 {
                v += noise.sample(&mut paint_rng);
            }
            data.push(v.round().clamp(0.0, 255.0) as u8);
        }
    }
    let img = RgbImage::new(w, h, data)?;

    let centroids =
        CentroidSet::from_centroids(nuclei.iter().map(|n| n.centroid).collect(), w, h, mpp)?;
    let pos = centroids.count(CellClass::Ki67Pos);
    let true_pi = compute_pi(pos, n - pos)?;
    let tissue_fraction = tissue.iter().filter(|&&t| t).count() as f64 / (w * h) as f64;
    Ok((img, SynthGroundTruth { centroids, true_pi, nuclei, footprint, tissue_fraction, artifact }))
}

#[derive(Clone, Copy, Debug)]
struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    theta: f64,
}

impl Ellipse {
    /// Normalized elliptical radius (1 on the boundary).
    #[inline]
    fn rho2(&self, x: f64, y: f64) -> f64 {
        let (s, c) = self.theta.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.a).powi(2) + (v / self.b).powi(2)
    }
}

fn place_nuclei(params: &DomainParams, frame: &FrameSpec, n: usize, rng: &mut Rng) -> Result<Vec<Ellipse>> {
    let mpp = params.microns_per_pixel;
    let r = params.nucleus_radius_um;
    let radius = Normal::new(r.mean / mpp, (r.sd / mpp).max(1e-12)).expect("finite sd");
    let (w, h) = (frame.width as f64, frame.height as f64);
    let max_attempts = 1000 * n.max(1);
    let keep = 1.0 - params.overlap_fraction;

    // Uniform grid for neighbour lookups; cells at least as wide as the largest pair distance.
    let max_major = (r.mean + 4.0 * r.sd) / mpp / MIN_AXIS_RATIO.sqrt();
    let cell = (2.0 * max_major).max(1.0);
    let (gw, gh) = ((w / cell).ceil() as usize + 1, (h / cell).ceil() as usize + 1);
    let mut grid: Vec<Vec<usize>> = vec![Vec::new(); gw * gh];

    let mut placed: Vec<Ellipse> = Vec::with_capacity(n);
    let mut attempts = 0usize;
    while placed.len() < n {
        if attempts >= max_attempts {
            return Err(Error::PlacementOverflow { requested: n, placed: placed.len() });
        }
        attempts += 1;
        let (cx, cy) = (rng.gen::<f64>() * w, rng.gen::<f64>() * h);
        let eq_r = radius.sample(rng).clamp(0.5 * r.mean / mpp, 2.0 * r.mean / mpp);
        let ratio = rng.gen_range(MIN_AXIS_RATIO..=1.0);
        let theta = rng.gen::<f64>() * PI;
        if !frame.in_tissue(cx, cy) {
            continue;
        }
        let e = Ellipse { cx, cy, a: eq_r / ratio.sqrt(), b: eq_r * ratio.sqrt(), theta };
        let (gx, gy) = ((cx / cell) as usize, (cy / cell) as usize);
        let mut ok = true;
        'search: for yy in gy.saturating_sub(1)..=(gy + 1).min(gh - 1) {
            for xx in gx.saturating_sub(1)..=(gx + 1).min(gw - 1) {
                for &j in &grid[yy * gw + xx] {
                    let o: &Ellipse = &placed[j];
                    if (o.cx - cx).hypot(o.cy - cy) < (o.a + e.a) * keep {
                        ok = false;
                        break 'search;
                    }
                }
            }
        }
        if ok {
            grid[gy * gw + gx].push(placed.len());
            placed.push(e);
        }
    }
    Ok(placed)
}

/// Paints one nucleus with 4×4 supersampled coverage. Returns its footprint size.
#[allow(clippy::too_many_arguments)]
fn paint_ellipse(
    canvas: &mut [[f64; 3]],
    w: usize,
    h: usize,
    e: &Ellipse,
    lab: [f64; 3],
    id: u32,
    footprint: &mut [u32],
    best_cov: &mut [f32],
    tissue: &mut [bool],
) -> usize {
    const SS: usize = 4;
    let x0 = (e.cx - e.a - 1.0).floor().max(0.0) as usize;
    let x1 = ((e.cx + e.a + 1.0).ceil() as usize).min(w);
    let y0 = (e.cy - e.a - 1.0).floor().max(0.0) as usize;
    let y1 = ((e.cy + e.a + 1.0).ceil() as usize).min(h);
    let mut count = 0;
    for y in y0..y1 {
        for x in x0..x1 {
            let mut inside = 0usize;
            for sy in 0..SS {
                for sx in 0..SS {
                    let px = x as f64 + (sx as f64 + 0.5) / SS as f64;
                    let py = y as f64 + (sy as f64 + 0.5) / SS as f64;
                    inside += (e.rho2(px, py) <= 1.0) as usize;
                }
            }
            if inside == 0 {
                continue;
            }
            let cov = inside as f64 / (SS * SS) as f64;
            let rho2 = e.rho2(x as f64 + 0.5, y as f64 + 0.5).min(1.0);
            let shaded = [lab[0] - CENTER_DARKENING * (1.0 - rho2), lab[1], lab[2]];
            let rgb = lab_to_rgb_unit(shaded);
            let i = y * w + x;
            for k in 0..3 {
                canvas[i][k] = (1.0 - cov) * canvas[i][k] + cov * rgb[k];
            }
            if cov >= 0.5 {
                count += 1;
                tissue[i] = true;
                if cov as f32 >= best_cov[i] {
                    best_cov[i] = cov as f32;
                    footprint[i] = id;
                }
            }
        }
    }
    count
}

fn apply_artifact(canvas: &mut [[f64; 3]], w: usize, h: usize, kind: Artifact, rng: &mut Rng) {
    match kind {
        Artifact::Blur => {
            let (bw, bh) = (rng.gen_range(w / 4..=w / 2), rng.gen_range(h / 4..=h / 2));
            let (x0, y0) = (rng.gen_range(0..=w - bw), rng.gen_range(0..=h - bh));
            let src = canvas.to_vec();
            for y in y0..y0 + bh {
                for x in x0..x0 + bw {
                    let mut acc = [0.0; 3];
                    let mut n = 0.0;
                    for yy in y.saturating_sub(2)..=(y + 2).min(h - 1) {
                        for xx in x.saturating_sub(2)..=(x + 2).min(w - 1) {
                            let p = src[yy * w + xx];
                            for k in 0..3 {
                                acc[k] += p[k];
                            }
                            n += 1.0;
                        }
                    }
                    canvas[y * w + x] = acc.map(|v| v / n);
                }
            }
        }
        Artifact::Fold => {
            // a darker, slightly purple band across the frame
            let horizontal = rng.gen_bool(0.5);
            let span = if horizontal { h } else { w };
            let thick = rng.gen_range(span / 16..=span / 6).max(1);
            let start = rng.gen_range(0..=span - thick);
            for y in 0..h {
                for x in 0..w {
                    let t = if horizontal { y } else { x };
                    if (start..start + thick).contains(&t) {
                        let p = &mut canvas[y * w + x];
                        p[0] *= 0.80;
                        p[1] *= 0.75;
                        p[2] *= 0.82;
                    }
                }
            }
        }
        Artifact::Dust => {
            let specks = rng.gen_range(3..=12) * (w * h / (256 * 256)).max(1);
            for _ in 0..specks {
                let (cx, cy) = (rng.gen::<f64>() * w as f64, rng.gen::<f64>() * h as f64);
                let r = rng.gen_range(1.0..3.5);
                let gray = rng.gen_range(0.25..0.5);
                let (x0, x1) = ((cx - r).floor().max(0.0) as usize, ((cx + r).ceil() as usize).min(w));
                let (y0, y1) = ((cy - r).floor().max(0.0) as usize, ((cy + r).ceil() as usize).min(h));
                for y in y0..y1 {
                    for x in x0..x1 {
                        if (x as f64 + 0.5 - cx).hypot(y as f64 + 0.5 - cy) <= r {
                            canvas[y * w + x] = [gray; 3];
                        }
                    }
                }
            }
        }
    }
}

/// Perturbs a domain the way a different staining protocol and scanner would.
///
/// Stain colours move by at most `8·severity` Lab units per channel (the DAB
/// b\* shift is at least 60% of that bound), the slide background and stroma
/// are re-tinted, sensor noise grows by up to `4·severity` and the mean
/// nucleus radius scales by up to ±20%·severity.
pub fn shift_domain(params: &DomainParams, severity: f64, seed: u64) -> DomainParams {
    let s = severity.clamp(0.0, 1.0);
    let mut rng = rng::substream(seed, "synth/shift");
    let mut sym = |bound: f64| (rng.gen::<f64>() * 2.0 - 1.0) * bound;
    let mut out = params.clone();
    let stain = 8.0 * s;

    for k in 0..3 {
        out.blue_stain_lab[k] += sym(stain);
    }
    out.brown_stain_lab[0] += sym(stain);
    out.brown_stain_lab[1] += sym(stain);
    let db = sym(1.0);
    let magnitude = stain * (0.6 + 0.4 * db.abs());
    out.brown_stain_lab[2] += if db < 0.0 { -magnitude } else { magnitude };

    if let Some(stroma) = out.stroma_lab.as_mut() {
        for (k, v) in stroma.iter_mut().enumerate() {
            // keep the stroma nearly achromatic
            *v += sym(if k == 0 { 4.0 * s } else { 2.0 * s });
        }
    }
    for c in out.background_rgb.iter_mut() {
        *c = (*c as f64 + sym(8.0 * s)).round().clamp(225.0, 255.0) as u8;
    }
    out.sensor_noise_sigma += 4.0 * s * (0.5 + 0.5 * sym(1.0).abs());
    out.nucleus_radius_um.mean *= 1.0 + 0.2 * s * sym(1.0);
    out
}

/// Mean Lab colour of the given image pixels (diagnostics).
pub fn mean_lab(img: &RgbImage, pixels: impl Iterator<Item = usize>) -> [f64; 3] {
    let mut acc = [0.0; 3];
    let mut n = 0.0f64;
    for i in pixels {
        let p = img.data();
        let lab = rgb_pixel_to_lab([p[3 * i], p[3 * i + 1], p[3 * i + 2]]);
        for k in 0..3 {
            acc[k] += lab[k];
        }
        n += 1.0;
    }
    acc.map(|v| v / n.max(1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clean() -> DomainParams {
        DomainParams { sensor_noise_sigma: 0.0, artifact_rate: 0.0, ..DomainParams::source() }
    }

    #[test]
    fn zero_pi_all_negative() {
        let (_, gt) = gen_patch(&clean(), 0.0, 1).unwrap();
        assert_eq!(gt.true_pi.value, 0.0);
        assert_eq!(gt.centroids.count(CellClass::Ki67Pos), 0);
    }

    #[test]
    fn exact_positive_count() {
        let frame = FrameSpec { count: Some(100), ..FrameSpec::patch() };
        let (_, gt) = gen_image(&clean(), &frame, 20.0, 5).unwrap();
        assert_eq!(gt.centroids.count(CellClass::Ki67Pos), 20);
        assert_eq!(gt.true_pi.value, 20.0);
    }

    #[test]
    fn deterministic_per_seed() {
        let p = DomainParams::source();
        let (a, ga) = gen_patch(&p, 30.0, 9).unwrap();
        let (b, gb) = gen_patch(&p, 30.0, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(ga, gb);
        let (c, _) = gen_patch(&p, 30.0, 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn separation_respects_overlap() {
        let p = DomainParams { overlap_fraction: 0.3, ..clean() };
        let (_, gt) = gen_patch(&p, 40.0, 3).unwrap();
        for (i, a) in gt.nuclei.iter().enumerate() {
            for b in &gt.nuclei[i + 1..] {
                let d = a.centroid.dist(&b.centroid);
                assert!(d >= (a.major_px + b.major_px) * (1.0 - 0.3) - 1e-9);
            }
        }
    }

    #[test]
    fn overflow_is_reported() {
        let frame = FrameSpec { width: 32, height: 32, layout: Layout::Band { coverage: 1.0 }, count: Some(500) };
        let p = DomainParams { overlap_fraction: 0.0, ..clean() };
        assert!(matches!(gen_image(&p, &frame, 10.0, 1), Err(Error::PlacementOverflow { .. })));
    }

    #[test]
    fn shift_identity_and_bounds() {
        let p = DomainParams::source();
        assert_eq!(shift_domain(&p, 0.0, 77), p);
        for seed in 0..50 {
            let q = shift_domain(&p, 1.0, seed);
            assert!((q.brown_stain_lab[2] - p.brown_stain_lab[2]).abs() > 4.0);
            for k in 0..3 {
                assert!((q.blue_stain_lab[k] - p.blue_stain_lab[k]).abs() <= 8.0);
                assert!((q.brown_stain_lab[k] - p.brown_stain_lab[k]).abs() <= 8.0);
            }
            assert!(q.sensor_noise_sigma - p.sensor_noise_sigma <= 4.0);
            assert!((q.nucleus_radius_um.mean / p.nucleus_radius_um.mean - 1.0).abs() <= 0.2 + 1e-12);
            q.validate().unwrap();
        }
    }

    #[test]
    fn png_round_trip() {
        let (img, _) = gen_patch(&DomainParams::target(), 25.0, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.png");
        img.save_png(&path).unwrap();
        assert_eq!(RgbImage::load_png(&path).unwrap(), img);
    }

    #[test]
    fn target_seed_is_first_narrowing_shift() {
        let src = DomainParams::source();
        let gap = |p: &DomainParams| p.brown_stain_lab[2] - p.blue_stain_lab[2];
        let first = (0..).find(|&s| gap(&shift_domain(&src, TARGET_SHIFT_SEVERITY, s)) < gap(&src)).unwrap();
        assert_eq!(first, TARGET_SHIFT_SEED);
    }
}
