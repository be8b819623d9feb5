//! MiniDetector: a four-layer fully convolutional heatmap regressor with
//! hand-written forward and backward passes.
//!
//! Tensors are channel-major planes (`c × h × w`); convolutions use zero
//! padding so every layer keeps the spatial size.

use num_traits::Float;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::labels::HeatmapLabel;

pub const ARCHITECTURE: &str = "conv3x3(3,8)+relu|conv3x3(8,16)+relu|conv3x3(16,8)+relu|conv1x1(8,2)+sigmoid";

/// `(cin, cout, kernel)` per layer.
pub const LAYERS: [(usize, usize, usize); 4] = [(3, 8, 3), (8, 16, 3), (16, 8, 3), (8, 2, 1)];

/// Width of the feature layer handed to the embedding analysis.
pub const FEATURE_CHANNELS: usize = 8;

/// Total number of weights and biases.
pub const PARAM_COUNT: usize = 3 * 8 * 9 + 8 + 8 * 16 * 9 + 16 + 16 * 8 * 9 + 8 + 8 * 2 + 2;

/// Pixels within this distance of a tile border depend on the padding.
pub const RECEPTIVE_RADIUS: usize = 3;

/// Initial bias of the output layer; most target pixels are zero.
const OUTPUT_BIAS_INIT: f64 = -3.0;

#[derive(Clone, Debug, PartialEq)]
pub struct Conv<T> {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    /// `cout × cin × k × k`
    pub w: Vec<T>,
    pub b: Vec<T>,
}

impl<T: Float> Conv<T> {
    fn zeros(cin: usize, cout: usize, k: usize) -> Self {
        Self { cin, cout, k, w: vec![T::zero(); cout * cin * k * k], b: vec![T::zero(); cout] }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MiniDetector<T> {
    pub layers: Vec<Conv<T>>,
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache<T> {
    pub width: usize,
    pub height: usize,
    pub input: Vec<T>,
    /// Post-ReLU outputs of the three hidden layers.
    pub hidden: [Vec<T>; 3],
    /// Sigmoid outputs, `2 × h × w`.
    pub output: Vec<T>,
}

impl<T> ForwardCache<T> {
    /// The 8-channel feature layer.
    pub fn features(&self) -> &[T] {
        &self.hidden[2]
    }
}

impl<T: Float + Send + Sync> MiniDetector<T> {
    pub fn zeros() -> Self {
        Self { layers: LAYERS.iter().map(|&(ci, co, k)| Conv::zeros(ci, co, k)).collect() }
    }

    /// He-normal weights, zero hidden biases, negative output bias.
    pub fn init(rng: &mut crate::rng::Rng) -> Self {
        let mut m = Self::zeros();
        for layer in &mut m.layers {
            let std = (2.0 / (layer.cin * layer.k * layer.k) as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            for w in &mut layer.w {
                *w = T::from(normal.sample(rng)).unwrap();
            }
        }
        let last = m.layers.last_mut().unwrap();
        last.b.iter_mut().for_each(|b| *b = T::from(OUTPUT_BIAS_INIT).unwrap());
        m
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// Flattened parameters in architecture order (w0, b0, w1, b1, ...).
    pub fn params(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(&l.w);
            out.extend_from_slice(&l.b);
        }
        out
    }

    pub fn set_params(&mut self, p: &[T]) -> Result<()> {
        if p.len() != self.param_count() {
            return Err(Error::ShapeMismatch(format!("expected {} parameters, got {}", self.param_count(), p.len())));
        }
        let mut off = 0;
        for l in &mut self.layers {
            let n = l.w.len();
            l.w.copy_from_slice(&p[off..off + n]);
            off += n;
            let n = l.b.len();
            l.b.copy_from_slice(&p[off..off + n]);
            off += n;
        }
        Ok(())
    }

    pub fn cast<U: Float + Send + Sync>(&self) -> MiniDetector<U> {
        MiniDetector {
            layers: self
                .layers
                .iter()
                .map(|l| Conv {
                    cin: l.cin,
                    cout: l.cout,
                    k: l.k,
                    w: l.w.iter().map(|&v| U::from(v).unwrap()).collect(),
                    b: l.b.iter().map(|&v| U::from(v).unwrap()).collect(),
                })
                .collect(),
        }
    }

    /// Forward pass on a `3 × h × w` planar input.
    pub fn forward_planar(&self, input: Vec<T>, width: usize, height: usize) -> ForwardCache<T> {
        assert_eq!(input.len(), 3 * width * height, "input must be 3 x h x w");
        let mut x = input.clone();
        let mut hidden: Vec<Vec<T>> = Vec::with_capacity(3);
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = conv_forward(layer, &x, width, height);
            if i + 1 < self.layers.len() {
                z.iter_mut().for_each(|v| *v = v.max(T::zero()));
                hidden.push(z.clone());
            } else {
                z.iter_mut().for_each(|v| *v = sigmoid(*v));
            }
            x = z;
        }
        let h2 = hidden.pop().expect("three hidden layers");
        let h1 = hidden.pop().expect("three hidden layers");
        let h0 = hidden.pop().expect("three hidden layers");
        ForwardCache { width, height, input, hidden: [h0, h1, h2], output: x }
    }

    /// Parameter gradients given `d loss / d output`, in [`Self::params`] order.
    pub fn backward(&self, cache: &ForwardCache<T>, d_output: &[T]) -> Vec<T> {
        let (w, h) = (cache.width, cache.height);
        assert_eq!(d_output.len(), cache.output.len(), "gradient shape");
        let mut grads: Vec<Conv<T>> = LAYERS.iter().map(|&(ci, co, k)| Conv::zeros(ci, co, k)).collect();

        // through the sigmoid
        let mut dz: Vec<T> =
            d_output.iter().zip(&cache.output).map(|(&g, &s)| g * s * (T::one() - s)).collect();
        for i in (0..self.layers.len()).rev() {
            let input = if i == 0 { &cache.input } else { &cache.hidden[i - 1] };
            let need_input_grad = i > 0;
            let dx = conv_backward(&self.layers[i], input, &dz, w, h, &mut grads[i], need_input_grad);
            if let Some(mut dx) = dx {
                // through the ReLU that produced `input`
                for (g, &a) in dx.iter_mut().zip(input) {
                    if a <= T::zero() {
                        *g = T::zero();
                    }
                }
                dz = dx;
            }
        }
        let mut out = Vec::with_capacity(PARAM_COUNT);
        for g in grads {
            out.extend(g.w);
            out.extend(g.b);
        }
        out
    }
}

impl MiniDetector<f32> {
    /// Heatmap and feature planes for an RGB image of any size.
    pub fn forward(&self, img: &RgbImage) -> (HeatmapLabel, Vec<f32>) {
        let cache = self.forward_planar(image_to_planar(img), img.width(), img.height());
        let label = HeatmapLabel::from_planar(img.width(), img.height(), &cache.output, 0.0)
            .expect("output has two planes");
        let ForwardCache { hidden: [_, _, features], .. } = cache;
        (label, features)
    }

    /// Heatmap for a large image, computed in tiles with a halo wide enough
    /// that the result equals a single whole-image pass.
    pub fn predict(&self, img: &RgbImage, tile: usize) -> HeatmapLabel {
        let (w, h) = (img.width(), img.height());
        let mut out = HeatmapLabel::zeros(w, h, 0.0);
        let halo = RECEPTIVE_RADIUS;
        for ty in (0..h).step_by(tile) {
            for tx in (0..w).step_by(tile) {
                let (x0, y0) = (tx.saturating_sub(halo), ty.saturating_sub(halo));
                let x1 = (tx + tile + halo).min(w);
                let y1 = (ty + tile + halo).min(h);
                let sub = img.crop(x0, y0, x1 - x0, y1 - y0).expect("window inside image");
                let cache = self.forward_planar(image_to_planar(&sub), sub.width(), sub.height());
                let sw = sub.width();
                let plane = sw * sub.height();
                for y in ty..(ty + tile).min(h) {
                    for x in tx..(tx + tile).min(w) {
                        let si = (y - y0) * sw + (x - x0);
                        out.neg.data[y * w + x] = cache.output[si];
                        out.pos.data[y * w + x] = cache.output[plane + si];
                    }
                }
            }
        }
        out
    }
}

/// Maps 8-bit RGB to `[-1, 1]`, channel-major.
pub fn image_to_planar<T: Float>(img: &RgbImage) -> Vec<T> {
    let n = img.width() * img.height();
    let mut out = vec![T::zero(); 3 * n];
    let scale = T::from(1.0 / 127.5).unwrap();
    for (i, px) in img.data().chunks_exact(3).enumerate() {
        for c in 0..3 {
            out[c * n + i] = T::from(px[c]).unwrap() * scale - T::one();
        }
    }
    out
}

#[inline]
fn sigmoid<T: Float>(z: T) -> T {
    T::one() / (T::one() + (-z).exp())
}

/// Valid range of `t` such that `t + d` stays in `[0, n)`.
#[inline]
fn span(n: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (n as isize - d.max(0)).max(lo as isize) as usize;
    (lo, hi)
}

fn conv_forward<T: Float>(l: &Conv<T>, x: &[T], w: usize, h: usize) -> Vec<T> {
    let plane = w * h;
    let r = (l.k / 2) as isize;
    let mut out = vec![T::zero(); l.cout * plane];
    for co in 0..l.cout {
        let o = &mut out[co * plane..(co + 1) * plane];
        o.iter_mut().for_each(|v| *v = l.b[co]);
        for ci in 0..l.cin {
            let xin = &x[ci * plane..(ci + 1) * plane];
            for ky in 0..l.k {
                let dy = ky as isize - r;
                let (y_lo, y_hi) = span(h, dy);
                for kx in 0..l.k {
                    let dx = kx as isize - r;
                    let (x_lo, x_hi) = span(w, dx);
                    let wt = l.w[((co * l.cin + ci) * l.k + ky) * l.k + kx];
                    for y in y_lo..y_hi {
                        let src_row = ((y as isize + dy) as usize) * w;
                        let src = &xin[(src_row as isize + x_lo as isize + dx) as usize
                            ..(src_row as isize + x_hi as isize + dx) as usize];
                        let dst = &mut o[y * w + x_lo..y * w + x_hi];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d = *d + wt * s;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates weight/bias gradients into `g` and returns the input
/// gradient when asked for.
fn conv_backward<T: Float>(
    l: &Conv<T>,
    x: &[T],
    dz: &[T],
    w: usize,
    h: usize,
    g: &mut Conv<T>,
    need_input_grad: bool,
) -> Option<Vec<T>> {
    let plane = w * h;
    let r = (l.k / 2) as isize;
    let mut dx_all = need_input_grad.then(|| vec![T::zero(); l.cin * plane]);
    for co in 0..l.cout {
        let d = &dz[co * plane..(co + 1) * plane];
        g.b[co] = g.b[co] + d.iter().fold(T::zero(), |a, &v| a + v);
        for ci in 0..l.cin {
            let xin = &x[ci * plane..(ci + 1) * plane];
            for ky in 0..l.k {
                let dy = ky as isize - r;
                let (y_lo, y_hi) = span(h, dy);
                for kx in 0..l.k {
                    let dxo = kx as isize - r;
                    let (x_lo, x_hi) = span(w, dxo);
                    let wi = ((co * l.cin + ci) * l.k + ky) * l.k + kx;
                    let wt = l.w[wi];
                    let mut acc = T::zero();
                    for y in y_lo..y_hi {
                        let src_start = (((y as isize + dy) as usize) * w) as isize + dxo;
                        let a = (src_start + x_lo as isize) as usize;
                        let b = (src_start + x_hi as isize) as usize;
                        let drow = &d[y * w + x_lo..y * w + x_hi];
                        acc = acc + dot(drow, &xin[a..b]);
                        if let Some(dx_all) = dx_all.as_mut() {
                            let dst = &mut dx_all[ci * plane + a..ci * plane + b];
                            for (t, &s) in dst.iter_mut().zip(drow) {
                                *t = *t + wt * s;
                            }
                        }
                    }
                    g.w[wi] = g.w[wi] + acc;
                }
            }
        }
    }
    dx_all
}

/// Dot product with independent partial sums so the compiler can vectorize.
#[inline]
fn dot<T: Float>(a: &[T], b: &[T]) -> T {
    let mut s = [T::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        for k in 0..8 {
            s[k] = s[k] + a[c * 8 + k] * b[c * 8 + k];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..a.len() {
        tail = tail + a[i] * b[i];
    }
    s.iter().fold(tail, |acc, &v| acc + v)
}

/// Random model for tests and benchmarks.
pub fn random_model<T: Float + Send + Sync>(seed: u64) -> MiniDetector<T> {
    let mut rng = crate::rng::seeded(seed);
    let mut m = MiniDetector::<T>::init(&mut rng);
    // non-trivial biases so every code path is exercised
    for l in &mut m.layers {
        for b in &mut l.b {
            *b = T::from(rng.gen_range(-0.2..0.2)).unwrap();
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_count() {
        assert_eq!(PARAM_COUNT, 2570);
        assert_eq!(MiniDetector::<f32>::zeros().param_count(), PARAM_COUNT);
    }

    #[test]
    fn zero_model_outputs_half() {
        let m = MiniDetector::<f32>::zeros();
        let img = RgbImage::filled(7, 5, [10, 200, 30]);
        let (hm, feats) = m.forward(&img);
        assert!(hm.neg.data.iter().chain(&hm.pos.data).all(|&v| v == 0.5));
        assert_eq!(feats.len(), FEATURE_CHANNELS * 35);
    }

    #[test]
    fn one_pixel_by_hand() {
        // On a 1x1 input only the centre tap of each 3x3 kernel sees data.
        let m = random_model::<f64>(3);
        let x = vec![0.3, -0.7, 0.1];
        let out = m.forward_planar(x.clone(), 1, 1).output;
        let mut a = x;
        for (i, l) in m.layers.iter().enumerate() {
            let c = l.k / 2;
            let mut z = vec![0.0; l.cout];
            for co in 0..l.cout {
                z[co] = l.b[co];
                for ci in 0..l.cin {
                    z[co] += l.w[((co * l.cin + ci) * l.k + c) * l.k + c] * a[ci];
                }
                z[co] = if i < 3 { z[co].max(0.0) } else { 1.0 / (1.0 + (-z[co]).exp()) };
            }
            a = z;
        }
        for (u, v) in out.iter().zip(&a) {
            assert!((u - v).abs() < 1e-6);
        }
    }

    #[test]
    fn conv_matches_naive() {
        let m = random_model::<f64>(11);
        let l = &m.layers[1];
        let (w, h) = (5, 4);
        let x: Vec<f64> = (0..l.cin * w * h).map(|i| ((i * 37 % 17) as f64 - 8.0) / 8.0).collect();
        let fast = conv_forward(l, &x, w, h);
        for co in 0..l.cout {
            for y in 0..h {
                for xx in 0..w {
                    let mut s = l.b[co];
                    for ci in 0..l.cin {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let (sy, sx) = (y as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                                if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                                    s += l.w[((co * l.cin + ci) * 3 + ky) * 3 + kx]
                                        * x[ci * w * h + sy as usize * w + sx as usize];
                                }
                            }
                        }
                    }
                    assert!((fast[co * w * h + y * w + xx] - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn tiled_prediction_equals_whole_image() {
        let m = random_model::<f32>(5);
        let (img, _) = crate::synth::gen_patch(&crate::synth::DomainParams::source(), 30.0, 1).unwrap();
        let img = img.crop(0, 0, 70, 53).unwrap();
        let (whole, _) = m.forward(&img);
        let tiled = m.predict(&img, 16);
        assert_eq!(whole.neg.data, tiled.neg.data);
        assert_eq!(whole.pos.data, tiled.pos.data);
    }

    /// Loss of `m` on `(x, target)` at 64-bit precision.
    fn loss_of(m: &MiniDetector<f64>, x: &[f64], target: &[f64], side: usize) -> f64 {
        let out = m.forward_planar(x.to_vec(), side, side).output;
        crate::regimes::huber_loss(&out, target, 1.0).unwrap().0
    }

    #[test]
    fn gradients_match_finite_differences() {
        let side = 8;
        let m = random_model::<f64>(21);
        let mut rng = crate::rng::seeded(21);
        let x: Vec<f64> = (0..3 * side * side).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let target: Vec<f64> = (0..2 * side * side).map(|_| rng.gen_range(0.0..1.0)).collect();
        let cache = m.forward_planar(x.clone(), side, side);
        let (_, d_out) = crate::regimes::huber_loss(&cache.output, &target, 1.0).unwrap();
        let analytic = m.backward(&cache, &d_out);
        let p0 = m.params();
        let eps = 1e-4;
        for i in (0..PARAM_COUNT).step_by(7) {
            let mut plus = m.clone();
            let mut p = p0.clone();
            p[i] += eps;
            plus.set_params(&p).unwrap();
            let mut minus = m.clone();
            p[i] -= 2.0 * eps;
            minus.set_params(&p).unwrap();
            let numeric = (loss_of(&plus, &x, &target, side) - loss_of(&minus, &x, &target, side)) / (2.0 * eps);
            let rel = (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(1e-6);
            assert!(rel < 1e-4, "param {i}: analytic {} numeric {numeric}", analytic[i]);
        }
    }

    #[test]
    fn zero_output_gradient_gives_zero_grads() {
        let m = random_model::<f64>(2);
        let x: Vec<f64> = (0..3 * 36).map(|i| (i as f64 * 0.37).sin()).collect();
        let cache = m.forward_planar(x, 6, 6);
        let g = m.backward(&cache, &vec![0.0; cache.output.len()]);
        assert!(g.iter().all(|&v| v == 0.0));
    }
}
