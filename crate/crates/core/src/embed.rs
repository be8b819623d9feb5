//! Exact t-SNE over per-patch detector features, and a neighbourhood
//! score measuring how well source and target features intermix.

use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::regimes::{MiniDetector, FEATURE_CHANNELS};
use crate::rng::substream;

/// Neighbourhood size of [`domain_overlap_score`].
pub const OVERLAP_K: usize = 10;
const PERPLEXITY_TOL: f64 = 1e-4;
const MAX_BISECTIONS: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::Source => "source",
            Domain::Target => "target",
        })
    }
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(Domain::Source),
            "target" => Ok(Domain::Target),
            other => Err(Error::InvalidArgument(format!("unknown domain '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    pub ids: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    pub domains: Vec<Domain>,
}

impl FeatureMatrix {
    pub fn new(ids: Vec<String>, rows: Vec<Vec<f64>>, domains: Vec<Domain>) -> Result<Self> {
        if ids.len() != rows.len() || domains.len() != rows.len() {
            return Err(Error::ShapeMismatch("ids, rows and domains differ in length".into()));
        }
        if let Some(first) = rows.first() {
            if rows.iter().any(|r| r.len() != first.len()) {
                return Err(Error::ShapeMismatch("feature rows differ in dimension".into()));
            }
        }
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite feature value".into()));
        }
        Ok(Self { ids, rows, domains })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Spatial mean of each feature-layer channel.
pub fn feature_vector(model: &MiniDetector<f32>, img: &RgbImage) -> Vec<f64> {
    let (_, feats) = model.forward(img);
    let plane = img.width() * img.height();
    (0..FEATURE_CHANNELS)
        .map(|c| feats[c * plane..(c + 1) * plane].iter().map(|&v| v as f64).sum::<f64>() / plane as f64)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub early_exaggeration: f64,
    pub exaggeration_iterations: usize,
    pub learning_rate: f64,
    pub initial_momentum: f64,
    pub final_momentum: f64,
    pub momentum_switch: usize,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            perplexity: 15.0,
            iterations: 1000,
            early_exaggeration: 4.0,
            exaggeration_iterations: 100,
            learning_rate: 100.0,
            initial_momentum: 0.5,
            final_momentum: 0.8,
            momentum_switch: 250,
            seed: 0,
        }
    }
}

fn sq_dists(x: &[Vec<f64>]) -> Vec<f64> {
    let n = x.len();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let v: f64 = x[i].iter().zip(&x[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    d
}

/// Conditional distribution of row `i` at precision `beta`, and its perplexity.
fn conditional_row(d: &[f64], i: usize, beta: f64, out: &mut [f64]) -> f64 {
    // shift by the nearest distance so the largest weight is 1
    let dmin = d.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, &v)| v).fold(f64::INFINITY, f64::min);
    let mut sum = 0.0;
    let mut dot = 0.0;
    for (j, (&dj, o)) in d.iter().zip(out.iter_mut()).enumerate() {
        if j == i {
            *o = 0.0;
            continue;
        }
        let w = (-(dj - dmin) * beta).exp();
        *o = w;
        sum += w;
        dot += (dj - dmin) * w;
    }
    out.iter_mut().for_each(|v| *v /= sum);
    // H = ln(sum) + beta * E[d - dmin]
    let h = sum.ln() + beta * dot / sum;
    h.exp()
}

/// Perplexity of a probability row (natural-log entropy).
pub fn row_perplexity(row: &[f64]) -> f64 {
    let h: f64 = row.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum();
    h.exp()
}

/// Row-stochastic conditional affinities `p(j|i)` calibrated to `perplexity`.
pub fn conditional_affinities(x: &[Vec<f64>], perplexity: f64) -> Result<Vec<f64>> {
    let n = x.len();
    if !(perplexity > 0.0) || (n as f64) < 3.0 * perplexity + 1.0 {
        return Err(Error::InvalidArgument(format!("perplexity {perplexity} too large for {n} points")));
    }
    let d = sq_dists(x);
    let mean_d = d.iter().sum::<f64>() / (n * (n - 1)) as f64;
    let rows: Vec<(Vec<f64>, bool)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let di = &d[i * n..(i + 1) * n];
            let mut row = vec![0.0; n];
            let mut beta = if mean_d > 0.0 { 1.0 / mean_d } else { 1.0 };
            let (mut lo, mut hi) = (0.0f64, f64::INFINITY);
            let mut ok = false;
            for _ in 0..MAX_BISECTIONS {
                let perp = conditional_row(di, i, beta, &mut row);
                if (perp - perplexity).abs() < PERPLEXITY_TOL {
                    ok = true;
                    break;
                }
                if perp > perplexity {
                    // too flat: sharpen
                    lo = beta;
                    beta = if hi.is_finite() { 0.5 * (beta + hi) } else { beta * 2.0 };
                } else {
                    hi = beta;
                    beta = 0.5 * (beta + lo);
                }
            }
            (row, ok)
        })
        .collect();
    let bad: Vec<usize> = rows.iter().enumerate().filter(|(_, r)| !r.1).map(|(i, _)| i).collect();
    if !bad.is_empty() {
        return Err(Error::DegenerateInput { indices: bad });
    }
    Ok(rows.into_iter().flat_map(|r| r.0).collect())
}

/// Symmetric joint affinities `(p(j|i) + p(i|j)) / 2n`, summing to one.
pub fn pairwise_affinities(x: &[Vec<f64>], perplexity: f64) -> Result<Vec<f64>> {
    let n = x.len();
    let cond = conditional_affinities(x, perplexity)?;
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            p[i * n + j] = (cond[i * n + j] + cond[j * n + i]) / (2.0 * n as f64);
        }
    }
    Ok(p)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TsneResult {
    pub embedding: Vec<[f64; 2]>,
    /// KL(P‖Q) after each iteration, against the unexaggerated P.
    pub kl: Vec<f64>,
}

/// Exact t-SNE into two dimensions.
///
/// Rows are processed in a canonical (sorted) order, so permuting the
/// input permutes the output the same way. Once exaggeration ends the
/// recorded KL never rises: a momentum step that would raise it is replaced
/// by a backtracked gradient step.
pub fn tsne(x: &[Vec<f64>], cfg: &TsneConfig) -> Result<TsneResult> {
    let n = x.len();
    if cfg.iterations < 250 {
        return Err(Error::InvalidArgument("t-SNE needs at least 250 iterations".into()));
    }
    if n < 2 || x.iter().any(|r| r.len() != x[0].len()) {
        return Err(Error::ShapeMismatch("t-SNE needs at least two rows of equal dimension".into()));
    }
    if 3.0 * cfg.perplexity >= (n - 1) as f64 {
        return Err(Error::InvalidArgument(format!(
            "perplexity {} needs more than {} points",
            cfg.perplexity,
            (3.0 * cfg.perplexity + 1.0).ceil()
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        x[a].iter()
            .zip(&x[b])
            .map(|(u, v)| u.total_cmp(v))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let sorted: Vec<Vec<f64>> = order.iter().map(|&i| x[i].clone()).collect();
    let p = pairwise_affinities(&sorted, cfg.perplexity).map_err(|e| match e {
        Error::DegenerateInput { indices } => {
            let mut idx: Vec<usize> = indices.iter().map(|&k| order[k]).collect();
            idx.sort_unstable();
            Error::DegenerateInput { indices: idx }
        }
        other => other,
    })?;

    let mut rng = substream(cfg.seed, "embed/init");
    let normal = Normal::new(0.0, 1e-2).expect("valid std");
    let mut y: Vec<f64> = (0..2 * n).map(|_| normal.sample(&mut rng)).collect();
    let mut update = vec![0.0; 2 * n];
    let mut gains = vec![1.0f64; 2 * n];
    let mut num = vec![0.0; n * n];
    let mut grad = vec![0.0; 2 * n];
    let mut kl = Vec::with_capacity(cfg.iterations);

    for it in 0..cfg.iterations {
        let exag = if it < cfg.exaggeration_iterations { cfg.early_exaggeration } else { 1.0 };
        let momentum = if it < cfg.momentum_switch { cfg.initial_momentum } else { cfg.final_momentum };

        let mut zsum = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                let dx = y[2 * i] - y[2 * j];
                let dy = y[2 * i + 1] - y[2 * j + 1];
                let v = 1.0 / (1.0 + dx * dx + dy * dy);
                num[i * n + j] = v;
                num[j * n + i] = v;
                zsum += 2.0 * v;
            }
        }
        grad.iter_mut().for_each(|g| *g = 0.0);
        for i in 0..n {
            let (mut gx, mut gy) = (0.0, 0.0);
            for j in 0..n {
                if i == j {
                    continue;
                }
                let w = num[i * n + j];
                let m = (exag * p[i * n + j] - w / zsum) * w;
                gx += m * (y[2 * i] - y[2 * j]);
                gy += m * (y[2 * i + 1] - y[2 * j + 1]);
            }
            grad[2 * i] = 4.0 * gx;
            grad[2 * i + 1] = 4.0 * gy;
        }
        let prev = y.clone();
        for k in 0..2 * n {
            gains[k] = if (grad[k] > 0.0) != (update[k] > 0.0) { gains[k] + 0.2 } else { (gains[k] * 0.8).max(0.01) };
            update[k] = momentum * update[k] - cfg.learning_rate * gains[k] * grad[k];
            y[k] += update[k];
        }
        center(&mut y);
        let mut value = kl_divergence(&p, &y);
        if let (true, Some(&last)) = (exag == 1.0, kl.last()) {
            if value > last {
                // momentum overshoot: drop the velocity and backtrack along
                // the plain gradient until KL stops rising
                update.iter_mut().for_each(|u| *u = 0.0);
                let mut step = cfg.learning_rate;
                value = last;
                y.copy_from_slice(&prev);
                for _ in 0..MAX_BACKTRACK {
                    let mut trial: Vec<f64> = prev.iter().zip(&grad).map(|(a, g)| a - step * g).collect();
                    center(&mut trial);
                    let v = kl_divergence(&p, &trial);
                    if v <= last {
                        y = trial;
                        value = v;
                        break;
                    }
                    step *= 0.5;
                }
            }
        }
        kl.push(value);
    }

    let mut embedding = vec![[0.0; 2]; n];
    for (k, &orig) in order.iter().enumerate() {
        embedding[orig] = [y[2 * k], y[2 * k + 1]];
    }
    Ok(TsneResult { embedding, kl })
}

/// Step halvings tried before an overshooting iteration is skipped.
const MAX_BACKTRACK: usize = 30;

fn center(y: &mut [f64]) {
    let n = y.len() / 2;
    let (mut mx, mut my) = (0.0, 0.0);
    for k in 0..n {
        mx += y[2 * k];
        my += y[2 * k + 1];
    }
    mx /= n as f64;
    my /= n as f64;
    for k in 0..n {
        y[2 * k] -= mx;
        y[2 * k + 1] -= my;
    }
}

/// KL(P‖Q) for a flattened 2-D embedding `y`.
pub fn kl_divergence(p: &[f64], y: &[f64]) -> f64 {
    let n = y.len() / 2;
    let mut zsum = 0.0;
    let mut num = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let dx = y[2 * i] - y[2 * j];
                let dy = y[2 * i + 1] - y[2 * j + 1];
                let v = 1.0 / (1.0 + dx * dx + dy * dy);
                num[i * n + j] = v;
                zsum += v;
            }
        }
    }
    let mut kl = 0.0;
    for (k, &pij) in p.iter().enumerate() {
        if pij > 0.0 {
            let q = (num[k] / zsum).max(1e-300);
            kl += pij * (pij / q).ln();
        }
    }
    kl.max(0.0)
}

/// Fraction of points with at least one other-domain point among their
/// [`OVERLAP_K`] nearest neighbours; 1.0 means fully mixed.
pub fn domain_overlap_score(embedding: &[[f64; 2]], domains: &[Domain]) -> Result<f64> {
    let n = embedding.len();
    if domains.len() != n {
        return Err(Error::ShapeMismatch("one domain tag per point required".into()));
    }
    if !(domains.contains(&Domain::Source) && domains.contains(&Domain::Target)) {
        return Err(Error::InvalidArgument("both domains must be present".into()));
    }
    let k = OVERLAP_K.min(n - 1);
    let mut mixed = 0usize;
    for i in 0..n {
        let mut others: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| ((embedding[i][0] - embedding[j][0]).hypot(embedding[i][1] - embedding[j][1]), j))
            .collect();
        others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        if others[..k].iter().any(|&(_, j)| domains[j] != domains[i]) {
            mixed += 1;
        }
    }
    Ok(mixed as f64 / n as f64)
}

/// Mean silhouette coefficient of a labelled 2-D point set.
pub fn silhouette(points: &[[f64; 2]], labels: &[usize]) -> f64 {
    let n = points.len();
    let d = |i: usize, j: usize| (points[i][0] - points[j][0]).hypot(points[i][1] - points[j][1]);
    let mut clusters: Vec<usize> = labels.to_vec();
    clusters.sort_unstable();
    clusters.dedup();
    let mut total = 0.0;
    for i in 0..n {
        let mut a = 0.0;
        let mut b = f64::INFINITY;
        for &c in &clusters {
            let members: Vec<usize> = (0..n).filter(|&j| labels[j] == c && j != i).collect();
            if members.is_empty() {
                continue;
            }
            let mean = members.iter().map(|&j| d(i, j)).sum::<f64>() / members.len() as f64;
            if c == labels[i] {
                a = mean;
            } else {
                b = b.min(mean);
            }
        }
        let s = if a.max(b) > 0.0 && b.is_finite() { (b - a) / a.max(b) } else { 0.0 };
        total += s;
    }
    total / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gaussian(n: usize, dim: usize, seed: u64, offset: f64) -> Vec<Vec<f64>> {
        let mut rng = crate::rng::seeded(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        (0..n).map(|_| (0..dim).map(|_| offset + normal.sample(&mut rng)).collect()).collect()
    }

    #[test]
    fn affinities_are_a_distribution() {
        let x = gaussian(60, 5, 1, 0.0);
        let p = pairwise_affinities(&x, 15.0).unwrap();
        let n = x.len();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for i in 0..n {
            for j in 0..n {
                assert!(p[i * n + j] >= 0.0);
                assert_eq!(p[i * n + j], p[j * n + i]);
            }
        }
    }

    #[test]
    fn perplexity_is_calibrated() {
        let x = gaussian(100, 10, 2, 0.0);
        let cond = conditional_affinities(&x, 15.0).unwrap();
        for row in cond.chunks(100) {
            assert!((row_perplexity(row) - 15.0).abs() < 1e-3);
        }
    }

    #[test]
    fn duplicates_are_degenerate() {
        let mut x = vec![vec![0.0, 0.0]; 20];
        x.extend(gaussian(20, 2, 3, 10.0));
        match pairwise_affinities(&x, 5.0) {
            Err(Error::DegenerateInput { indices }) => assert!(indices.contains(&0)),
            other => panic!("expected degenerate input, got {other:?}"),
        }
    }

    #[test]
    fn perplexity_bound() {
        let x = gaussian(30, 3, 1, 0.0);
        assert!(tsne(&x, &TsneConfig::default()).is_err());
    }

    #[test]
    fn centred_and_permutation_equivariant() {
        let x = gaussian(40, 4, 5, 0.0);
        let cfg = TsneConfig { perplexity: 5.0, iterations: 300, ..Default::default() };
        let a = tsne(&x, &cfg).unwrap();
        let (mx, my) = a.embedding.iter().fold((0.0, 0.0), |s, p| (s.0 + p[0], s.1 + p[1]));
        assert!(mx.abs() < 1e-9 && my.abs() < 1e-9);
        let perm: Vec<usize> = (0..40).rev().collect();
        let xp: Vec<Vec<f64>> = perm.iter().map(|&i| x[i].clone()).collect();
        let b = tsne(&xp, &cfg).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            assert_eq!(b.embedding[k], a.embedding[i]);
        }
        assert!(a.kl.iter().all(|v| v.is_finite() && *v >= 0.0));
    }

    #[test]
    fn kl_never_rises_after_exaggeration() {
        let x = gaussian(60, 5, 9, 0.0);
        let cfg = TsneConfig { perplexity: 10.0, iterations: 400, learning_rate: 300.0, ..Default::default() };
        let r = tsne(&x, &cfg).unwrap();
        let tail = &r.kl[cfg.exaggeration_iterations - 1..];
        assert!(tail.windows(2).all(|w| w[1] <= w[0]));
        assert!(r.kl[399] < r.kl[99]);
    }

    #[test]
    fn overlap_extremes() {
        let mut pts = Vec::new();
        let mut tags = Vec::new();
        for i in 0..30 {
            let (x, y) = ((i % 6) as f64, (i / 6) as f64);
            pts.push([x, y]);
            tags.push(Domain::Source);
            pts.push([x + 0.01, y - 0.01]);
            tags.push(Domain::Target);
        }
        assert_eq!(domain_overlap_score(&pts, &tags).unwrap(), 1.0);
        let far: Vec<[f64; 2]> = pts
            .iter()
            .zip(&tags)
            .map(|(p, t)| if *t == Domain::Target { [p[0] + 1000.0, p[1]] } else { *p })
            .collect();
        assert_eq!(domain_overlap_score(&far, &tags).unwrap(), 0.0);
        assert!(domain_overlap_score(&pts, &vec![Domain::Source; pts.len()]).is_err());
    }

    #[test]
    fn silhouette_of_separated_points() {
        let pts = [[0.0, 0.0], [0.0, 1.0], [100.0, 0.0], [100.0, 1.0]];
        assert!(silhouette(&pts, &[0, 0, 1, 1]) > 0.95);
    }
}
