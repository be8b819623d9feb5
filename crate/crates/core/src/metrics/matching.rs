use serde::{Deserialize, Serialize};

use crate::centroid::{CellClass, Centroid, CentroidSet};
use crate::error::{Error, Result};

/// Maximum distance (µm) for a detection to count as the same cell.
pub const DEFAULT_MATCH_RADIUS_UM: f64 = 6.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchConfig {
    pub radius_um: f64,
    pub microns_per_pixel: f64,
}

impl MatchConfig {
    pub fn new(radius_um: f64, microns_per_pixel: f64) -> Result<Self> {
        if !(radius_um > 0.0 && microns_per_pixel > 0.0) {
            return Err(Error::InvalidArgument("radius and calibration must be positive".into()));
        }
        Ok(Self { radius_um, microns_per_pixel })
    }
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self { radius_um: DEFAULT_MATCH_RADIUS_UM, microns_per_pixel: crate::DEFAULT_MICRONS_PER_PIXEL }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    /// `(pred index, gt index, distance µm)`, indices into the input sets.
    pub matches: Vec<(usize, usize, f64)>,
}

impl MatchResult {
    pub fn merge(&mut self, other: &MatchResult) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.matches.extend_from_slice(&other.matches);
    }
}

/// Matches predictions to ground truth one-to-one within the radius.
///
/// Per class, the matching has maximum cardinality and, among those, minimum
/// total distance. Extra detections of an already matched cell are false
/// positives.
pub fn match_centroids(pred: &CentroidSet, gt: &CentroidSet, cfg: &MatchConfig) -> Result<MatchResult> {
    for mpp in [pred.microns_per_pixel(), gt.microns_per_pixel()] {
        if (mpp - cfg.microns_per_pixel).abs() > 1e-12 {
            return Err(Error::CalibrationMismatch { pred: pred.microns_per_pixel(), gt: gt.microns_per_pixel() });
        }
    }
    let mut total = MatchResult::default();
    for class in CellClass::ALL {
        total.merge(&match_class(pred, gt, class, cfg));
    }
    total.matches.sort_by_key(|m| (m.0, m.1));
    Ok(total)
}

/// Matching restricted to one class.
pub fn match_class(pred: &CentroidSet, gt: &CentroidSet, class: CellClass, cfg: &MatchConfig) -> MatchResult {
    let p: Vec<(usize, &Centroid)> = pred.centroids().iter().enumerate().filter(|(_, c)| c.class == class).collect();
    let g: Vec<(usize, &Centroid)> = gt.centroids().iter().enumerate().filter(|(_, c)| c.class == class).collect();
    let radius_px = cfg.radius_um / cfg.microns_per_pixel;
    let pairs = assign_within_radius(
        &p.iter().map(|(_, c)| (c.x, c.y)).collect::<Vec<_>>(),
        &g.iter().map(|(_, c)| (c.x, c.y)).collect::<Vec<_>>(),
        radius_px,
    );
    let matches: Vec<(usize, usize, f64)> =
        pairs.into_iter().map(|(i, j, d)| (p[i].0, g[j].0, d * cfg.microns_per_pixel)).collect();
    MatchResult { tp: matches.len(), fp: p.len() - matches.len(), fn_: g.len() - matches.len(), matches }
}

/// Optimal one-to-one pairing of two point lists under `distance < radius`.
///
/// Returns `(index in a, index in b, distance)`. The feasibility graph is
/// split into connected components, each solved exactly; the optimum of the
/// whole problem is the union of the component optima.
pub fn assign_within_radius(a: &[(f64, f64)], b: &[(f64, f64)], radius: f64) -> Vec<(usize, usize, f64)> {
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    let dist = |i: usize, j: usize| (a[i].0 - b[j].0).hypot(a[i].1 - b[j].1);

    // bucket b by a grid of cell size `radius`
    let cell = |p: (f64, f64)| ((p.0 / radius).floor() as i64, (p.1 / radius).floor() as i64);
    let mut buckets: std::collections::HashMap<(i64, i64), Vec<usize>> = std::collections::HashMap::new();
    for (j, &p) in b.iter().enumerate() {
        buckets.entry(cell(p)).or_default().push(j);
    }
    let mut edges: Vec<(usize, usize)> = Vec::new();
    for (i, &p) in a.iter().enumerate() {
        let (cx, cy) = cell(p);
        for gy in cy - 1..=cy + 1 {
            for gx in cx - 1..=cx + 1 {
                if let Some(js) = buckets.get(&(gx, gy)) {
                    edges.extend(js.iter().filter(|&&j| dist(i, j) < radius).map(|&j| (i, j)));
                }
            }
        }
    }
    if edges.is_empty() {
        return Vec::new();
    }

    // union-find over a-nodes [0, na) and b-nodes [na, na + nb)
    let na = a.len();
    let mut parent: Vec<usize> = (0..na + b.len()).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for &(i, j) in &edges {
        let (ri, rj) = (find(&mut parent, i), find(&mut parent, na + j));
        if ri != rj {
            parent[ri.max(rj)] = ri.min(rj);
        }
    }
    let mut groups: std::collections::BTreeMap<usize, (Vec<usize>, Vec<usize>)> = Default::default();
    for &(i, j) in &edges {
        let root = find(&mut parent, i);
        let g = groups.entry(root).or_default();
        if !g.0.contains(&i) {
            g.0.push(i);
        }
        if !g.1.contains(&j) {
            g.1.push(j);
        }
    }

    let mut out = Vec::new();
    for (ai, bj) in groups.values() {
        // Infeasible pairs cost more than any set of feasible ones, so the
        // optimum first maximizes the pair count, then minimizes distance.
        let n = ai.len().max(bj.len());
        let big = radius * (ai.len().min(bj.len()) as f64 + 1.0);
        let mut cost = vec![big; n * n];
        for (r, &i) in ai.iter().enumerate() {
            for (c, &j) in bj.iter().enumerate() {
                let d = dist(i, j);
                if d < radius {
                    cost[r * n + c] = d;
                }
            }
        }
        for (r, &c) in hungarian(&cost, n).iter().enumerate() {
            if r < ai.len() && c < bj.len() {
                let d = dist(ai[r], bj[c]);
                if d < radius {
                    out.push((ai[r], bj[c], d));
                }
            }
        }
    }
    out.sort_by_key(|m| (m.0, m.1));
    out
}

/// Minimum-cost perfect assignment on an `n × n` row-major cost matrix.
/// Returns the column assigned to each row.
pub fn hungarian(cost: &[f64], n: usize) -> Vec<usize> {
    // Shortest augmenting path formulation with row/column potentials.
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0usize; n];
    for j in 1..=n {
        if p[j] > 0 {
            row_to_col[p[j] - 1] = j - 1;
        }
    }
    row_to_col
}
