//! Aggregation across seeds, regime comparisons and CSV rendering.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{run_id, CellReport, ExperimentConfig, ExperimentReport, FailedCell};
use crate::error::Result;
use crate::metrics::{mean, one_way_anova, repeated_measures_anova};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegimeSummary {
    pub regime: String,
    pub seeds: Vec<u64>,
    pub source_f1: Option<f64>,
    #[serde(deserialize_with = "crate::nan_serde::f64")]
    pub target_f1: f64,
    #[serde(deserialize_with = "crate::nan_serde::f64")]
    pub target_delta_pi: f64,
    pub overlap: Option<f64>,
    /// Per-seed values, in the order of `seeds`.
    pub seed_source_f1: Vec<Option<f64>>,
    #[serde(deserialize_with = "crate::nan_serde::vec")]
    pub seed_target_f1: Vec<f64>,
    #[serde(deserialize_with = "crate::nan_serde::vec")]
    pub seed_target_delta_pi: Vec<f64>,
    pub seed_overlap: Vec<Option<f64>>,
}

/// One-way ANOVA of one regime against the baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub metric: String,
    pub baseline: String,
    pub regime: String,
    pub n_baseline: usize,
    pub n_regime: usize,
    #[serde(deserialize_with = "crate::nan_serde::f64")]
    pub mean_baseline: f64,
    #[serde(deserialize_with = "crate::nan_serde::f64")]
    pub mean_regime: f64,
    #[serde(deserialize_with = "crate::nan_serde::f64")]
    pub f: f64,
    #[serde(deserialize_with = "crate::nan_serde::f64")]
    pub p: f64,
}

/// Paired comparison over root seeds (repeated-measures ANOVA, two conditions).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedRow {
    pub metric: String,
    pub baseline: String,
    pub regime: String,
    pub seeds: usize,
    /// Mean over seeds of regime minus baseline.
    #[serde(deserialize_with = "crate::nan_serde::f64")]
    pub mean_difference: f64,
    #[serde(deserialize_with = "crate::nan_serde::f64")]
    pub f: f64,
    #[serde(deserialize_with = "crate::nan_serde::f64")]
    pub p_two_sided: f64,
    /// p-value for the regime being better: lower ΔPI, higher F1.
    #[serde(deserialize_with = "crate::nan_serde::f64")]
    pub p_one_sided: f64,
}

pub const BASELINE: &str = "gs";

fn opt_mean(v: &[Option<f64>]) -> Option<f64> {
    let v: Option<Vec<f64>> = v.iter().copied().collect();
    v.filter(|v| !v.is_empty()).map(|v| mean(&v))
}

fn summarize(regime: &str, cells: &[&CellReport]) -> RegimeSummary {
    let seed_source_f1: Vec<Option<f64>> = cells.iter().map(|c| c.source_f1).collect();
    let seed_target_f1: Vec<f64> = cells.iter().map(|c| c.target_f1).collect();
    let seed_target_delta_pi: Vec<f64> = cells.iter().map(|c| c.target_delta_pi).collect();
    let seed_overlap: Vec<Option<f64>> = cells.iter().map(|c| c.overlap).collect();
    RegimeSummary {
        regime: regime.to_string(),
        seeds: cells.iter().map(|c| c.seed).collect(),
        source_f1: opt_mean(&seed_source_f1),
        target_f1: mean(&seed_target_f1),
        target_delta_pi: mean(&seed_target_delta_pi),
        overlap: opt_mean(&seed_overlap),
        seed_source_f1,
        seed_target_f1,
        seed_target_delta_pi,
        seed_overlap,
    }
}

/// Observations of a cell for `metric`, averaged over fold models: per
/// patient for ΔPI, per core for target F1, per held-out patch for source F1.
fn observations(cell: &CellReport, metric: &str) -> Vec<f64> {
    let mut acc: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for f in &cell.folds {
        match metric {
            "target_delta_pi" => {
                for p in &f.patients.patients {
                    acc.entry(p.patient.clone()).or_default().push(p.delta_pi);
                }
            }
            "target_f1" => {
                for im in &f.target.images {
                    acc.entry(im.id.clone()).or_default().push(im.pooled.f1);
                }
            }
            "source_f1" => {
                for im in f.source.iter().flat_map(|s| &s.images) {
                    acc.entry(im.id.clone()).or_default().push(im.pooled.f1);
                }
            }
            _ => {}
        }
    }
    acc.values().map(|v| mean(v)).collect()
}

const METRICS: [&str; 3] = ["target_delta_pi", "target_f1", "source_f1"];

fn seed_value(s: &RegimeSummary, metric: &str, i: usize) -> Option<f64> {
    match metric {
        "target_delta_pi" => Some(s.seed_target_delta_pi[i]),
        "target_f1" => Some(s.seed_target_f1[i]),
        "source_f1" => s.seed_source_f1[i],
        _ => None,
    }
}

pub(super) fn assemble(
    cfg: &ExperimentConfig,
    mut cells: Vec<CellReport>,
    failed: Vec<FailedCell>,
    regimes: &[String],
) -> ExperimentReport {
    cells.sort_by(|a, b| {
        let ra = regimes.iter().position(|r| *r == a.regime);
        let rb = regimes.iter().position(|r| *r == b.regime);
        a.seed.cmp(&b.seed).then(ra.cmp(&rb))
    });
    let by_regime = |r: &str| -> Vec<&CellReport> { cells.iter().filter(|c| c.regime == r).collect() };
    let summaries: Vec<RegimeSummary> = regimes
        .iter()
        .filter(|r| !by_regime(r).is_empty())
        .map(|r| summarize(r, &by_regime(r)))
        .collect();

    let mut anova = Vec::new();
    let mut paired = Vec::new();
    let baseline = summaries.iter().find(|s| s.regime == BASELINE);
    for other in summaries.iter().filter(|s| s.regime != BASELINE) {
        let Some(base) = baseline else { break };
        for metric in METRICS {
            let a: Vec<f64> = by_regime(BASELINE).iter().flat_map(|c| observations(c, metric)).collect();
            let b: Vec<f64> = by_regime(&other.regime).iter().flat_map(|c| observations(c, metric)).collect();
            match one_way_anova(&[a.clone(), b.clone()]) {
                Ok(t) => anova.push(ComparisonRow {
                    metric: metric.to_string(),
                    baseline: BASELINE.to_string(),
                    regime: other.regime.clone(),
                    n_baseline: a.len(),
                    n_regime: b.len(),
                    mean_baseline: mean(&a),
                    mean_regime: mean(&b),
                    f: t.f,
                    p: t.p,
                }),
                Err(e) => log::warn!("no {metric} ANOVA for {} vs {BASELINE}: {e}", other.regime),
            }

            // pair seeds present in both regimes
            let mut xs = Vec::new();
            let mut ys = Vec::new();
            for (i, seed) in base.seeds.iter().enumerate() {
                let Some(j) = other.seeds.iter().position(|s| s == seed) else { continue };
                if let (Some(x), Some(y)) = (seed_value(base, metric, i), seed_value(other, metric, j)) {
                    xs.push(x);
                    ys.push(y);
                }
            }
            match repeated_measures_anova(&[xs.clone(), ys.clone()]) {
                Ok(t) => {
                    let diff = mean(&ys) - mean(&xs);
                    let better = if metric == "target_delta_pi" { diff < 0.0 } else { diff > 0.0 };
                    paired.push(PairedRow {
                        metric: metric.to_string(),
                        baseline: BASELINE.to_string(),
                        regime: other.regime.clone(),
                        seeds: xs.len(),
                        mean_difference: diff,
                        f: t.f,
                        p_two_sided: t.p,
                        p_one_sided: if better { t.p / 2.0 } else { 1.0 - t.p / 2.0 },
                    });
                }
                Err(e) => log::warn!("no paired {metric} test for {} vs {BASELINE}: {e}", other.regime),
            }
        }
    }

    ExperimentReport {
        name: cfg.run.name.clone(),
        run_id: run_id(cfg),
        config_hash: cfg.hash(),
        regimes: summaries,
        anova,
        paired,
        cells,
        failed,
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// Writes plot-ready CSVs of a report into `dir` and returns their paths.
pub fn render_csvs(report: &ExperimentReport, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut open = |name: &str, header: &[&str]| -> Result<csv::Writer<std::fs::File>> {
        let path = dir.join(name);
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(header)?;
        written.push(path);
        Ok(w)
    };

    let mut w = open("regimes.csv", &["regime", "seeds", "source_f1", "target_f1", "target_delta_pi", "overlap"])?;
    for s in &report.regimes {
        w.write_record([
            s.regime.clone(),
            s.seeds.len().to_string(),
            fmt_opt(s.source_f1),
            s.target_f1.to_string(),
            s.target_delta_pi.to_string(),
            fmt_opt(s.overlap),
        ])?;
    }
    w.flush()?;

    let mut w = open("f1_distribution.csv", &["seed", "regime", "fold", "domain", "image", "precision", "recall", "f1"])?;
    for c in &report.cells {
        for f in &c.folds {
            let domains = f.source.iter().map(|s| ("source", s)).chain([("target", &f.target)]);
            for (domain, m) in domains {
                for im in &m.images {
                    w.write_record([
                        c.seed.to_string(),
                        c.regime.clone(),
                        f.fold.to_string(),
                        domain.to_string(),
                        im.id.clone(),
                        im.pooled.precision.to_string(),
                        im.pooled.recall.to_string(),
                        im.pooled.f1.to_string(),
                    ])?;
                }
            }
        }
    }
    w.flush()?;

    let mut w = open("patients.csv", &["seed", "regime", "fold", "patient", "pi_actual", "pi_predicted", "delta_pi", "bin"])?;
    for c in &report.cells {
        for f in &c.folds {
            for p in &f.patients.patients {
                w.write_record([
                    c.seed.to_string(),
                    c.regime.clone(),
                    f.fold.to_string(),
                    p.patient.clone(),
                    p.pi_actual.to_string(),
                    p.pi_predicted.to_string(),
                    p.delta_pi.to_string(),
                    p.bin.clone(),
                ])?;
            }
        }
    }
    w.flush()?;

    let mut w = open("delta_pi_by_interval.csv", &["seed", "regime", "fold", "bin", "patients", "mean_delta_pi"])?;
    for c in &report.cells {
        for f in &c.folds {
            for b in &f.patients.bins {
                w.write_record([
                    c.seed.to_string(),
                    c.regime.clone(),
                    f.fold.to_string(),
                    b.bin.clone(),
                    b.patients.to_string(),
                    fmt_opt(b.mean_delta_pi),
                ])?;
            }
        }
    }
    w.flush()?;

    let mut w = open("tsne.csv", &["seed", "regime", "fold", "id", "domain", "x", "y"])?;
    for c in &report.cells {
        for f in &c.folds {
            for p in &f.embedding {
                w.write_record([
                    c.seed.to_string(),
                    c.regime.clone(),
                    f.fold.to_string(),
                    p.id.clone(),
                    p.domain.to_string(),
                    p.x.to_string(),
                    p.y.to_string(),
                ])?;
            }
        }
    }
    w.flush()?;

    let mut w = open("anova.csv", &["test", "metric", "baseline", "regime", "n", "mean_baseline", "mean_regime", "f", "p"])?;
    for r in &report.anova {
        w.write_record([
            "one-way".to_string(),
            r.metric.clone(),
            r.baseline.clone(),
            r.regime.clone(),
            format!("{}+{}", r.n_baseline, r.n_regime),
            r.mean_baseline.to_string(),
            r.mean_regime.to_string(),
            r.f.to_string(),
            r.p.to_string(),
        ])?;
    }
    for r in &report.paired {
        w.write_record([
            "paired-one-sided".to_string(),
            r.metric.clone(),
            r.baseline.clone(),
            r.regime.clone(),
            r.seeds.to_string(),
            String::new(),
            r.mean_difference.to_string(),
            r.f.to_string(),
            r.p_one_sided.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(written)
}
