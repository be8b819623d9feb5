//! Experiment driver: builds the data of every root seed, trains each
//! regime under k-fold cross-validation, evaluates on the held-out source
//! patches and on the target cohort, and writes a report plus a manifest of
//! every file produced.

pub mod config;
pub mod data;
mod report;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embed::{domain_overlap_score, feature_vector, tsne, Domain};
use crate::error::{Error, Result, ResultExt};
use crate::labels::{heatmap_to_centroids, LabeledPatch};
use crate::metrics::{
    evaluate_image, mean, patient_report, pi_from_detections, sample_sd, ImageEval, MatchConfig, PatientReport,
};
use crate::regimes::checkpoint::{self, CheckpointHeader};
use crate::regimes::{cross_validate, finish_regime, first_stage, MiniDetector, Regime, RegimeKind, TrainConfig, TrainOutcome};
use crate::rng::derive_seed;

pub use config::{DataSection, EmbedSection, EvalSection, ExperimentConfig, RunSection};
pub use data::{prepare, Item, SeedData};
pub use report::{render_csvs, ComparisonRow, PairedRow, RegimeSummary};

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Worker threads; 0 lets rayon decide.
    pub jobs: usize,
    pub cache_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainMetrics {
    pub images: Vec<ImageEval>,
    #[serde(deserialize_with = "crate::nan_serde::f64")]
    pub mean_f1: f64,
    #[serde(deserialize_with = "crate::nan_serde::f64")]
    pub sd_f1: f64,
    /// F1 over the pooled match counts of all images.
    #[serde(deserialize_with = "crate::nan_serde::f64")]
    pub pooled_f1: f64,
    /// Mean |ΔPI| over images with detections.
    #[serde(deserialize_with = "crate::nan_serde::f64")]
    pub mean_delta_pi: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddedPoint {
    pub id: String,
    pub domain: Domain,
    pub x: f64,
    pub y: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub train_size: usize,
    pub held_out_size: usize,
    /// Kept epoch of each training stage.
    pub best_epochs: Vec<Option<usize>>,
    pub checkpoint: String,
    pub checkpoint_hash: String,
    pub source: Option<DomainMetrics>,
    pub target: DomainMetrics,
    pub patients: PatientReport,
    pub overlap: Option<f64>,
    pub embedding: Vec<EmbeddedPoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub cell: String,
    pub seed: u64,
    pub regime: String,
    pub kind: RegimeKind,
    pub ss_increment: Option<usize>,
    pub folds: Vec<FoldReport>,
    /// Fold means.
    pub source_f1: Option<f64>,
    #[serde(deserialize_with = "crate::nan_serde::f64")]
    pub target_f1: f64,
    #[serde(deserialize_with = "crate::nan_serde::f64")]
    pub target_delta_pi: f64,
    pub overlap: Option<f64>,
    /// Sample SD across fold models of the target metrics.
    #[serde(deserialize_with = "crate::nan_serde::map")]
    pub fold_sd: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailedCell {
    pub cell: String,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub name: String,
    pub run_id: String,
    pub config_hash: String,
    pub cells: Vec<CellReport>,
    pub regimes: Vec<RegimeSummary>,
    /// Each regime against GS-only, one-way ANOVA over patients / images.
    pub anova: Vec<ComparisonRow>,
    /// Each regime against GS-only, paired over root seeds.
    pub paired: Vec<PairedRow>,
    pub failed: Vec<FailedCell>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub seed: u64,
    pub name: String,
    pub content_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellTiming {
    pub cell: String,
    pub ok: bool,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

/// Everything needed to trace a run: config, data, code version and the
/// files it wrote.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub name: String,
    pub config_hash: String,
    pub tool_version: String,
    pub architecture: String,
    pub created_unix: u64,
    pub cache_dir: Option<String>,
    pub datasets: Vec<DatasetRecord>,
    pub timings: Vec<CellTiming>,
    pub files: Vec<FileRecord>,
}

pub const REPORT_FILE: &str = "report.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const ANOVA_FILE: &str = "anova.json";

#[derive(Debug)]
pub struct ExperimentOutcome {
    pub report: ExperimentReport,
    pub manifest: RunManifest,
}

impl ExperimentOutcome {
    pub fn success(&self) -> bool {
        self.report.failed.is_empty()
    }
}

/// Run identifier: a prefix of the config hash, so reruns of one config share it.
pub fn run_id(cfg: &ExperimentConfig) -> String {
    format!("{}-{}", cfg.run.name, &cfg.hash()[..12])
}

/// All (regime, increment) pairs the config asks for.
pub fn regime_matrix(cfg: &ExperimentConfig) -> Vec<Regime> {
    let mut out = Vec::new();
    for &kind in &cfg.run.regimes {
        if kind.uses_ss() {
            for &inc in &cfg.run.ss_increments {
                out.push(Regime { kind, ss_increment: Some(inc) });
            }
        } else if !out.iter().any(|r: &Regime| r.kind == kind) {
            out.push(Regime { kind, ss_increment: None });
        }
    }
    out
}

fn cell_name(seed: u64, regime: &Regime) -> String {
    format!("seed-{seed}/{}", regime.id())
}

fn sha256_file(path: &Path) -> Result<(String, u64)> {
    let bytes = fs::read(path)?;
    Ok((hex::encode(Sha256::digest(&bytes)), bytes.len() as u64))
}

/// Detections of `model` on `img`, decoded with the evaluation settings.
pub fn detect(model: &MiniDetector<f32>, img: &crate::RgbImage, cfg: &ExperimentConfig, mpp: f64) -> Result<crate::CentroidSet> {
    let hm = model.predict(img, cfg.eval.predict_tile);
    heatmap_to_centroids(&hm, cfg.eval.peak_threshold, cfg.eval.min_separation_px, mpp)
}

fn domain_metrics(
    model: &MiniDetector<f32>,
    items: &[&Item],
    cfg: &ExperimentConfig,
) -> Result<(DomainMetrics, BTreeMap<String, Option<crate::PiScore>>)> {
    let per: Vec<(ImageEval, Option<crate::PiScore>, Option<f64>)> = items
        .par_iter()
        .map(|it| {
            let mpp = it.centroids.microns_per_pixel();
            let pred = detect(model, &it.image, cfg, mpp)?;
            let match_cfg = MatchConfig::new(cfg.eval.match_radius_um, mpp)?;
            let ev = evaluate_image(&it.id, &pred, &it.centroids, &match_cfg)?;
            let pi = pi_from_detections(&pred).ok();
            let truth = pi_from_detections(&it.centroids).ok();
            let dpi = match (pi, truth) {
                (Some(p), Some(t)) => Some(crate::delta_pi(&t, &p)),
                _ => None,
            };
            Ok((ev, pi, dpi))
        })
        .collect::<Result<_>>()?;
    let f1s: Vec<f64> = per.iter().map(|p| p.0.pooled.f1).collect();
    let (tp, fp, fn_) = per.iter().fold((0, 0, 0), |a, p| (a.0 + p.0.tp, a.1 + p.0.fp, a.2 + p.0.fn_));
    let dpis: Vec<f64> = per.iter().filter_map(|p| p.2).collect();
    let pis = per.iter().map(|p| (p.0.id.clone(), p.1)).collect();
    let metrics = DomainMetrics {
        mean_f1: mean(&f1s),
        sd_f1: sample_sd(&f1s),
        pooled_f1: crate::metrics::f1_counts(tp, fp, fn_)?.f1,
        mean_delta_pi: if dpis.is_empty() { f64::NAN } else { mean(&dpis) },
        images: per.into_iter().map(|p| p.0).collect(),
    };
    Ok((metrics, pis))
}

fn embedding(
    model: &MiniDetector<f32>,
    source: &[&Item],
    target: &[crate::RgbImage],
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<(Option<f64>, Vec<EmbeddedPoint>)> {
    let mut ids = Vec::new();
    let mut domains = Vec::new();
    let mut images: Vec<&crate::RgbImage> = Vec::new();
    for it in source.iter().take(cfg.embed.source_patches) {
        ids.push(it.id.clone());
        domains.push(Domain::Source);
        images.push(&it.image);
    }
    for (i, img) in target.iter().enumerate() {
        ids.push(format!("target-{i:03}"));
        domains.push(Domain::Target);
        images.push(img);
    }
    let rows: Vec<Vec<f64>> = images.par_iter().map(|img| feature_vector(model, img)).collect();
    let result = match tsne(&rows, &cfg.tsne(derive_seed(seed, "experiment/tsne"))) {
        Ok(r) => r,
        Err(e @ (Error::InvalidArgument(_) | Error::ShapeMismatch(_) | Error::DegenerateInput { .. })) => {
            log::warn!("t-SNE skipped: {e}");
            return Ok((None, Vec::new()));
        }
        Err(e) => return Err(e),
    };
    let overlap = match domain_overlap_score(&result.embedding, &domains) {
        Ok(v) => Some(v),
        Err(e) => {
            log::warn!("overlap score skipped: {e}");
            None
        }
    };
    let points = ids
        .into_iter()
        .zip(domains)
        .zip(&result.embedding)
        .map(|((id, domain), p)| EmbeddedPoint { id, domain, x: p[0], y: p[1] })
        .collect();
    Ok((overlap, points))
}

fn write_losses(path: &Path, folds: &[(usize, Vec<TrainOutcome>)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["fold", "stage", "epoch", "train_loss", "val_loss", "kept"])?;
    for (fold, stages) in folds {
        for (s, st) in stages.iter().enumerate() {
            for (e, (tl, vl)) in st.train_loss.iter().zip(&st.val_loss).enumerate() {
                let kept = st.best_epoch == Some(e);
                w.write_record([fold.to_string(), s.to_string(), e.to_string(), tl.to_string(), vl.to_string(), kept.to_string()])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

struct SeedContext<'a> {
    cfg: &'a ExperimentConfig,
    seed: u64,
    data: &'a SeedData,
    embed_targets: Vec<crate::RgbImage>,
    out_dir: &'a Path,
    train_cfg: TrainConfig,
    folds: Vec<(Vec<usize>, Vec<usize>)>,
}

impl SeedContext<'_> {
    fn run_cell(&self, regime: &Regime, pretrain: &mut BTreeMap<(usize, usize), TrainOutcome>) -> Result<CellReport> {
        let cfg = self.cfg;
        let cell = cell_name(self.seed, regime);
        let rel_dir = PathBuf::from(format!("seed-{}", self.seed)).join(regime.id());
        let dir = self.out_dir.join(&rel_dir);
        fs::create_dir_all(&dir)?;
        let ss_refs: Vec<&LabeledPatch> = regime.ss_increment.map(|k| self.data.ss_patches(k)).unwrap_or_default();
        if let Some(k) = regime.ss_increment {
            if ss_refs.len() < k {
                return Err(Error::InsufficientPatches { found: ss_refs.len(), required: k });
            }
        }
        let ss = (!ss_refs.is_empty()).then_some(ss_refs.as_slice());

        let mut folds = Vec::new();
        let mut stages_log = Vec::new();
        for (f, (train_idx, held)) in self.folds.iter().enumerate() {
            let gs_refs: Vec<&LabeledPatch> = train_idx.iter().map(|&i| &self.data.gs_patches[i]).collect();
            let gs = Some(gs_refs.as_slice());
            // SS-first stages do not depend on the fold: train once per increment
            let first = match (regime.kind, regime.ss_increment) {
                (RegimeKind::SsOnly | RegimeKind::SsThenGs, Some(k)) => match pretrain.get(&(k, 0)) {
                    Some(t) => t.clone(),
                    None => {
                        let t = first_stage(regime, gs, ss, &self.train_cfg)?;
                        pretrain.insert((k, 0), t.clone());
                        t
                    }
                },
                _ => first_stage(regime, gs, ss, &self.train_cfg)?,
            };
            let outcome = finish_regime(regime, first, gs, ss, &self.train_cfg).context(format!("{cell} fold {f}"))?;

            let mut parent = None;
            if outcome.stages.len() > 1 {
                let header = CheckpointHeader::new(self.train_cfg.seed, format!("{}/stage0", regime.id()), None);
                let path = dir.join(format!("fold-{f}.stage0.ckpt"));
                parent = Some(checkpoint::save(&path, &outcome.stages[0].model, &header)?);
            }
            let header = CheckpointHeader::new(self.train_cfg.seed, regime.id(), parent);
            let ckpt_rel = rel_dir.join(format!("fold-{f}.ckpt"));
            let checkpoint_hash = checkpoint::save(&self.out_dir.join(&ckpt_rel), &outcome.model, &header)?;

            let held_items: Vec<&Item> = held.iter().map(|&i| &self.data.gs[i]).collect();
            let source = if held_items.is_empty() {
                None
            } else {
                Some(domain_metrics(&outcome.model, &held_items, cfg)?.0)
            };
            let cohort: Vec<&Item> = self.data.cohort.iter().collect();
            let (target, tma_pis) = domain_metrics(&outcome.model, &cohort, cfg)?;
            let patients = patient_report(&tma_pis, &self.data.patient_of(), &self.data.expert_pi)?;

            let (overlap, points) = if cfg.embed.enabled {
                let src: Vec<&Item> =
                    if held_items.is_empty() { self.data.gs.iter().collect() } else { held_items.clone() };
                embedding(&outcome.model, &src, &self.embed_targets, cfg, self.seed)?
            } else {
                (None, Vec::new())
            };

            folds.push(FoldReport {
                fold: f,
                train_size: train_idx.len(),
                held_out_size: held.len(),
                best_epochs: outcome.stages.iter().map(|s| s.best_epoch).collect(),
                checkpoint: ckpt_rel.to_string_lossy().into_owned(),
                checkpoint_hash,
                source,
                target,
                patients,
                overlap,
                embedding: points,
            });
            stages_log.push((f, outcome.stages));
        }
        write_losses(&dir.join("losses.csv"), &stages_log)?;

        let opt_mean = |v: Vec<Option<f64>>| -> Option<f64> {
            let v: Option<Vec<f64>> = v.into_iter().collect();
            v.filter(|v| !v.is_empty()).map(|v| mean(&v))
        };
        let per_fold: Vec<BTreeMap<String, f64>> = folds
            .iter()
            .map(|f| {
                BTreeMap::from([
                    ("target_f1".to_string(), f.target.mean_f1),
                    ("target_delta_pi".to_string(), f.patients.mean_delta_pi),
                ])
            })
            .collect();
        Ok(CellReport {
            cell,
            seed: self.seed,
            regime: regime.id(),
            kind: regime.kind,
            ss_increment: regime.ss_increment,
            source_f1: opt_mean(folds.iter().map(|f| f.source.as_ref().map(|s| s.mean_f1)).collect()),
            target_f1: mean(&folds.iter().map(|f| f.target.mean_f1).collect::<Vec<_>>()),
            target_delta_pi: mean(&folds.iter().map(|f| f.patients.mean_delta_pi).collect::<Vec<_>>()),
            overlap: opt_mean(folds.iter().map(|f| f.overlap).collect()),
            fold_sd: if folds.len() > 1 { crate::metrics::fold_sd(&per_fold) } else { BTreeMap::new() },
            folds,
        })
    }
}

struct SeedOutput {
    cells: Vec<std::result::Result<CellReport, FailedCell>>,
    datasets: Vec<DatasetRecord>,
    timings: Vec<CellTiming>,
}

fn run_seed(cfg: &ExperimentConfig, seed: u64, out_dir: &Path, opts: &RunOptions) -> SeedOutput {
    let regimes = regime_matrix(cfg);
    let fail_all = |e: &Error| SeedOutput {
        cells: regimes
            .iter()
            .map(|r| Err(FailedCell { cell: cell_name(seed, r), error: format!("data preparation: {e}") }))
            .collect(),
        datasets: Vec::new(),
        timings: Vec::new(),
    };
    let t0 = Instant::now();
    let data = match prepare(cfg, seed, opts.cache_dir.as_deref()) {
        Ok(d) => d,
        Err(e) => return fail_all(&e),
    };
    log::info!("seed {seed}: data ready in {:.1}s", t0.elapsed().as_secs_f64());
    let embed_targets =
        if cfg.embed.enabled { data::embed_target_patches(cfg, seed) } else { Ok(Vec::new()) };
    let embed_targets = match embed_targets {
        Ok(v) => v,
        Err(e) => return fail_all(&e),
    };
    let train_cfg = TrainConfig { seed: derive_seed(seed, "experiment/train"), ..cfg.train.clone() };
    let folds = match cross_validate(data.gs.len(), cfg.train.folds, derive_seed(seed, "experiment/folds"), |_, t, h| {
        Ok((t.to_vec(), h.to_vec()))
    }) {
        Ok(f) => f.into_iter().map(|f| f.result).collect(),
        Err(e) => return fail_all(&e),
    };
    let ctx = SeedContext { cfg, seed, data: &data, embed_targets, out_dir, train_cfg, folds };

    let mut pretrain = BTreeMap::new();
    let mut cells = Vec::new();
    let mut timings = Vec::new();
    for regime in &regimes {
        let t = Instant::now();
        let name = cell_name(seed, regime);
        let res = ctx.run_cell(regime, &mut pretrain);
        let seconds = t.elapsed().as_secs_f64();
        log::info!("{name}: {} in {seconds:.1}s", if res.is_ok() { "done" } else { "failed" });
        timings.push(CellTiming { cell: name.clone(), ok: res.is_ok(), seconds });
        cells.push(res.map_err(|e| FailedCell { cell: name, error: e.to_string() }));
    }
    let datasets = data
        .hashes
        .iter()
        .map(|(name, hash)| DatasetRecord { seed, name: name.clone(), content_hash: hash.clone() })
        .collect();
    SeedOutput { cells, datasets, timings }
}

fn list_files(root: &Path, dir: &Path, out: &mut Vec<FileRecord>) -> Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)?.collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let path = e.path();
        if path.is_dir() {
            list_files(root, &path, out)?;
        } else {
            let rel = path.strip_prefix(root).unwrap_or(&path).to_string_lossy().into_owned();
            if rel == MANIFEST_FILE {
                continue;
            }
            let (sha256, bytes) = sha256_file(&path)?;
            out.push(FileRecord { path: rel, sha256, bytes });
        }
    }
    Ok(())
}

/// Runs the whole matrix and writes `report.json`, the per-cell artifacts
/// and `manifest.json` under `out_dir`. Failed cells are listed in the
/// report rather than aborting the run.
pub fn run_experiment(cfg: &ExperimentConfig, config_text: &str, out_dir: &Path, opts: &RunOptions) -> Result<ExperimentOutcome> {
    cfg.validate().map_err(|(s, k, m)| Error::Config { line: 0, message: format!("{s}.{k}: {m}") })?;
    fs::create_dir_all(out_dir).context(format!("creating {}", out_dir.display()))?;
    fs::write(out_dir.join(CONFIG_FILE), config_text)?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    let seeds = cfg.run.root_seeds.clone();
    let outputs: Vec<SeedOutput> =
        pool.install(|| seeds.par_iter().map(|&s| run_seed(cfg, s, out_dir, opts)).collect());

    let mut cells = Vec::new();
    let mut failed = Vec::new();
    let mut datasets = Vec::new();
    let mut timings = Vec::new();
    for o in outputs {
        for c in o.cells {
            match c {
                Ok(r) => cells.push(r),
                Err(f) => failed.push(f),
            }
        }
        datasets.extend(o.datasets);
        timings.extend(o.timings);
    }
    let regimes = regime_matrix(cfg).iter().map(Regime::id).collect::<Vec<_>>();
    let report = report::assemble(cfg, cells, failed, &regimes);
    fs::write(out_dir.join(REPORT_FILE), serde_json::to_vec_pretty(&report)?)?;
    let regime_dir = out_dir.join("regimes");
    fs::create_dir_all(&regime_dir)?;
    for s in &report.regimes {
        let cells: Vec<&CellReport> = report.cells.iter().filter(|c| c.regime == s.regime).collect();
        let body = serde_json::json!({ "run_id": report.run_id, "summary": s, "cells": cells });
        fs::write(regime_dir.join(format!("{}.json", s.regime)), serde_json::to_vec_pretty(&body)?)?;
    }
    let anova = serde_json::json!({ "run_id": report.run_id, "one_way": report.anova, "paired": report.paired });
    fs::write(out_dir.join(ANOVA_FILE), serde_json::to_vec_pretty(&anova)?)?;

    let mut files = Vec::new();
    list_files(out_dir, out_dir, &mut files)?;
    let manifest = RunManifest {
        run_id: report.run_id.clone(),
        name: cfg.run.name.clone(),
        config_hash: report.config_hash.clone(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        architecture: crate::regimes::ARCHITECTURE.to_string(),
        created_unix: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
        cache_dir: opts.cache_dir.as_ref().map(|p| p.display().to_string()),
        datasets,
        timings,
        files,
    };
    fs::write(out_dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(ExperimentOutcome { report, manifest })
}

pub fn load_report(path: &Path) -> Result<ExperimentReport> {
    Ok(serde_json::from_slice(&fs::read(path).context(path.display().to_string())?)?)
}
