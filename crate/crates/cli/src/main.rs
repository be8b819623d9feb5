use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use ki67::embed::{domain_overlap_score, feature_vector, tsne, Domain, TsneConfig};
use ki67::experiment::{self, ExperimentConfig, RunOptions};
use ki67::ihcch::{ihcch_pipeline, overlay, IhcchConfig};
use ki67::labels::{
    build_ss_dataset, centroids_to_heatmap, heatmap_to_centroids, load_dataset, save_dataset, DatasetManifest,
    LabeledPatch, SsDatasetSpec, DEFAULT_PEAK_THRESHOLD, DEFAULT_SIGMA_PX,
};
use ki67::metrics::{evaluate_image, patient_report, pi_from_detections, MatchConfig, DEFAULT_MATCH_RADIUS_UM};
use ki67::regimes::checkpoint::{self, CheckpointHeader};
use ki67::regimes::{run_regime, Regime, RegimeKind, TrainConfig};
use ki67::synth::{gen_image, DomainParams, FrameSpec};
use ki67::{CentroidSet, RgbImage, DEFAULT_MICRONS_PER_PIXEL};

#[derive(Parser)]
#[command(name = "ki67", version, about = "Ki-67 proliferation-index scoring with pseudo-label domain adaptation")]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum FrameKind {
    Patch,
    Tma,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic IHC images with planted centroids.
    Synth {
        /// `source`, `target`, or a JSON file of domain parameters.
        #[arg(long, default_value = "source")]
        preset: String,
        #[arg(long, value_enum, default_value = "patch")]
        kind: FrameKind,
        /// Frame side; defaults to 256 for patches and 2000 for TMAs.
        #[arg(long)]
        size: Option<usize>,
        #[arg(long, default_value_t = 20.0)]
        pi: f64,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Detect nuclei with the colour-histogram pipeline.
    IhcchDetect {
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// TOML file of IHCCH settings.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_MICRONS_PER_PIXEL)]
        mpp: f64,
        /// Also write the image with detections drawn on it.
        #[arg(long)]
        overlay: Option<PathBuf>,
    },
    /// Build a silver-standard dataset from unlabelled target images.
    GenSs {
        /// PNG files or directories of them.
        #[arg(required = true)]
        images: Vec<PathBuf>,
        #[arg(long)]
        increment: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_MICRONS_PER_PIXEL)]
        mpp: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one regime and write a checkpoint.
    Train {
        #[arg(long)]
        regime: RegimeKind,
        /// Gold-standard data: a dataset directory or PNGs with centroid CSVs.
        #[arg(long)]
        gs: Option<PathBuf>,
        /// Silver-standard dataset directory.
        #[arg(long)]
        ss: Option<PathBuf>,
        /// TOML file of training settings.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint against images with ground-truth centroid CSVs.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        /// Directory of `NAME.png` with `NAME.csv` ground truth.
        #[arg(long)]
        images: PathBuf,
        /// CSV `tma,patient` mapping images to patients.
        #[arg(long, requires = "expert")]
        patients: Option<PathBuf>,
        /// CSV `patient,pi` of expert patient PIs.
        #[arg(long, requires = "patients")]
        expert: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_MATCH_RADIUS_UM)]
        radius_um: f64,
        #[arg(long, default_value_t = DEFAULT_PEAK_THRESHOLD)]
        threshold: f32,
        #[arg(long, default_value_t = DEFAULT_MICRONS_PER_PIXEL)]
        mpp: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// t-SNE of detector features for source and target images.
    Embed {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long, default_value_t = 15.0)]
        perplexity: f64,
        #[arg(long, default_value_t = 1000)]
        iterations: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an experiment matrix from a TOML config.
    Experiment {
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Parallel workers (0 = one per core).
        #[arg(long, default_value_t = 0)]
        jobs: usize,
        #[arg(long, env = "KI67_CACHE_DIR")]
        cache_dir: Option<PathBuf>,
    },
    /// Render plot-ready CSVs from a run directory.
    Report {
        run: PathBuf,
        /// Output directory; defaults to `<run>/csv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_toml<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
    }
}

fn domain_params(preset: &str) -> Result<DomainParams> {
    if let Ok(p) = DomainParams::preset(preset) {
        return Ok(p);
    }
    let text = fs::read_to_string(preset).with_context(|| format!("{preset:?} is neither a preset nor a readable file"))?;
    Ok(serde_json::from_str(&text)?)
}

/// PNG files from the given paths, expanding directories, in sorted order.
fn png_files(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)?
                .map(|e| e.map(|e| e.path()))
                .collect::<std::io::Result<_>>()?;
            found.retain(|f| f.extension().is_some_and(|e| e == "png"));
            found.sort();
            out.extend(found);
        } else {
            out.push(p.clone());
        }
    }
    if out.is_empty() {
        bail!("no PNG images found");
    }
    Ok(out)
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Images of `dir` with the centroids of the sibling CSV.
fn labelled_images(dir: &Path, mpp: f64) -> Result<Vec<(String, RgbImage, CentroidSet)>> {
    png_files(&[dir.to_path_buf()])?
        .into_iter()
        .map(|p| {
            let img = RgbImage::load_png(&p)?;
            let csv = p.with_extension("csv");
            let cs = CentroidSet::load_csv(&csv, img.width(), img.height(), mpp)
                .with_context(|| format!("ground truth {}", csv.display()))?;
            Ok((stem(&p), img, cs))
        })
        .collect()
}

/// A dataset directory written by `gen-ss`, or PNGs with centroid CSVs.
fn load_patches(dir: &Path) -> Result<Vec<LabeledPatch>> {
    if dir.join("manifest.json").exists() {
        return Ok(load_dataset(dir)?.1);
    }
    if !dir.is_dir() {
        return Err(ki67::Error::DatasetMissing(dir.to_path_buf()).into());
    }
    labelled_images(dir, DEFAULT_MICRONS_PER_PIXEL)?
        .into_iter()
        .map(|(_, image, cs)| Ok(LabeledPatch { image, label: centroids_to_heatmap(&cs, DEFAULT_SIGMA_PX)? }))
        .collect()
}

fn read_pairs(path: &Path) -> Result<Vec<(String, String)>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    r.records().map(|rec| {
        let rec = rec?;
        if rec.len() < 2 {
            bail!("{}: expected two columns", path.display());
        }
        Ok((rec[0].trim().to_string(), rec[1].trim().to_string()))
    })
    .collect()
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Synth { preset, kind, size, pi, count, seed, out } => {
            let params = domain_params(&preset)?;
            let frame = match kind {
                FrameKind::Patch => FrameSpec { width: size.unwrap_or(256), height: size.unwrap_or(256), ..FrameSpec::patch() },
                FrameKind::Tma => FrameSpec::tma(size.unwrap_or(ki67::synth::TMA_SIZE)),
            };
            fs::create_dir_all(&out)?;
            let mut truth = Vec::new();
            for i in 0..count {
                let s = ki67::rng::derive_seed(seed, &format!("cli/synth/{i}"));
                let (img, gt) = gen_image(&params, &frame, pi, s)?;
                img.save_png(out.join(format!("{i:04}.png")))?;
                gt.centroids.save_csv(out.join(format!("{i:04}.csv")))?;
                truth.push(serde_json::json!({
                    "image": format!("{i:04}.png"),
                    "seed": s,
                    "true_pi": gt.true_pi,
                    "artifact": gt.artifact,
                    "tissue_fraction": gt.tissue_fraction,
                }));
            }
            fs::write(out.join("truth.json"), serde_json::to_vec_pretty(&truth)?)?;
            println!("wrote {count} images to {}", out.display());
        }
        Command::IhcchDetect { image, out, config, mpp, overlay: overlay_path } => {
            let cfg: IhcchConfig = load_toml(config.as_deref())?;
            let img = RgbImage::load_png(&image)?;
            let cs = ihcch_pipeline(&img, &cfg, mpp).with_context(|| format!("IHCCH on {}", image.display()))?;
            cs.save_csv(&out)?;
            if let Some(p) = overlay_path {
                overlay(&img, &cs).save_png(p)?;
            }
            match pi_from_detections(&cs) {
                Ok(s) => println!("{} nuclei, PI {:.2}", cs.len(), s.value),
                Err(_) => println!("no nuclei detected"),
            }
        }
        Command::GenSs { images, increment, seed, config, mpp, out } => {
            let cfg: IhcchConfig = load_toml(config.as_deref())?;
            let named: Vec<(String, RgbImage)> = png_files(&images)?
                .iter()
                .map(|p| Ok((stem(p), RgbImage::load_png(p)?)))
                .collect::<Result<_>>()?;
            let spec = SsDatasetSpec::new(increment, seed);
            let samples = build_ss_dataset(&named, &cfg, &spec, mpp)?;
            let manifest = DatasetManifest {
                spec: Some(spec.clone()),
                ihcch_config_hash: Some(cfg.hash()),
                sigma_px: spec.sigma_px,
                microns_per_pixel: mpp,
                patch_count: samples.len(),
                origins: samples.iter().map(|s| s.origin.clone()).collect(),
            };
            let patches: Vec<LabeledPatch> = samples.iter().map(|s| s.patch.clone()).collect();
            save_dataset(&out, &patches, &manifest)?;
            for (i, s) in samples.iter().enumerate() {
                s.centroids.save_csv(out.join("patches").join(format!("{i:04}.csv")))?;
            }
            println!("wrote {} SS patches to {}", samples.len(), out.display());
        }
        Command::Train { regime, gs, ss, config, seed, out } => {
            let mut cfg: TrainConfig = load_toml(config.as_deref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let gs_data = gs.as_deref().map(load_patches).transpose().context("loading GS data")?;
            let ss_data = ss.as_deref().map(load_patches).transpose().context("loading SS data")?;
            let gs_refs: Option<Vec<&LabeledPatch>> = gs_data.as_ref().map(|d| d.iter().collect());
            let ss_refs: Option<Vec<&LabeledPatch>> = ss_data.as_ref().map(|d| d.iter().collect());
            let regime = Regime::new(regime, regime.uses_ss().then(|| ss_refs.as_ref().map_or(0, Vec::len)))?;
            let outcome = run_regime(&regime, gs_refs.as_deref(), ss_refs.as_deref(), &cfg)?;
            let mut parent = None;
            if outcome.stages.len() > 1 {
                let stage0 = out.with_extension("stage0.ckpt");
                let h = CheckpointHeader::new(cfg.seed, format!("{}/stage0", regime.id()), None);
                parent = Some(checkpoint::save(&stage0, &outcome.stages[0].model, &h)?);
            }
            let hash = checkpoint::save(&out, &outcome.model, &CheckpointHeader::new(cfg.seed, regime.id(), parent))?;
            for (i, st) in outcome.stages.iter().enumerate() {
                let best = st.best_epoch.map(|e| st.val_loss[e]);
                println!("stage {i}: kept epoch {:?}, val loss {:?}", st.best_epoch, best);
            }
            println!("{} {hash}", out.display());
        }
        Command::Evaluate { model, images, patients, expert, radius_um, threshold, mpp, out } => {
            let (m, header) = checkpoint::load(&model)?;
            let match_cfg = MatchConfig::new(radius_um, mpp)?;
            let mut evals = Vec::new();
            let mut per_tma = BTreeMap::new();
            for (id, img, gt) in labelled_images(&images, mpp)? {
                let pred = heatmap_to_centroids(&m.predict(&img, 256), threshold, 3.0 * DEFAULT_SIGMA_PX, mpp)?;
                evals.push(evaluate_image(&id, &pred, &gt, &match_cfg)?);
                per_tma.insert(id, pi_from_detections(&pred).ok());
            }
            let report = match (patients, expert) {
                (Some(p), Some(e)) => {
                    let patient_of: BTreeMap<String, String> = read_pairs(&p)?.into_iter().collect();
                    let expert_pi = read_pairs(&e)?
                        .into_iter()
                        .map(|(k, v)| Ok((k, v.parse::<f64>().with_context(|| format!("expert PI {v:?}"))?)))
                        .collect::<Result<BTreeMap<_, _>>>()?;
                    Some(patient_report(&per_tma, &patient_of, &expert_pi)?)
                }
                _ => None,
            };
            let f1s: Vec<f64> = evals.iter().map(|e| e.pooled.f1).collect();
            let summary = serde_json::json!({
                "model": header,
                "mean_f1": ki67::metrics::mean(&f1s),
                "sd_f1": ki67::metrics::sample_sd(&f1s),
                "images": evals,
                "tma_pi": per_tma,
                "patients": report,
            });
            fs::write(&out, serde_json::to_vec_pretty(&summary)?)?;
            println!("mean F1 {:.4} over {} images", ki67::metrics::mean(&f1s), f1s.len());
        }
        Command::Embed { model, source, target, perplexity, iterations, seed, out } => {
            let (m, _) = checkpoint::load(&model)?;
            let mut ids = Vec::new();
            let mut rows = Vec::new();
            let mut domains = Vec::new();
            for (dir, domain) in [(&source, Domain::Source), (&target, Domain::Target)] {
                for p in png_files(std::slice::from_ref(dir))? {
                    rows.push(feature_vector(&m, &RgbImage::load_png(&p)?));
                    ids.push(stem(&p));
                    domains.push(domain);
                }
            }
            let cfg = TsneConfig { perplexity, iterations, seed, ..TsneConfig::default() };
            let result = tsne(&rows, &cfg)?;
            let mut w = csv::Writer::from_path(&out)?;
            w.write_record(["id", "domain", "x", "y"])?;
            for ((id, d), p) in ids.iter().zip(&domains).zip(&result.embedding) {
                w.write_record([id.clone(), d.to_string(), p[0].to_string(), p[1].to_string()])?;
            }
            w.flush()?;
            println!(
                "overlap score {:.4}, final KL {:.4}",
                domain_overlap_score(&result.embedding, &domains)?,
                result.kl.last().copied().unwrap_or(f64::NAN)
            );
        }
        Command::Experiment { config, out, jobs, cache_dir } => {
            let text = fs::read_to_string(&config).with_context(|| format!("reading {}", config.display()))?;
            let cfg = ExperimentConfig::parse(&text).with_context(|| format!("{}", config.display()))?;
            let opts = RunOptions { jobs, cache_dir };
            let outcome = experiment::run_experiment(&cfg, &text, &out, &opts)?;
            for s in &outcome.report.regimes {
                println!(
                    "{:<12} target ΔPI {:.3}  target F1 {:.4}  source F1 {}",
                    s.regime,
                    s.target_delta_pi,
                    s.target_f1,
                    s.source_f1.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into())
                );
            }
            if !outcome.success() {
                for f in &outcome.report.failed {
                    eprintln!("failed cell {}: {}", f.cell, f.error);
                }
                return Ok(ExitCode::from(2));
            }
            println!("report: {}", out.join(experiment::REPORT_FILE).display());
        }
        Command::Report { run, out } => {
            let report = experiment::load_report(&run.join(experiment::REPORT_FILE))?;
            let dir = out.unwrap_or_else(|| run.join("csv"));
            for p in experiment::render_csvs(&report, &dir)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
