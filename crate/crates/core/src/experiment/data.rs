//! Per-seed synthetic data: gold-standard source patches, the unlabelled
//! target pool that feeds the SS labels, and the target evaluation cohort.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::ExperimentConfig;
use crate::centroid::CentroidSet;
use crate::error::{Error, Result, ResultExt};
use crate::image::RgbImage;
use crate::labels::{
    build_ss_dataset, centroids_to_heatmap, LabeledPatch, PatchOrigin, SsDatasetSpec, SsSample, DEFAULT_SIGMA_PX,
};
use crate::rng::{derive_seed, substream};
use crate::synth::{gen_image, gen_patch, DomainParams, FrameSpec};

const CACHE_VERSION: &str = "ki67-data-v1";

/// An image with point labels, the unit every dataset here is made of.
#[derive(Clone, Debug, PartialEq)]
pub struct Item {
    pub id: String,
    pub image: RgbImage,
    pub centroids: CentroidSet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortEntry {
    pub id: String,
    pub patient: String,
    /// Planted PI of the core.
    pub true_pi: f64,
}

#[derive(Clone, Debug)]
pub struct SeedData {
    pub gs: Vec<Item>,
    pub gs_patches: Vec<LabeledPatch>,
    /// IHCCH-labelled target patches; smaller increments are prefixes.
    pub ss: Vec<SsSample>,
    pub cohort: Vec<Item>,
    pub cohort_meta: Vec<CohortEntry>,
    /// Patient PI as the expert would give it: mean of the planted core PIs.
    pub expert_pi: BTreeMap<String, f64>,
    pub hashes: BTreeMap<String, String>,
}

impl SeedData {
    pub fn ss_patches(&self, increment: usize) -> Vec<&LabeledPatch> {
        self.ss.iter().take(increment).map(|s| &s.patch).collect()
    }

    pub fn patient_of(&self) -> BTreeMap<String, String> {
        self.cohort_meta.iter().map(|e| (e.id.clone(), e.patient.clone())).collect()
    }
}

fn uniform_pi(cfg: &ExperimentConfig, rng: &mut crate::rng::Rng) -> f64 {
    let [lo, hi] = cfg.data.pi_range;
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

/// Hash over image bytes and centroid coordinates of a dataset.
pub fn items_hash(items: &[Item]) -> String {
    let mut h = Sha256::new();
    for it in items {
        h.update(it.id.as_bytes());
        h.update((it.image.width() as u64).to_le_bytes());
        h.update((it.image.height() as u64).to_le_bytes());
        h.update(it.image.data());
        for c in it.centroids.centroids() {
            h.update(c.x.to_le_bytes());
            h.update(c.y.to_le_bytes());
            h.update([c.class.channel() as u8]);
        }
    }
    hex::encode(h.finalize())
}

fn gen_gs(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<Item>> {
    let params = DomainParams::preset(&cfg.data.source_preset)?;
    let mut rng = substream(seed, "experiment/gs-pi");
    (0..cfg.data.gs_patches)
        .map(|i| {
            let pi = uniform_pi(cfg, &mut rng);
            let (image, gt) = gen_patch(&params, pi, derive_seed(seed, &format!("experiment/gs/{i}")))?;
            Ok(Item { id: format!("gs-{i:04}"), image, centroids: gt.centroids })
        })
        .collect()
}

fn gen_pool(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<(String, RgbImage)>> {
    let params = DomainParams::preset(&cfg.data.target_preset)?;
    let frame = FrameSpec::tma(cfg.data.pool_tma_size);
    let mut rng = substream(seed, "experiment/pool-pi");
    (0..cfg.data.pool_tmas)
        .map(|i| {
            let pi = uniform_pi(cfg, &mut rng);
            let (img, _) = gen_image(&params, &frame, pi, derive_seed(seed, &format!("experiment/pool/{i}")))?;
            Ok((format!("pool-{i:02}"), img))
        })
        .collect()
}

fn gen_cohort(cfg: &ExperimentConfig, seed: u64) -> Result<(Vec<Item>, Vec<CohortEntry>)> {
    let params = DomainParams::preset(&cfg.data.target_preset)?;
    let frame = FrameSpec::tma(cfg.data.cohort_tma_size);
    let mut rng = substream(seed, "experiment/cohort");
    let mut items = Vec::new();
    let mut meta = Vec::new();
    for p in 0..cfg.data.cohort_patients {
        let patient = format!("P{p:03}");
        let pi = uniform_pi(cfg, &mut rng);
        let cores = rng.gen_range(1..=cfg.data.max_tmas_per_patient);
        for t in 0..cores {
            let id = format!("{patient}-T{t}");
            let (image, gt) = gen_image(&params, &frame, pi, derive_seed(seed, &format!("experiment/cohort/{id}")))?;
            meta.push(CohortEntry { id: id.clone(), patient: patient.clone(), true_pi: gt.true_pi.value });
            items.push(Item { id, image, centroids: gt.centroids });
        }
    }
    Ok((items, meta))
}

/// Target-domain patches used only as the target half of the embeddings.
pub fn embed_target_patches(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<RgbImage>> {
    let params = DomainParams::preset(&cfg.data.target_preset)?;
    let mut rng = substream(seed, "experiment/embed-pi");
    (0..cfg.embed.target_patches)
        .map(|i| {
            let pi = uniform_pi(cfg, &mut rng);
            Ok(gen_patch(&params, pi, derive_seed(seed, &format!("experiment/embed/{i}")))?.0)
        })
        .collect()
}

fn to_patches(items: &[Item], sigma_px: f64) -> Result<Vec<LabeledPatch>> {
    items
        .iter()
        .map(|it| Ok(LabeledPatch { image: it.image.clone(), label: centroids_to_heatmap(&it.centroids, sigma_px)? }))
        .collect()
}

#[derive(Serialize, Deserialize)]
struct CacheIndex {
    ids: Vec<String>,
    microns_per_pixel: f64,
}

fn save_items(dir: &Path, items: &[Item]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, it) in items.iter().enumerate() {
        it.image.save_png(dir.join(format!("{i:04}.png")))?;
        it.centroids.save_csv(dir.join(format!("{i:04}.csv")))?;
    }
    let mpp = items.first().map(|i| i.centroids.microns_per_pixel()).unwrap_or(crate::DEFAULT_MICRONS_PER_PIXEL);
    let index = CacheIndex { ids: items.iter().map(|i| i.id.clone()).collect(), microns_per_pixel: mpp };
    fs::write(dir.join("index.json"), serde_json::to_vec(&index)?)?;
    Ok(())
}

fn load_items(dir: &Path) -> Result<Vec<Item>> {
    let index_path = dir.join("index.json");
    if !index_path.exists() {
        return Err(Error::DatasetMissing(dir.to_path_buf()));
    }
    let index: CacheIndex = serde_json::from_slice(&fs::read(&index_path)?)?;
    index
        .ids
        .into_iter()
        .enumerate()
        .map(|(i, id)| {
            let image = RgbImage::load_png(dir.join(format!("{i:04}.png")))?;
            let centroids = CentroidSet::load_csv(
                dir.join(format!("{i:04}.csv")),
                image.width(),
                image.height(),
                index.microns_per_pixel,
            )?;
            Ok(Item { id, image, centroids })
        })
        .collect()
}

fn max_increment(cfg: &ExperimentConfig) -> Option<usize> {
    if cfg.run.regimes.iter().any(|r| r.uses_ss()) {
        cfg.run.ss_increments.iter().copied().max()
    } else {
        None
    }
}

/// Cache directory of one seed's data; the key covers everything that
/// shapes the generated data.
pub fn cache_key(cfg: &ExperimentConfig, seed: u64) -> String {
    let key = serde_json::json!({
        "version": CACHE_VERSION,
        "seed": seed,
        "data": cfg.data,
        "source": DomainParams::preset(&cfg.data.source_preset).ok(),
        "target": DomainParams::preset(&cfg.data.target_preset).ok(),
        "ihcch": cfg.ihcch.hash(),
        "ss": max_increment(cfg),
    });
    hex::encode(Sha256::digest(key.to_string().as_bytes()))[..16].to_string()
}

/// Generates (or loads from `cache`) the data of one root seed.
pub fn prepare(cfg: &ExperimentConfig, seed: u64, cache: Option<&Path>) -> Result<SeedData> {
    let dir: Option<PathBuf> = cache.map(|c| c.join(cache_key(cfg, seed)));
    let cached = |name: &str| -> Option<Vec<Item>> {
        let d = dir.as_ref()?.join(name);
        match load_items(&d) {
            Ok(items) => Some(items),
            Err(Error::DatasetMissing(_)) => None,
            Err(e) => {
                log::warn!("ignoring unreadable cache {}: {e}", d.display());
                None
            }
        }
    };
    let store = |name: &str, items: &[Item]| -> Result<()> {
        if let Some(d) = &dir {
            // write to a scratch dir first so a half-written cache is never read
            let tmp = d.join(format!("{name}.partial"));
            let _ = fs::remove_dir_all(&tmp);
            save_items(&tmp, items).context(format!("writing cache {}", tmp.display()))?;
            let _ = fs::remove_dir_all(d.join(name));
            fs::rename(&tmp, d.join(name))?;
        }
        Ok(())
    };

    let gs = match cached("gs") {
        Some(items) => items,
        None => {
            let items = gen_gs(cfg, seed)?;
            store("gs", &items)?;
            items
        }
    };

    let mut ss = Vec::new();
    if let Some(inc) = max_increment(cfg) {
        let ss_items = match cached("ss") {
            Some(items) => items,
            None => {
                let pool = gen_pool(cfg, seed)?;
                let spec = SsDatasetSpec {
                    tumor_fraction_min: cfg.data.tissue_fraction_min,
                    ..SsDatasetSpec::new(inc, derive_seed(seed, "experiment/ss"))
                };
                let mpp = DomainParams::preset(&cfg.data.target_preset)?.microns_per_pixel;
                let samples = build_ss_dataset(&pool, &cfg.ihcch, &spec, mpp)?;
                let items: Vec<Item> = samples
                    .into_iter()
                    .map(|s| Item {
                        id: format!("{}@{},{}", s.origin.image_id, s.origin.offset.0, s.origin.offset.1),
                        image: s.patch.image,
                        centroids: s.centroids,
                    })
                    .collect();
                store("ss", &items)?;
                items
            }
        };
        for it in ss_items {
            let label = centroids_to_heatmap(&it.centroids, DEFAULT_SIGMA_PX)?;
            let (image_id, off) = it.id.split_once('@').unwrap_or((it.id.as_str(), "0,0"));
            let (x, y) = off.split_once(',').unwrap_or(("0", "0"));
            let origin = PatchOrigin {
                image_id: image_id.to_string(),
                offset: (x.parse().unwrap_or(0), y.parse().unwrap_or(0)),
            };
            ss.push(SsSample { patch: LabeledPatch { image: it.image, label }, centroids: it.centroids, origin });
        }
    }

    let (cohort, cohort_meta) = match (cached("cohort"), dir.as_ref().map(|d| d.join("cohort.json"))) {
        (Some(items), Some(meta_path)) if meta_path.exists() => {
            (items, serde_json::from_slice(&fs::read(meta_path)?)?)
        }
        _ => {
            let (items, meta) = gen_cohort(cfg, seed)?;
            store("cohort", &items)?;
            if let Some(d) = &dir {
                fs::write(d.join("cohort.json"), serde_json::to_vec(&meta)?)?;
            }
            (items, meta)
        }
    };

    let mut per_patient: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for e in &cohort_meta {
        per_patient.entry(e.patient.clone()).or_default().push(e.true_pi);
    }
    let expert_pi = per_patient.into_iter().map(|(p, v)| (p, crate::metrics::mean(&v))).collect();

    let ss_items: Vec<Item> = ss
        .iter()
        .map(|s| Item { id: s.origin.image_id.clone(), image: s.patch.image.clone(), centroids: s.centroids.clone() })
        .collect();
    let mut hashes = BTreeMap::new();
    hashes.insert("gs".to_string(), items_hash(&gs));
    if !ss.is_empty() {
        hashes.insert("ss".to_string(), items_hash(&ss_items));
    }
    hashes.insert("cohort".to_string(), items_hash(&cohort));

    let gs_patches = to_patches(&gs, DEFAULT_SIGMA_PX)?;
    Ok(SeedData { gs, gs_patches, ss, cohort, cohort_meta, expert_pi, hashes })
}
