use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embed::TsneConfig;
use crate::error::{Error, Result};
use crate::ihcch::IhcchConfig;
use crate::regimes::{RegimeKind, TrainConfig};

/// Experiment description, read from TOML. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run: RunSection,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub embed: EmbedSection,
    #[serde(default)]
    pub ihcch: IhcchConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    #[serde(default = "default_name")]
    pub name: String,
    pub root_seeds: Vec<u64>,
    pub regimes: Vec<RegimeKind>,
    #[serde(default)]
    pub ss_increments: Vec<usize>,
}

fn default_name() -> String {
    "experiment".to_string()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub source_preset: String,
    pub target_preset: String,
    /// Gold-standard source patches generated per root seed.
    pub gs_patches: usize,
    /// Planted PIs are drawn uniformly from this range.
    pub pi_range: [f64; 2],
    /// Unlabelled target TMAs tiled into the silver-standard pool.
    pub pool_tmas: usize,
    pub pool_tma_size: usize,
    pub tissue_fraction_min: f64,
    pub cohort_patients: usize,
    pub cohort_tma_size: usize,
    pub max_tmas_per_patient: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            source_preset: "source".into(),
            target_preset: "target".into(),
            gs_patches: 300,
            pi_range: [0.0, 60.0],
            pool_tmas: 5,
            pool_tma_size: 2000,
            tissue_fraction_min: crate::labels::DEFAULT_TISSUE_FRACTION_MIN,
            cohort_patients: 10,
            cohort_tma_size: 768,
            max_tmas_per_patient: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub match_radius_um: f64,
    pub peak_threshold: f32,
    pub min_separation_px: f64,
    /// Tile side used when running the detector over whole TMAs.
    pub predict_tile: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            match_radius_um: crate::metrics::DEFAULT_MATCH_RADIUS_UM,
            peak_threshold: crate::labels::DEFAULT_PEAK_THRESHOLD,
            min_separation_px: 3.0 * crate::labels::DEFAULT_SIGMA_PX,
            predict_tile: 256,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedSection {
    pub enabled: bool,
    pub source_patches: usize,
    pub target_patches: usize,
    pub perplexity: f64,
    pub iterations: usize,
}

impl Default for EmbedSection {
    fn default() -> Self {
        let t = TsneConfig::default();
        Self { enabled: true, source_patches: 40, target_patches: 40, perplexity: t.perplexity, iterations: t.iterations }
    }
}

/// 1-based line of byte offset `pos` in `text`.
fn line_at(text: &str, pos: usize) -> usize {
    text[..pos.min(text.len())].matches('\n').count() + 1
}

/// Line of `key = ...` inside `[section]`, else of the section header.
fn line_of_key(text: &str, section: &str, key: &str) -> Option<usize> {
    let mut current = String::new();
    let mut header = None;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.starts_with('[') && line.ends_with(']') {
            current = line.trim_matches(|c| c == '[' || c == ']').trim().to_string();
            if current == section {
                header = Some(i + 1);
            }
            continue;
        }
        let name = line.split('=').next().unwrap_or("").trim();
        if current == section && name == key {
            return Some(i + 1);
        }
    }
    header
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config {
            line: e.span().map(|s| line_at(text, s.start)).unwrap_or(0),
            message: e.message().to_string(),
        })?;
        cfg.validate().map_err(|(section, key, message)| Error::Config {
            line: line_of_key(text, section, key).unwrap_or(0),
            message: format!("{section}.{key}: {message}"),
        })?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::from(e).context(path.display().to_string()))?;
        Self::parse(&text)
    }

    /// Semantic checks; the error names the offending section and key.
    pub fn validate(&self) -> std::result::Result<(), (&'static str, &'static str, String)> {
        let fail = |s, k, m: &str| Err((s, k, m.to_string()));
        if self.run.root_seeds.is_empty() {
            return fail("run", "root_seeds", "at least one seed required");
        }
        if self.run.regimes.is_empty() {
            return fail("run", "regimes", "at least one regime required");
        }
        let needs_ss = self.run.regimes.iter().any(|r| r.uses_ss());
        if needs_ss && self.run.ss_increments.is_empty() {
            return fail("run", "ss_increments", "regimes using SS labels need at least one increment");
        }
        if self.run.ss_increments.contains(&0) {
            return fail("run", "ss_increments", "increments must be positive");
        }
        for (key, ok) in [
            ("learning_rate", self.train.learning_rate > 0.0),
            ("batch_size", self.train.batch_size > 0),
            ("epochs", self.train.epochs > 0),
            ("folds", self.train.folds > 0),
            ("validation_fraction", (0.0..1.0).contains(&self.train.validation_fraction)),
            ("huber_delta", self.train.huber_delta > 0.0),
        ] {
            if !ok {
                return fail("train", key, "value out of range");
            }
        }
        if self.data.gs_patches < self.train.folds {
            return fail("data", "gs_patches", "fewer patches than folds");
        }
        let [lo, hi] = self.data.pi_range;
        if !(0.0 <= lo && lo <= hi && hi <= 100.0) {
            return fail("data", "pi_range", "must satisfy 0 <= lo <= hi <= 100");
        }
        if !(self.data.tissue_fraction_min > 0.0 && self.data.tissue_fraction_min <= 1.0) {
            return fail("data", "tissue_fraction_min", "must be in (0, 1]");
        }
        if self.data.cohort_patients == 0 {
            return fail("data", "cohort_patients", "at least one patient required");
        }
        if self.data.max_tmas_per_patient == 0 {
            return fail("data", "max_tmas_per_patient", "must be at least 1");
        }
        if self.data.cohort_tma_size < 64 || self.data.pool_tma_size < crate::synth::PATCH_SIZE {
            return fail("data", "cohort_tma_size", "TMAs too small");
        }
        for (key, preset) in [("source_preset", &self.data.source_preset), ("target_preset", &self.data.target_preset)] {
            if crate::synth::DomainParams::preset(preset).is_err() {
                return fail("data", key, "unknown preset");
            }
        }
        if !(self.eval.match_radius_um > 0.0) {
            return fail("eval", "match_radius_um", "must be positive");
        }
        if !(self.eval.peak_threshold > 0.0 && self.eval.peak_threshold < 1.0) {
            return fail("eval", "peak_threshold", "must be in (0, 1)");
        }
        if self.eval.predict_tile == 0 {
            return fail("eval", "predict_tile", "must be positive");
        }
        if self.embed.enabled && self.embed.iterations < 250 {
            return fail("embed", "iterations", "t-SNE needs at least 250 iterations");
        }
        if let Err(e) = self.ihcch.validate() {
            return Err(("ihcch", "median_window", e.to_string()));
        }
        Ok(())
    }

    /// Content hash of the canonical JSON form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }

    pub fn tsne(&self, seed: u64) -> TsneConfig {
        TsneConfig { perplexity: self.embed.perplexity, iterations: self.embed.iterations, seed, ..TsneConfig::default() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[run]
root_seeds = [1]
regimes = ["gs"]

[train]
epochs = 2
folds = 1
"#;

    #[test]
    fn minimal_config_parses() {
        let cfg = ExperimentConfig::parse(MINIMAL).unwrap();
        assert_eq!(cfg.run.regimes, vec![RegimeKind::GsOnly]);
        assert_eq!(cfg.train.epochs, 2);
        assert_eq!(cfg.data, DataSection::default());
    }

    #[test]
    fn unknown_key_reports_line() {
        let text = MINIMAL.replace("epochs = 2", "epochs = 2\nepochz = 3");
        match ExperimentConfig::parse(&text) {
            Err(Error::Config { line, message }) => {
                assert_eq!(line, 8);
                assert!(message.contains("epochz"), "{message}");
            }
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn bad_value_reports_line() {
        let text = MINIMAL.replace("epochs = 2", "epochs = 0");
        match ExperimentConfig::parse(&text) {
            Err(Error::Config { line, message }) => {
                assert_eq!(line, 7);
                assert!(message.contains("train.epochs"));
            }
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn ss_regime_needs_increment() {
        let text = MINIMAL.replace(r#"regimes = ["gs"]"#, r#"regimes = ["ss+gs"]"#);
        assert!(matches!(ExperimentConfig::parse(&text), Err(Error::Config { line: 2, .. })));
    }
}
