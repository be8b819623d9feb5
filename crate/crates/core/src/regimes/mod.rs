//! The trainable detector, its loss and optimizer, and the five training
//! regimes combining gold-standard source labels with silver-standard
//! target labels under k-fold cross-validation.

mod adam;
mod augment;
pub mod checkpoint;
mod loss;
mod net;
mod train;

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::LabeledPatch;
use crate::rng::{derive_seed, substream};

pub use adam::{adam_step, AdamConfig, AdamState};
pub use augment::{augment, augment_random, rgb_planes, warp_window, Transform, SCALE_RANGE};
pub use loss::{huber_loss, huber_loss_into};
pub use net::{
    image_to_planar, random_model, Conv, ForwardCache, MiniDetector, ARCHITECTURE, FEATURE_CHANNELS, LAYERS,
    PARAM_COUNT, RECEPTIVE_RADIUS,
};
pub use train::{batch_gradient, train, TrainConfig, TrainOutcome};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RegimeKind {
    #[serde(rename = "gs")]
    GsOnly,
    #[serde(rename = "ss")]
    SsOnly,
    #[serde(rename = "mixed")]
    Mixed,
    /// Train on gold labels, fine-tune on silver.
    #[serde(rename = "gs+ss")]
    GsThenSs,
    /// Train on silver labels, fine-tune on gold.
    #[serde(rename = "ss+gs")]
    SsThenGs,
}

impl RegimeKind {
    pub const ALL: [RegimeKind; 5] =
        [RegimeKind::SsOnly, RegimeKind::GsOnly, RegimeKind::Mixed, RegimeKind::GsThenSs, RegimeKind::SsThenGs];

    pub fn name(self) -> &'static str {
        match self {
            RegimeKind::GsOnly => "gs",
            RegimeKind::SsOnly => "ss",
            RegimeKind::Mixed => "mixed",
            RegimeKind::GsThenSs => "gs+ss",
            RegimeKind::SsThenGs => "ss+gs",
        }
    }

    pub fn uses_ss(self) -> bool {
        self != RegimeKind::GsOnly
    }

    pub fn uses_gs(self) -> bool {
        self != RegimeKind::SsOnly
    }
}

impl fmt::Display for RegimeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RegimeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gs" | "gs-only" | "gs_only" => Ok(RegimeKind::GsOnly),
            "ss" | "ss-only" | "ss_only" => Ok(RegimeKind::SsOnly),
            "mixed" | "ss&gs" => Ok(RegimeKind::Mixed),
            "gs+ss" | "gs-then-ss" => Ok(RegimeKind::GsThenSs),
            "ss+gs" | "ss-then-gs" => Ok(RegimeKind::SsThenGs),
            other => Err(Error::InvalidArgument(format!("unknown regime '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Regime {
    pub kind: RegimeKind,
    pub ss_increment: Option<usize>,
}

impl Regime {
    pub fn new(kind: RegimeKind, ss_increment: Option<usize>) -> Result<Self> {
        let r = Self { kind, ss_increment };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        match (self.kind.uses_ss(), self.ss_increment) {
            (true, None) => Err(Error::InvalidArgument(format!("regime {} needs an SS increment", self.kind))),
            (false, Some(_)) => Err(Error::InvalidArgument("gs regime takes no SS increment".into())),
            _ => Ok(()),
        }
    }

    /// Short identifier such as `ss+gs@100`.
    pub fn id(&self) -> String {
        match self.ss_increment {
            Some(k) => format!("{}@{k}", self.kind),
            None => self.kind.to_string(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct RegimeOutcome {
    pub model: MiniDetector<f32>,
    /// One entry per training stage, in order.
    pub stages: Vec<TrainOutcome>,
}

fn require<'a>(
    data: Option<&'a [&'a LabeledPatch]>,
    regime: &Regime,
    missing: &'static str,
) -> Result<&'a [&'a LabeledPatch]> {
    match data {
        Some(d) if !d.is_empty() => Ok(d),
        _ => Err(Error::MissingDataset { regime: regime.id(), missing }),
    }
}

/// Initial weights for a run with this configuration.
pub fn initial_model(cfg: &TrainConfig) -> MiniDetector<f32> {
    MiniDetector::init(&mut substream(cfg.seed, "regimes/init"))
}

/// The first training stage of a regime. It depends only on the stage's
/// own data, so runs that share it (SS-only and SS+GS, say) can reuse it.
pub fn first_stage(
    regime: &Regime,
    gs: Option<&[&LabeledPatch]>,
    ss: Option<&[&LabeledPatch]>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    regime.validate()?;
    cfg.validate()?;
    let init = initial_model(cfg);
    match regime.kind {
        RegimeKind::GsOnly | RegimeKind::GsThenSs => train(init, require(gs, regime, "gs")?, cfg, cfg.epochs),
        RegimeKind::SsOnly | RegimeKind::SsThenGs => train(init, require(ss, regime, "ss")?, cfg, cfg.epochs),
        RegimeKind::Mixed => {
            let gs = require(gs, regime, "gs")?;
            let ss = require(ss, regime, "ss")?;
            let mut pool: Vec<&LabeledPatch> = gs.iter().chain(ss).copied().collect();
            pool.shuffle(&mut substream(cfg.seed, "regimes/mixed"));
            train(init, &pool, cfg, cfg.epochs)
        }
    }
}

/// Completes a regime from its first stage: two-stage regimes fine-tune
/// with a fresh optimizer and the same learning rate.
pub fn finish_regime(
    regime: &Regime,
    first: TrainOutcome,
    gs: Option<&[&LabeledPatch]>,
    ss: Option<&[&LabeledPatch]>,
    cfg: &TrainConfig,
) -> Result<RegimeOutcome> {
    let second_data = match regime.kind {
        RegimeKind::GsThenSs => Some(require(ss, regime, "ss")?),
        RegimeKind::SsThenGs => Some(require(gs, regime, "gs")?),
        _ => None,
    };
    let Some(data) = second_data else {
        return Ok(RegimeOutcome { model: first.model.clone(), stages: vec![first] });
    };
    let stage_cfg = TrainConfig { seed: derive_seed(cfg.seed, "regimes/finetune"), ..cfg.clone() };
    let epochs = cfg.finetune_epochs.unwrap_or(cfg.epochs);
    let second = train(first.model.clone(), data, &stage_cfg, epochs)?;
    Ok(RegimeOutcome { model: second.model.clone(), stages: vec![first, second] })
}

pub fn run_regime(
    regime: &Regime,
    gs: Option<&[&LabeledPatch]>,
    ss: Option<&[&LabeledPatch]>,
    cfg: &TrainConfig,
) -> Result<RegimeOutcome> {
    // check every dataset up front so a missing one fails before training
    if regime.kind.uses_gs() {
        require(gs, regime, "gs")?;
    }
    if regime.kind.uses_ss() {
        require(ss, regime, "ss")?;
    }
    let first = first_stage(regime, gs, ss, cfg)?;
    finish_regime(regime, first, gs, ss, cfg)
}

/// Seeded partition of `0..n` into `folds` subsets whose sizes differ by at most one.
pub fn cv_partition(n: usize, folds: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if folds == 0 || n < folds {
        return Err(Error::TooFewSamples { samples: n, folds });
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut substream(seed, "regimes/folds"));
    let (base, extra) = (n / folds, n % folds);
    let mut out = Vec::with_capacity(folds);
    let mut start = 0;
    for f in 0..folds {
        let len = base + usize::from(f < extra);
        let mut part = idx[start..start + len].to_vec();
        part.sort_unstable();
        out.push(part);
        start += len;
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct FoldResult<M> {
    pub fold: usize,
    pub train: Vec<usize>,
    pub held_out: Vec<usize>,
    pub result: M,
}

/// Runs `runner(fold, train indices, held-out indices)` for each fold.
/// With a single fold the whole set trains and nothing is held out.
pub fn cross_validate<M>(
    n: usize,
    folds: usize,
    seed: u64,
    mut runner: impl FnMut(usize, &[usize], &[usize]) -> Result<M>,
) -> Result<Vec<FoldResult<M>>> {
    if folds == 1 {
        if n == 0 {
            return Err(Error::TooFewSamples { samples: n, folds });
        }
        let all: Vec<usize> = (0..n).collect();
        let result = runner(0, &all, &[])?;
        return Ok(vec![FoldResult { fold: 0, train: all, held_out: Vec::new(), result }]);
    }
    let parts = cv_partition(n, folds, seed)?;
    let mut out = Vec::with_capacity(folds);
    for (f, held) in parts.iter().enumerate() {
        let train: Vec<usize> = parts.iter().enumerate().filter(|(g, _)| *g != f).flat_map(|(_, p)| p.clone()).collect();
        let mut train = train;
        train.sort_unstable();
        let result = runner(f, &train, held)?;
        out.push(FoldResult { fold: f, train, held_out: held.clone(), result });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partition_sizes_and_disjointness() {
        let parts = cv_partition(510, 3, 1).unwrap();
        assert_eq!(parts.iter().map(Vec::len).collect::<Vec<_>>(), vec![170, 170, 170]);
        let mut all: Vec<usize> = parts.concat();
        all.sort_unstable();
        assert_eq!(all, (0..510).collect::<Vec<_>>());
        let parts = cv_partition(10, 3, 1).unwrap();
        assert_eq!(parts.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 3, 3]);
        assert!(matches!(cv_partition(2, 3, 0), Err(Error::TooFewSamples { samples: 2, folds: 3 })));
    }

    #[test]
    fn cross_validate_pools() {
        let r = cross_validate(510, 3, 7, |_, train, held| Ok((train.len(), held.len()))).unwrap();
        assert!(r.iter().all(|f| f.result == (340, 170)));
    }

    #[test]
    fn regime_names_round_trip() {
        for k in RegimeKind::ALL {
            assert_eq!(k.name().parse::<RegimeKind>().unwrap(), k);
        }
        assert!(Regime::new(RegimeKind::SsThenGs, None).is_err());
        assert_eq!(Regime::new(RegimeKind::SsThenGs, Some(100)).unwrap().id(), "ss+gs@100");
    }

    #[test]
    fn missing_dataset() {
        let r = Regime::new(RegimeKind::SsThenGs, Some(100)).unwrap();
        let err = run_regime(&r, None, None, &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, Error::MissingDataset { .. }));
    }
}
