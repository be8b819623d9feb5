//! Evaluation protocol: radius-based centroid matching, F1, proliferation
//! index error at image and patient level, pairwise ANOVA and cross-fold
//! reproducibility.

mod matching;
mod stats;

use std::collections::BTreeMap;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::centroid::{CellClass, CentroidSet};
use crate::error::{Error, Result};
use crate::pi::{compute_pi, delta_pi, PiScore};

pub use matching::{
    assign_within_radius, hungarian, match_centroids, match_class, MatchConfig, MatchResult, DEFAULT_MATCH_RADIUS_UM,
};
pub use stats::{
    f_sf, inc_beta, ln_gamma, mean, one_way_anova, repeated_measures_anova, sample_sd, AnovaTable,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct F1Score {
    #[serde(deserialize_with = "crate::nan_serde::f64")]
    pub precision: f64,
    #[serde(deserialize_with = "crate::nan_serde::f64")]
    pub recall: f64,
    #[serde(deserialize_with = "crate::nan_serde::f64")]
    pub f1: f64,
}

pub fn f1(mr: &MatchResult) -> Result<F1Score> {
    f1_counts(mr.tp, mr.fp, mr.fn_)
}

pub fn f1_counts(tp: usize, fp: usize, fn_: usize) -> Result<F1Score> {
    if tp + fp + fn_ == 0 {
        return Err(Error::NoCells);
    }
    let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
    let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    Ok(F1Score { precision, recall, f1 })
}

pub fn pi_from_detections(cs: &CentroidSet) -> Result<PiScore> {
    compute_pi(cs.count(CellClass::Ki67Pos), cs.count(CellClass::Ki67Neg))
}

/// Detection quality of one image, per class and pooled over classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageEval {
    pub id: String,
    pub neg: Option<F1Score>,
    pub pos: Option<F1Score>,
    pub pooled: F1Score,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

/// Matches one image and scores it. `NoCells` when both sets are empty.
pub fn evaluate_image(id: &str, pred: &CentroidSet, gt: &CentroidSet, cfg: &MatchConfig) -> Result<ImageEval> {
    let mut per_class = [None, None];
    let mut pooled = MatchResult::default();
    for class in CellClass::ALL {
        if (pred.microns_per_pixel() - cfg.microns_per_pixel).abs() > 1e-12
            || (gt.microns_per_pixel() - cfg.microns_per_pixel).abs() > 1e-12
        {
            return Err(Error::CalibrationMismatch { pred: pred.microns_per_pixel(), gt: gt.microns_per_pixel() });
        }
        let m = match_class(pred, gt, class, cfg);
        per_class[class.channel()] = f1(&m).ok();
        pooled.merge(&m);
    }
    Ok(ImageEval {
        id: id.to_string(),
        neg: per_class[0],
        pos: per_class[1],
        pooled: f1(&pooled)?,
        tp: pooled.tp,
        fp: pooled.fp,
        fn_: pooled.fn_,
    })
}

/// Clinical PI intervals; the last bin closes the domain at 100.
pub const PI_BINS: [(f64, f64); 5] = [(0.0, 10.0), (10.0, 20.0), (20.0, 30.0), (30.0, 40.0), (40.0, 100.0)];

/// Index into [`PI_BINS`]: half-open intervals except the last, which includes 100.
pub fn pi_bin(pi: f64) -> usize {
    PI_BINS.iter().position(|&(lo, hi)| pi >= lo && pi < hi).unwrap_or(PI_BINS.len() - 1)
}

pub fn bin_label(bin: usize) -> String {
    let (lo, hi) = PI_BINS[bin];
    if bin + 1 == PI_BINS.len() {
        format!("[{lo},{hi}]")
    } else {
        format!("[{lo},{hi})")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientRow {
    pub patient: String,
    pub tmas: Vec<String>,
    #[serde(deserialize_with = "crate::nan_serde::f64")]
    pub pi_actual: f64,
    #[serde(deserialize_with = "crate::nan_serde::f64")]
    pub pi_predicted: f64,
    #[serde(deserialize_with = "crate::nan_serde::f64")]
    pub delta_pi: f64,
    pub bin: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinSummary {
    pub bin: String,
    pub patients: usize,
    pub mean_delta_pi: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientReport {
    pub patients: Vec<PatientRow>,
    pub bins: Vec<BinSummary>,
    #[serde(deserialize_with = "crate::nan_serde::f64")]
    pub mean_delta_pi: f64,
    #[serde(deserialize_with = "crate::nan_serde::f64")]
    pub sd_delta_pi: f64,
    /// TMAs without any detected cell; left out of patient means.
    pub excluded_tmas: Vec<String>,
    /// Patients whose every TMA was excluded.
    pub excluded_patients: Vec<String>,
}

/// Aggregates per-TMA PIs into patient PIs (unweighted mean) and compares
/// them with the expert estimates.
///
/// `per_tma` holds `None` for TMAs where no cell was detected.
pub fn patient_report(
    per_tma: &BTreeMap<String, Option<PiScore>>,
    patient_of: &BTreeMap<String, String>,
    expert_pi: &BTreeMap<String, f64>,
) -> Result<PatientReport> {
    let mut grouped: BTreeMap<&str, (Vec<String>, Vec<f64>)> = BTreeMap::new();
    let mut excluded_tmas = Vec::new();
    for (tma, score) in per_tma {
        let patient = patient_of.get(tma).ok_or_else(|| Error::UnknownPatient(tma.clone()))?;
        if !expert_pi.contains_key(patient) {
            return Err(Error::UnknownPatient(tma.clone()));
        }
        let entry = grouped.entry(patient.as_str()).or_default();
        entry.0.push(tma.clone());
        match score {
            Some(s) => entry.1.push(s.value),
            None => {
                warn!("TMA {tma} has no detected cells; excluded from patient {patient}");
                excluded_tmas.push(tma.clone());
            }
        }
    }
    let mut patients = Vec::new();
    let mut excluded_patients = Vec::new();
    for (patient, (tmas, pis)) in grouped {
        if pis.is_empty() {
            excluded_patients.push(patient.to_string());
            continue;
        }
        let actual = expert_pi[patient];
        let predicted = mean(&pis);
        let a = PiScore { value: actual, pos_count: 0, neg_count: 0 };
        let p = PiScore { value: predicted, pos_count: 0, neg_count: 0 };
        patients.push(PatientRow {
            patient: patient.to_string(),
            tmas,
            pi_actual: actual,
            pi_predicted: predicted,
            delta_pi: delta_pi(&a, &p),
            bin: bin_label(pi_bin(actual)),
        });
    }
    let bins = (0..PI_BINS.len())
        .map(|b| {
            let label = bin_label(b);
            let d: Vec<f64> = patients.iter().filter(|p| p.bin == label).map(|p| p.delta_pi).collect();
            BinSummary { bin: label, patients: d.len(), mean_delta_pi: (!d.is_empty()).then(|| mean(&d)) }
        })
        .collect();
    let deltas: Vec<f64> = patients.iter().map(|p| p.delta_pi).collect();
    Ok(PatientReport {
        mean_delta_pi: if deltas.is_empty() { f64::NAN } else { mean(&deltas) },
        sd_delta_pi: sample_sd(&deltas),
        patients,
        bins,
        excluded_tmas,
        excluded_patients,
    })
}

/// Sample standard deviation of each named metric across fold models
/// evaluated on the same data.
pub fn reproducibility<M>(
    models: &[M],
    mut evaluate: impl FnMut(&M) -> Result<BTreeMap<String, f64>>,
) -> Result<BTreeMap<String, f64>> {
    if models.len() < 2 {
        return Err(Error::InvalidArgument("reproducibility needs at least two fold models".into()));
    }
    let per_model: Vec<BTreeMap<String, f64>> = models.iter().map(&mut evaluate).collect::<Result<_>>()?;
    Ok(fold_sd(&per_model))
}

/// Per-metric sample standard deviation over already-computed fold metrics.
pub fn fold_sd(per_model: &[BTreeMap<String, f64>]) -> BTreeMap<String, f64> {
    let mut out = BTreeMap::new();
    if let Some(first) = per_model.first() {
        for key in first.keys() {
            let v: Vec<f64> = per_model.iter().filter_map(|m| m.get(key).copied()).collect();
            out.insert(key.clone(), sample_sd(&v));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f1_values() {
        assert_eq!(f1_counts(5, 0, 0).unwrap().f1, 1.0);
        let s = f1_counts(3, 1, 2).unwrap();
        assert!((s.precision - 0.75).abs() < 1e-12);
        assert!((s.recall - 0.6).abs() < 1e-12);
        assert!((s.f1 - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(f1_counts(0, 4, 7).unwrap().f1, 0.0);
        assert!(matches!(f1_counts(0, 0, 0), Err(Error::NoCells)));
    }

    #[test]
    fn pi_from_counts() {
        let mut cs = CentroidSet::new(100, 100, 0.5);
        for i in 0..100 {
            let class = if i < 25 { CellClass::Ki67Pos } else { CellClass::Ki67Neg };
            cs.push(crate::Centroid::new(i as f64 + 0.5, 50.0, class)).unwrap();
        }
        assert_eq!(pi_from_detections(&cs).unwrap().value, 25.0);
        assert!(matches!(pi_from_detections(&CentroidSet::new(4, 4, 0.5)), Err(Error::ZeroCells)));
    }

    #[test]
    fn bins_are_half_open() {
        assert_eq!(pi_bin(0.0), 0);
        assert_eq!(pi_bin(9.999), 0);
        assert_eq!(pi_bin(10.0), 1);
        assert_eq!(pi_bin(39.9), 3);
        assert_eq!(pi_bin(40.0), 4);
        assert_eq!(pi_bin(100.0), 4);
    }

    fn s(v: f64) -> Option<PiScore> {
        Some(PiScore { value: v, pos_count: 0, neg_count: 0 })
    }

    #[test]
    fn patient_mean_of_tmas() {
        let per_tma = BTreeMap::from([("t1".to_string(), s(10.0)), ("t2".to_string(), s(20.0))]);
        let map = BTreeMap::from([("t1".to_string(), "p".to_string()), ("t2".to_string(), "p".to_string())]);
        let expert = BTreeMap::from([("p".to_string(), 18.0)]);
        let r = patient_report(&per_tma, &map, &expert).unwrap();
        assert_eq!(r.patients.len(), 1);
        assert_eq!(r.patients[0].pi_predicted, 15.0);
        assert_eq!(r.patients[0].delta_pi, 3.0);
        assert_eq!(r.patients[0].bin, "[10,20)");
    }

    #[test]
    fn unknown_patient_and_exclusion() {
        let per_tma = BTreeMap::from([("t9".to_string(), s(1.0))]);
        let err = patient_report(&per_tma, &BTreeMap::new(), &BTreeMap::new()).unwrap_err();
        assert!(matches!(err, Error::UnknownPatient(_)));

        let per_tma = BTreeMap::from([("a".to_string(), None), ("b".to_string(), s(5.0))]);
        let map = BTreeMap::from([("a".to_string(), "p1".to_string()), ("b".to_string(), "p2".to_string())]);
        let expert = BTreeMap::from([("p1".to_string(), 3.0), ("p2".to_string(), 4.0)]);
        let r = patient_report(&per_tma, &map, &expert).unwrap();
        assert_eq!(r.excluded_tmas, vec!["a"]);
        assert_eq!(r.excluded_patients, vec!["p1"]);
        assert_eq!(r.patients.len(), 1);
    }

    #[test]
    fn reproducibility_of_identical_models() {
        let models = [1, 1, 1];
        let sd = reproducibility(&models, |_| Ok(BTreeMap::from([("f1".to_string(), 0.7)]))).unwrap();
        assert!(sd["f1"] < 1e-12);
        let vals = [0.70, 0.72, 0.74];
        let sd = reproducibility(&[0usize, 1, 2], |&i| Ok(BTreeMap::from([("f1".to_string(), vals[i])]))).unwrap();
        assert!((sd["f1"] - 0.02).abs() < 1e-12);
    }
}
