use ki67::experiment::{load_report, run_experiment, ExperimentConfig, RunOptions, REPORT_FILE};
use ki67::regimes::checkpoint;

const MATRIX: &str = r#"
[run]
name = "matrix"
root_seeds = [3]
regimes = ["ss", "gs", "mixed", "gs+ss", "ss+gs"]
ss_increments = [10]

[data]
gs_patches = 20
pool_tmas = 1
cohort_patients = 2
cohort_tma_size = 256

[train]
epochs = 6
folds = 2
crop_size = 32

[embed]
source_patches = 8
target_patches = 8
perplexity = 3.0
iterations = 250
"#;

#[test]
fn full_matrix_writes_one_report_per_regime() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::parse(MATRIX).unwrap();
    let out = run_experiment(&cfg, MATRIX, dir.path(), &RunOptions::default()).unwrap();
    assert!(out.success(), "{:?}", out.report.failed);

    let report = load_report(&dir.path().join(REPORT_FILE)).unwrap();
    // undefined metrics are NaN, so compare the serialized form
    assert_eq!(serde_json::to_string(&report).unwrap(), serde_json::to_string(&out.report).unwrap());
    assert_eq!(report.cells.len(), 5);
    assert_eq!(report.regimes.len(), 5);
    let regime_files = std::fs::read_dir(dir.path().join("regimes")).unwrap().count();
    assert_eq!(regime_files, 5);
    assert!(dir.path().join("anova.json").exists());

    // one table comparing the other regimes against GS-only; comparisons
    // that are degenerate at this scale (zero variance) are left out
    let table: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("anova.json")).unwrap()).unwrap();
    assert_eq!(table["one_way"].as_array().unwrap().len(), report.anova.len());
    assert_eq!(table["paired"].as_array().unwrap().len(), report.paired.len());
    assert!(report.anova.len() <= 4 * 3);
    for row in &report.anova {
        assert_eq!(row.baseline, "gs");
        assert_ne!(row.regime, "gs");
        assert!(report.regimes.iter().any(|s| s.regime == row.regime));
        assert!((0.0..=1.0).contains(&row.p));
    }

    for cell in &report.cells {
        assert_eq!(cell.folds.len(), 2);
        assert!(cell.folds.iter().all(|f| f.held_out_size > 0 && f.source.is_some()));
        assert!((0.0..=1.0).contains(&cell.target_f1));
    }

    // SS-only and SS+GS share their first stage
    let ckpt = |regime: &str, name: &str| {
        checkpoint::load(&dir.path().join("seed-3").join(regime).join(name)).unwrap().0.params()
    };
    assert_eq!(ckpt("ss@10", "fold-0.ckpt"), ckpt("ss+gs@10", "fold-0.stage0.ckpt"));
    assert_ne!(ckpt("ss+gs@10", "fold-0.ckpt"), ckpt("ss+gs@10", "fold-0.stage0.ckpt"));

    let manifest = std::fs::read_to_string(dir.path().join("manifest.json")).unwrap();
    assert!(manifest.contains("\"report.json\""));
    assert!(!manifest.contains("\"manifest.json\""));
}
