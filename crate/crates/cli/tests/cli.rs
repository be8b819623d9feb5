use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ki67(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ki67")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = ki67(args);
    assert!(out.status.success(), "ki67 {args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL_TRAIN: &str = "epochs = 2\nbatch_size = 4\ncrop_size = 32\n";

const SMOKE: &str = r#"
[run]
name = "smoke"
root_seeds = [1]
regimes = ["gs"]

[data]
gs_patches = 12
cohort_patients = 2
cohort_tma_size = 256

[train]
epochs = 2
folds = 1
crop_size = 32

[embed]
enabled = false
"#;

#[test]
fn single_step_commands_chain() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (src, tgt, tma) = (d.join("src"), d.join("tgt"), d.join("tma"));

    ok(&["synth", "--preset", "source", "--count", "6", "--pi", "30", "--seed", "1", "--out", p(&src)]);
    ok(&["synth", "--preset", "target", "--count", "3", "--seed", "2", "--out", p(&tgt)]);
    ok(&["synth", "--preset", "target", "--kind", "tma", "--seed", "3", "--out", p(&tma)]);
    assert!(src.join("0005.png").exists() && src.join("0005.csv").exists());
    let truth: serde_json::Value = serde_json::from_slice(&fs::read(src.join("truth.json")).unwrap()).unwrap();
    assert_eq!(truth.as_array().unwrap().len(), 6);

    let stdout = ok(&[
        "ihcch-detect",
        p(&src.join("0000.png")),
        "--out",
        p(&d.join("det.csv")),
        "--overlay",
        p(&d.join("overlay.png")),
    ]);
    assert!(stdout.contains("nuclei"), "{stdout}");
    assert!(d.join("overlay.png").exists());

    let ss = d.join("ss");
    ok(&["gen-ss", p(&tma), "--increment", "4", "--seed", "5", "--out", p(&ss)]);
    assert!(ss.join("patches").join("0003.csv").exists());

    fs::write(d.join("train.toml"), SMALL_TRAIN).unwrap();
    let model = d.join("model.ckpt");
    ok(&[
        "train",
        "--regime",
        "ss+gs",
        "--gs",
        p(&src),
        "--ss",
        p(&ss),
        "--config",
        p(&d.join("train.toml")),
        "--out",
        p(&model),
    ]);
    assert!(model.exists());
    assert!(d.join("model.stage0.ckpt").exists());

    let eval = d.join("eval.json");
    ok(&["evaluate", "--model", p(&model), "--images", p(&src), "--out", p(&eval)]);
    let summary: serde_json::Value = serde_json::from_slice(&fs::read(&eval).unwrap()).unwrap();
    assert_eq!(summary["images"].as_array().unwrap().len(), 6);
    let f1 = summary["mean_f1"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&f1));

    let emb = d.join("emb.csv");
    let stdout = ok(&[
        "embed",
        "--model",
        p(&model),
        "--source",
        p(&src),
        "--target",
        p(&tgt),
        "--perplexity",
        "2",
        "--iterations",
        "250",
        "--out",
        p(&emb),
    ]);
    assert!(stdout.contains("overlap score"), "{stdout}");
    assert_eq!(fs::read_to_string(&emb).unwrap().lines().count(), 1 + 9);
}

#[test]
fn config_error_names_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, SMOKE.replace("epochs = 2", "epochs = 2\nepochz = 3")).unwrap();
    let out = ki67(&["experiment", p(&cfg), "--out", p(&dir.path().join("run"))]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("line 14") && stderr.contains("epochz"), "{stderr}");
    assert!(!dir.path().join("run").join("report.json").exists());
}

#[test]
fn experiment_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("smoke.toml");
    fs::write(&cfg, SMOKE).unwrap();
    let run = dir.path().join("run");
    let stdout = ok(&["experiment", p(&cfg), "--out", p(&run), "--jobs", "1"]);
    assert!(stdout.contains("report:"), "{stdout}");

    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(run.join("manifest.json")).unwrap()).unwrap();
    let listed: Vec<&str> = manifest["files"].as_array().unwrap().iter().map(|f| f["path"].as_str().unwrap()).collect();
    for f in ["report.json", "config.toml", "anova.json", "regimes/gs.json"] {
        assert!(listed.contains(&f), "{f} missing from {listed:?}");
    }

    let stdout = ok(&["report", p(&run)]);
    assert!(stdout.contains("regimes.csv"), "{stdout}");
    let csv = fs::read_to_string(run.join("csv").join("regimes.csv")).unwrap();
    assert!(csv.lines().nth(1).unwrap().starts_with("gs"), "{csv}");
}
