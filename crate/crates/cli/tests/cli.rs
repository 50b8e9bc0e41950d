use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn pll(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pll"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn pll")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn synth(dir: &Path) {
    let out = pll(&[
        "synth",
        "--out",
        dir.to_str().unwrap(),
        "--clips",
        "120",
        "--classes",
        "3",
        "--seed",
        "4",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

fn write_spec(dir: &Path, data: &Path) -> std::path::PathBuf {
    let spec = format!(
        r#"{{
  "dataset": {{"files": {{
    "embeddings": "{d}/embeddings.bin", "labels": "{d}/labels.csv",
    "classes": "{d}/classes.csv", "splits": "{d}/splits.csv"}}}},
  "methods": ["B0", "MT"],
  "train": {{"epochs": 3, "batch_size": 16, "layers": 1, "hidden": 8, "seed": 1}},
  "replicate_count": 2,
  "drop_fractions": [0.0],
  "out_dir": "{o}/results"
}}"#,
        d = data.display(),
        o = dir.display()
    );
    let path = dir.join("spec.json");
    fs::write(&path, spec).unwrap();
    path
}

#[test]
fn synth_then_validate() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let out = pll(&["ingest-validate", "--dir", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("clips:     120"), "{stdout}");
    assert!(stdout.contains("classes:   3"), "{stdout}");
    assert!(stdout.contains("coverage:  1.00000"), "{stdout}");
}

#[test]
fn validate_rejects_unknown_clip() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let labels = dir.path().join("labels.csv");
    let mut text = fs::read_to_string(&labels).unwrap();
    text.push_str("nosuchclip,0,1\n");
    fs::write(&labels, text).unwrap();
    let out = pll(&["ingest-validate", "--dir", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("nosuchclip"));
}

#[test]
fn validate_reports_unlabeled_clip() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let labels = dir.path().join("labels.csv");
    let text = fs::read_to_string(&labels).unwrap();
    let kept: String = text
        .lines()
        .filter(|l| !l.starts_with("syn000007,"))
        .map(|l| format!("{l}\n"))
        .collect();
    fs::write(&labels, kept).unwrap();
    let out = pll(&["ingest-validate", "--dir", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stdout).contains("syn000007"));
}

#[test]
fn run_and_summarize() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data);
    let spec = write_spec(dir.path(), &data);
    let out = pll(&["run", "--config", spec.to_str().unwrap(), "--workers", "2"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    let results = dir.path().join("results");
    let csv = fs::read_to_string(results.join("results.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next(),
        Some("run_id,method,drop_fraction,replicate,seed,metric,value,status")
    );
    // 2 methods x 2 replicates x 3 metrics
    assert_eq!(lines.count(), 12);
    assert!(results.join("summary.csv").exists());

    let summary = dir.path().join("again.csv");
    let plot = dir.path().join("plot.json");
    let out = pll(&[
        "summarize",
        "--in",
        results.join("results.csv").to_str().unwrap(),
        "--out",
        summary.to_str().unwrap(),
        "--plot-json",
        plot.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(
        fs::read_to_string(&summary).unwrap(),
        fs::read_to_string(results.join("summary.csv")).unwrap()
    );
    assert!(plot.exists());
}

#[test]
fn run_overrides_from_flags() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data);
    let spec = write_spec(dir.path(), &data);
    let out_dir = dir.path().join("other");
    let out = pll(&[
        "run",
        "--config",
        spec.to_str().unwrap(),
        "--methods",
        "B1",
        "--replicates",
        "1",
        "--drop",
        "0.5",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(out_dir.join("results.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r.contains(",B1,0.5,0,")), "{csv}");
}

#[test]
fn bad_config_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("spec.json");
    fs::write(&path, "{\"dataset\": 3}").unwrap();
    let out = pll(&["run", "--config", path.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    let out = pll(&[
        "run",
        "--config",
        dir.path().join("missing.json").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2);
}
