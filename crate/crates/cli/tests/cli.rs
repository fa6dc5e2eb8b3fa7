use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn segfair(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_segfair"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr_json(o: &Output) -> serde_json::Value {
    serde_json::from_slice(&o.stderr).unwrap_or_else(|_| panic!("stderr not JSON: {}", String::from_utf8_lossy(&o.stderr)))
}

#[test]
fn calibrate_demo_prints_row() {
    let dir = tempfile::tempdir().unwrap();
    let o = segfair(&["calibrate-demo", "--row", "0.4,0.3,0.2,0.1", "--basket-size", "2", "--mode", "uniform"], dir.path());
    assert!(o.status.success());
    assert_eq!(stdout(&o).trim(), "0.333333,0.200000,0.133333,0.333333");

    let o = segfair(&["calibrate-demo", "--row", "0.4,0.3,0.2,0.1", "--basket-size", "2", "--mode", "proportional"], dir.path());
    assert!(o.status.success());
    assert_eq!(stdout(&o).trim(), "0.250000,0.300000,0.200000,0.250000");
}

#[test]
fn exit_codes_separate_usage_from_data() {
    let dir = tempfile::tempdir().unwrap();
    let o = segfair(&["audit", "--manifest", "missing.toml", "--out", "run"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stderr_json(&o)["error"], "usage");

    let o = segfair(&["calibrate-demo", "--basket-size", "2"], dir.path());
    assert_eq!(o.status.code(), Some(2));

    let o = segfair(&["no-such-command"], dir.path());
    assert_eq!(o.status.code(), Some(2));

    let o = segfair(&["calibrate-demo", "--row", "0.5,0,0,0.5", "--basket-size", "2"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(stderr_json(&o)["error"], "zero_mass_basket");

    fs::write(dir.path().join("bad.toml"), "seed = \"x\"").unwrap();
    let o = segfair(&["audit", "--manifest", "bad.toml", "--out", "run"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(stderr_json(&o)["error"], "manifest");
}

#[test]
fn help_lists_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let o = segfair(&["attention-profile", "--help"], dir.path());
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("[default: 128]") && text.contains("[default: last6]"), "{text}");
}

const MANIFEST: &str = r#"
seed = 1
[corpus]
source = "file"
path = "corpus.jsonl"
languages = ["en", "de"]

[encoder]
backend = "mini"
languages = ["en", "de"]

[[instances]]
n = 3
language = { kind = "monolingual", language = "en" }
set_count = 1
"#;

#[test]
fn corpus_audit_fit_report() {
    let dir = tempfile::tempdir().unwrap();
    let cwd = dir.path();
    let o = segfair(
        &["--seed", "4", "gen-corpus", "--languages", "en,de", "--per-lang", "6", "--min-tokens", "5", "--max-tokens", "8", "--out", "corpus.jsonl"],
        cwd,
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let first = fs::read_to_string(cwd.join("corpus.jsonl")).unwrap();
    assert_eq!(first.lines().count(), 12);
    segfair(
        &["--seed", "4", "gen-corpus", "--languages", "en,de", "--per-lang", "6", "--min-tokens", "5", "--max-tokens", "8", "--out", "again.jsonl"],
        cwd,
    );
    assert_eq!(first, fs::read_to_string(cwd.join("again.jsonl")).unwrap());

    fs::write(cwd.join("audit.toml"), MANIFEST).unwrap();
    let o = segfair(&["audit", "--manifest", "audit.toml", "--out", "run"], cwd);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(summary["records"], 18);
    let records = fs::read_to_string(cwd.join("run/records.csv")).unwrap();
    assert_eq!(records.lines().filter(|l| l.contains(",representation,")).count(), 18);

    // A single segment set cannot carry clustered errors.
    let o = segfair(&["fit-ols", "--records", "run/records.csv", "--out", "ols.csv"], cwd);
    assert_eq!(o.status.code(), Some(1));

    let o = segfair(&["--workers", "2", "audit", "--manifest", "audit.toml", "--out", "run"], cwd);
    assert!(o.status.success());
    let again: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(again["forward_passes"], 0);

    fs::write(cwd.join("audit.toml"), MANIFEST.replace("set_count = 1", "set_count = 2")).unwrap();
    let o = segfair(&["audit", "--manifest", "audit.toml", "--out", "run2"], cwd);
    assert!(o.status.success());
    let o = segfair(&["fit-ols", "--records", "run2/records.csv", "--out", "ols.csv"], cwd);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("n3-mono-en  representation  none  (G=2, N=36)"));
    assert_eq!(fs::read_to_string(cwd.join("ols.csv")).unwrap().lines().count(), 1 + 3);

    let o = segfair(&["report", "--run-dir", "run2", "--out-dir", "rep"], cwd);
    assert!(o.status.success());
    assert!(cwd.join("rep/profile-n3-mono-en-representation.svg").exists());
    assert!(cwd.join("rep/ols.txt").exists());

    let o = segfair(&["report", "--run-dir", "nowhere", "--out-dir", "rep"], cwd);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn attention_profile_writes_svg() {
    let dir = tempfile::tempdir().unwrap();
    let cwd = dir.path();
    fs::write(cwd.join("doc.txt"), "en1 en2 en3 en4\nen5\n\nen6 en7 en8\n\nen9 en10\n").unwrap();
    let args = ["attention-profile", "--doc", "doc.txt", "--basket-size", "3", "--layers", "7..12", "--out-svg", "a.svg"];
    let o = segfair(&args, cwd);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let profile: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    // 10 content tokens in baskets of 3 (the last loses </s>)
    assert_eq!(profile["tokens"], 12);
    assert_eq!(profile["baskets"].as_array().unwrap().len(), 4);
    let total = profile["start"].as_f64().unwrap()
        + profile["end"].as_f64().unwrap()
        + profile["baskets"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).sum::<f64>();
    assert!((total - 1.0).abs() < 1e-6);
    let svg = fs::read(cwd.join("a.svg")).unwrap();
    segfair(&args, cwd);
    assert_eq!(svg, fs::read(cwd.join("a.svg")).unwrap());

    let o = segfair(&["attention-profile", "--doc", "doc.txt", "--layers", "bogus", "--out-svg", "b.svg"], cwd);
    assert_eq!(o.status.code(), Some(2));
}
