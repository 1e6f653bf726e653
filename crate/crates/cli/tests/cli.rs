use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn cdp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cdp"))
        .args(args)
        .output()
        .unwrap()
}

fn fixture(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
        .to_string_lossy()
        .into_owned()
}

fn summary(out: &Output) -> Value {
    let stdout = String::from_utf8(out.stdout.clone()).unwrap();
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines.len(), 1, "stdout: {stdout}");
    serde_json::from_str(lines[0]).unwrap()
}

fn ok(args: &[&str]) -> Value {
    let out = cdp(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    summary(&out)
}

fn p(dir: &TempDir, name: &str) -> String {
    dir.path().join(name).to_string_lossy().into_owned()
}

/// Small synthetic corpus plus manifest in a fresh temp dir.
fn setup(count: &str) -> (TempDir, String, String) {
    let dir = TempDir::new().unwrap();
    let corpus = p(&dir, "corpus");
    let manifest = p(&dir, "manifest.jsonl");
    ok(&[
        "synth", "--count", count, "--size", "16", "--seed", "3", "--out", &corpus,
    ]);
    ok(&[
        "manifest", "--corpus", &corpus, "--seed", "5", "--out", &manifest,
    ]);
    (dir, corpus, manifest)
}

#[test]
fn brightness_identity_re_encodes_canonically() {
    let dir = TempDir::new().unwrap();
    let out = p(&dir, "same.ppm");
    let s = ok(&[
        "distort",
        "--input",
        &fixture("red_swatch.ppm"),
        "--kind",
        "brightness",
        "--alpha",
        "1.0",
        "--beta",
        "0",
        "--output",
        &out,
    ]);
    assert_eq!(s["status"], "ok");
    assert_eq!(s["command"], "distort");
    assert_eq!(
        std::fs::read(out).unwrap(),
        std::fs::read(fixture("red_swatch.ppm")).unwrap()
    );
}

#[test]
fn color_half_matches_golden() {
    let dir = TempDir::new().unwrap();
    let out = p(&dir, "color.ppm");
    ok(&[
        "distort",
        "--input",
        &fixture("red_swatch.ppm"),
        "--kind",
        "color",
        "--alpha",
        "0.5",
        "--beta",
        "0",
        "--output",
        &out,
    ]);
    let bytes = std::fs::read(&out).unwrap();
    assert_eq!(
        bytes,
        std::fs::read(fixture("red_swatch_color_0.5.ppm")).unwrap()
    );
    let img = cdp_core::decode_ppm(&bytes).unwrap();
    assert_eq!(img.pixel(3, 3), [166.0, 38.0, 38.0]);
}

#[test]
fn unknown_kind_and_flags_exit_one() {
    let dir = TempDir::new().unwrap();
    let out = cdp(&[
        "distort",
        "--input",
        &fixture("red_swatch.ppm"),
        "--kind",
        "blur",
        "--alpha",
        "1",
        "--output",
        &p(&dir, "x.ppm"),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("blur"));
    assert_eq!(cdp(&["synth", "--bogus"]).status.code(), Some(1));
    assert_eq!(cdp(&[]).status.code(), Some(1));
}

#[test]
fn bad_image_exits_two_with_error_summary() {
    let dir = TempDir::new().unwrap();
    let bad = p(&dir, "bad.ppm");
    std::fs::write(&bad, b"P3\n1 1\n255\n0 0 0\n").unwrap();
    let out = cdp(&[
        "distort",
        "--input",
        &bad,
        "--kind",
        "contrast",
        "--alpha",
        "1.2",
        "--output",
        &p(&dir, "x.ppm"),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let s = summary(&out);
    assert_eq!(s["status"], "error");
    assert_eq!(s["exit_code"], 2);
    assert!(s["wall_ms"].is_u64());
    assert!(!dir.path().join("x.ppm").exists());
}

#[test]
fn config_errors_exit_one() {
    let (dir, corpus, manifest) = setup("8");
    let out = cdp(&[
        "train",
        "--manifest",
        &manifest,
        "--corpus",
        &corpus,
        "--batch",
        "6",
        "--epochs",
        "1",
        "--out",
        &p(&dir, "m.ckpt"),
        "--log",
        &p(&dir, "l.jsonl"),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(summary(&out)["status"], "error");
}

#[test]
fn divergence_exits_three() {
    let (dir, corpus, manifest) = setup("12");
    let out = cdp(&[
        "train",
        "--manifest",
        &manifest,
        "--corpus",
        &corpus,
        "--lr",
        "1e30",
        "--schedule",
        "constant",
        "--epochs",
        "2",
        "--batch",
        "8",
        "--out",
        &p(&dir, "m.ckpt"),
        "--log",
        &p(&dir, "l.jsonl"),
    ]);
    assert_eq!(
        out.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert_eq!(summary(&out)["exit_code"], 3);
}

#[test]
fn manifest_is_idempotent() {
    let (dir, corpus, manifest) = setup("10");
    let again = p(&dir, "again.jsonl");
    ok(&[
        "manifest", "--corpus", &corpus, "--seed", "5", "--out", &again,
    ]);
    assert_eq!(
        std::fs::read(&manifest).unwrap(),
        std::fs::read(&again).unwrap()
    );
    let other = p(&dir, "other.jsonl");
    ok(&[
        "manifest", "--corpus", &corpus, "--seed", "6", "--out", &other,
    ]);
    assert_ne!(
        std::fs::read(&manifest).unwrap(),
        std::fs::read(&other).unwrap()
    );
}

#[test]
fn manifest_rejects_foreign_corpus() {
    let (dir, _, manifest) = setup("8");
    let other = p(&dir, "other");
    ok(&[
        "synth", "--count", "8", "--size", "16", "--seed", "4", "--out", &other,
    ]);
    let ck = p(&dir, "init.ckpt");
    ok(&["init", "--input-size", "16", "--out", &ck]);
    let out = cdp(&[
        "eval",
        "--checkpoint",
        &ck,
        "--manifest",
        &manifest,
        "--corpus",
        &other,
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(summary(&out)["error"].as_str().unwrap().contains("hash"));
}

#[test]
fn fresh_checkpoint_evaluates_to_chance() {
    let (dir, corpus, manifest) = setup("20");
    let ck = p(&dir, "init.ckpt");
    ok(&["init", "--input-size", "16", "--out", &ck]);
    let s = ok(&[
        "eval",
        "--checkpoint",
        &ck,
        "--manifest",
        &manifest,
        "--corpus",
        &corpus,
        "--split",
        "train",
        "--out",
        &p(&dir, "eval.json"),
    ]);
    let loss = s["mean_loss"].as_f64().unwrap();
    assert!((loss - 4f64.ln()).abs() <= 1e-6, "loss {loss}");
    assert_eq!(s["accuracy"].as_f64().unwrap(), 0.25);
    let stored: Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("eval.json")).unwrap())
            .unwrap();
    assert_eq!(stored["mean_loss"], s["mean_loss"]);
}

#[test]
fn train_logs_one_line_per_epoch_and_ignores_thread_count() {
    let (dir, corpus, manifest) = setup("24");
    let run = |threads: &str, tag: &str| -> (Vec<u8>, String) {
        let ck = p(&dir, &format!("{tag}.ckpt"));
        let log = p(&dir, &format!("{tag}.jsonl"));
        let s = ok(&[
            "--threads",
            threads,
            "train",
            "--manifest",
            &manifest,
            "--corpus",
            &corpus,
            "--epochs",
            "3",
            "--batch",
            "8",
            "--channels",
            "4,8",
            "--embedding",
            "8",
            "--out",
            &ck,
            "--log",
            &log,
        ]);
        assert_eq!(s["epochs"], 3);
        (
            std::fs::read(ck).unwrap(),
            std::fs::read_to_string(log).unwrap(),
        )
    };
    let (ck1, log1) = run("1", "one");
    let (ck4, log4) = run("4", "four");
    assert_eq!(log1.lines().count(), 3);
    for (i, line) in log1.lines().enumerate() {
        let v: Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["epoch"], i + 1);
        assert!(v["train_loss"].as_f64().unwrap().is_finite());
    }
    assert_eq!(log1, log4);
    assert_eq!(ck1, ck4);
}

#[test]
fn multitask_train_and_embed() {
    let (dir, corpus, manifest) = setup("40");
    let ck = p(&dir, "mt.ckpt");
    let s = ok(&[
        "train",
        "--manifest",
        &manifest,
        "--corpus",
        &corpus,
        "--mode",
        "multitask",
        "--lambda",
        "0.5",
        "--epochs",
        "2",
        "--batch",
        "8",
        "--channels",
        "4,8",
        "--embedding",
        "8",
        "--labeled-fraction",
        "0.25",
        "--out",
        &ck,
        "--log",
        &p(&dir, "mt.jsonl"),
    ]);
    assert_eq!(s["mode"], "multitask");
    assert!(s["main_val_acc"].is_f64());
    let log = std::fs::read_to_string(dir.path().join("mt.jsonl")).unwrap();
    let first: Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert_eq!(first["lambda"], 0.5);

    let csv = p(&dir, "emb.csv");
    let e = ok(&[
        "embed",
        "--checkpoint",
        &ck,
        "--corpus",
        &corpus,
        "--out",
        &csv,
    ]);
    assert_eq!(e["rows"], 40);
    assert_eq!(e["dim"], 8);
    let text = std::fs::read_to_string(csv).unwrap();
    assert_eq!(text.lines().count(), 41);
    assert_eq!(text.lines().nth(1).unwrap().split(',').count(), 9);
}

#[test]
fn help_lists_defaults() {
    let out = cdp(&["train", "--help"]);
    assert!(out.status.success());
    let help = String::from_utf8(out.stdout).unwrap();
    for needle in [
        "[default: 0.03]",
        "[default: 64]",
        "[default: 20]",
        "[default: 0.5]",
        "[default: 0.9]",
    ] {
        assert!(help.contains(needle), "missing {needle} in:\n{help}");
    }
}

/// Every `--flag` mentioned in the README must be accepted by some subcommand.
#[test]
fn readme_flags_exist_in_help() {
    let readme_path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../README.md");
    let readme = std::fs::read_to_string(readme_path).unwrap();
    let mut help = String::from_utf8(cdp(&["--help"]).stdout).unwrap();
    for sub in [
        "distort", "synth", "manifest", "train", "eval", "embed", "init",
    ] {
        help.push_str(&String::from_utf8(cdp(&[sub, "--help"]).stdout).unwrap());
    }
    let mut checked = 0;
    for word in readme.split(|c: char| c.is_whitespace() || "`|()[],".contains(c)) {
        if let Some(flag) = word.strip_prefix("--") {
            let flag = flag.split('=').next().unwrap();
            if !flag.starts_with(|c: char| c.is_ascii_lowercase())
                || !flag.chars().all(|c| c.is_ascii_lowercase() || c == '-')
            {
                continue;
            }
            if ["workspace", "release", "test", "nocapture", "bin"].contains(&flag) {
                continue;
            }
            assert!(
                help.contains(&format!("--{flag}")),
                "README mentions unknown flag --{flag}"
            );
            checked += 1;
        }
    }
    assert!(checked > 20, "only {checked} flags found in README");
}
