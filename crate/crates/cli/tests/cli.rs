use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn afcyte(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_afcyte")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn help_lists_commands_and_defaults() {
    let o = afcyte(&["--help"]);
    assert_eq!(code(&o), 0);
    let s = String::from_utf8_lossy(&o.stdout);
    for c in ["synth", "extract", "train", "eval", "perturb", "report"] {
        assert!(s.contains(c), "{c} missing from help");
    }
    let o = afcyte(&["train", "--help"]);
    let s = String::from_utf8_lossy(&o.stdout);
    for needle in ["--epochs", "[default: 300]", "[default: 5e-6]", "--mask-mode", "[default: all]", "--config"] {
        assert!(s.contains(needle), "{needle} missing from train help");
    }
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(code(&afcyte(&["train", "--no-such-flag"])), 2);
    assert_eq!(code(&afcyte(&["frobnicate"])), 2);
    let d = tempfile::tempdir().unwrap();
    let o = afcyte(&["synth", "--out", p(d.path()), "--per-class", "0"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).starts_with("error[usage]"));
}

#[test]
fn unknown_config_keys_are_all_reported() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("run.conf");
    fs::write(&cfg, "seed = 1\nbogus = 2\n[synth]\nper_class = 3\nalso_bogus = 4\n").unwrap();
    let o = afcyte(&["--config", p(&cfg), "synth", "--out", p(&d.path().join("o"))]);
    assert_eq!(code(&o), 2);
    let e = stderr(&o);
    assert!(e.contains("'bogus'") && e.contains("'also-bogus'"), "{e}");
}

#[test]
fn config_file_sits_between_defaults_and_flags() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("run.conf");
    fs::write(&cfg, "[synth]\nper_class = 3\nnoise = high\n").unwrap();
    let a = d.path().join("a");
    assert_eq!(code(&afcyte(&["--config", p(&cfg), "synth", "--out", p(&a)])), 0);
    let manifest = fs::read_to_string(a.join("manifest.csv")).unwrap();
    assert_eq!(manifest.lines().filter(|l| l.contains(".afpt")).count(), 6);
    let recorded = fs::read_to_string(a.join("config.txt")).unwrap();
    assert!(recorded.contains("per-class=3  # file"), "{recorded}");
    assert!(recorded.contains("preset=binary  # default"), "{recorded}");

    let b = d.path().join("b");
    assert_eq!(code(&afcyte(&["synth", "--config", p(&cfg), "--out", p(&b), "--per-class", "2"])), 0);
    let manifest = fs::read_to_string(b.join("manifest.csv")).unwrap();
    assert_eq!(manifest.lines().filter(|l| l.contains(".afpt")).count(), 4);
    let recorded = fs::read_to_string(b.join("config.txt")).unwrap();
    assert!(recorded.contains("per-class=2  # flag"));
    assert!(recorded.contains("noise=high  # file"));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(b.join("config.json")).unwrap()).unwrap();
    assert_eq!(json["arguments"]["per-class"]["source"], "flag");
}

#[test]
fn locked_run_directory_is_refused() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join(".afcyte.lock"), "1").unwrap();
    let o = afcyte(&["synth", "--out", p(d.path()), "--per-class", "1"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("locked"));
}

#[test]
fn thread_variable_is_validated() {
    let d = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_afcyte"))
        .args(["synth", "--out", p(d.path()), "--per-class", "1"])
        .env("AFCYTE_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
    let o = Command::new(env!("CARGO_BIN_EXE_afcyte"))
        .args(["synth", "--out", p(d.path()), "--per-class", "1"])
        .env("AFCYTE_THREADS", "2")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn extraction_from_synthetic_images() {
    let d = tempfile::tempdir().unwrap();
    let imgs = d.path().join("imgs");
    let o = afcyte(&["synth", "--mode", "fov", "--out", p(&imgs), "--size", "256", "--cells", "8", "--fovs", "2", "--seed", "4"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = d.path().join("ex");
    let o = afcyte(&[
        "extract",
        "--inputs",
        p(&imgs.join("fov_000.afim")),
        p(&imgs.join("fov_001.afim")),
        "--out",
        p(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let summary = fs::read_to_string(out.join("extraction.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3);
    let hashes = fs::read_to_string(out.join("inputs.sha256")).unwrap();
    assert_eq!(hashes.lines().count(), 2);
    assert!(out.join("manifest.csv").exists());

    let o = afcyte(&["extract", "--inputs", p(&imgs.join("missing.afim")), "--out", p(&d.path().join("x"))]);
    assert_eq!(code(&o), 3);
    let o = afcyte(&["extract", "--inputs", p(&imgs.join("fov_000.afim")), "--out", p(&d.path().join("y")), "--label", "maybe"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn train_eval_report_and_perturb() {
    let d = tempfile::tempdir().unwrap();
    let data = d.path().join("data");
    assert_eq!(code(&afcyte(&["synth", "--out", p(&data), "--per-class", "20", "--seed", "3"])), 0);
    let manifest = data.join("manifest.csv");
    let train = |out: &Path| afcyte(&["train", "--manifest", p(&manifest), "--out", p(out), "--epochs", "1", "--folds", "2", "--seed", "9"]);

    let r1 = d.path().join("r1");
    let r2 = d.path().join("r2");
    let o = train(&r1);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(code(&train(&r2)), 0);
    for f in ["metrics.csv", "report.txt", "folds.csv", "fold_balance.csv", "fold0/checkpoint.afck", "fold1/history.csv", "fold0/scores.csv", "fold0/roc.csv"] {
        let a = fs::read(r1.join(f)).unwrap_or_else(|_| panic!("{f} missing"));
        assert_eq!(a, fs::read(r2.join(f)).unwrap(), "{f} differs between identical runs");
    }
    assert!(!r1.join(".afcyte.lock").exists());
    let cfg = fs::read_to_string(r1.join("config.txt")).unwrap();
    assert!(cfg.contains("lr=0.000005") && cfg.contains("batch_size=16"), "{cfg}");

    let ev = d.path().join("ev");
    let o = afcyte(&["eval", "--fold-dir", p(&r1.join("fold0")), "--manifest", p(&manifest), "--out", p(&ev)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read_to_string(ev.join("scores.csv")).unwrap().lines().count(), 41);

    let o = afcyte(&["report", "--run", p(&r1)]);
    assert_eq!(code(&o), 0);
    assert_eq!(o.stdout, fs::read(r1.join("report.txt")).unwrap());

    let sw = d.path().join("sw");
    let o = afcyte(&[
        "perturb",
        "--manifest",
        p(&manifest),
        "--out",
        p(&sw),
        "--kind",
        "channel",
        "--channel-configs",
        "nadh_only,all",
        "--epochs",
        "1",
        "--folds",
        "2",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read_to_string(sw.join("sweep_summary.csv")).unwrap().lines().count(), 3);
    let o = afcyte(&["report", "--run", p(&sw)]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("nadh_only"));

    assert_eq!(code(&afcyte(&["report", "--run", p(&data)])), 3);
}
