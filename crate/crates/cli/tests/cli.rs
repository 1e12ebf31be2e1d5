//! Runs the `distilmos` binary end to end on a freshly synthesized corpus.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_distilmos"))
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed ({:?}):\n{}\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Utterance rows of a manifest: no comments, no header.
fn manifest_rows(text: &str) -> Vec<&str> {
    text.lines()
        .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
        .skip(1)
        .collect()
}

/// Synthesizes a corpus and shrinks the generated config to a few steps.
fn workspace() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["synth", "--out", ".", "--seed", "3"]);
    let config = dir.path().join("run.toml");
    let text = fs::read_to_string(&config)
        .unwrap()
        .replace("steps = 2000", "steps = 12")
        .replace("checkpoint_every = 200", "checkpoint_every = 6");
    fs::write(&config, text).unwrap();
    (dir, config)
}

#[test]
fn synth_writes_corpus_and_config() {
    let (dir, _) = workspace();
    let manifest = fs::read_to_string(dir.path().join("corpus/manifest.txt")).unwrap();
    let rows = manifest_rows(&manifest);
    assert_eq!(rows.len(), 60);
    for split in ["train", "valid", "test"] {
        assert!(rows.iter().any(|r| r.ends_with(split)), "no {split} rows");
    }
}

#[test]
fn fit_tokens_is_deterministic() {
    let (dir, _) = workspace();
    let stdout = ok(dir.path(), &["fit-tokens", "--config", "run.toml"]);
    let table: Vec<&str> = stdout.lines().filter(|l| l.split('\t').count() == 4).collect();
    assert_eq!(table[0], "layer\tk\tframes\tquantization_error");
    assert_eq!(table.len(), 5);
    let first = fs::read(dir.path().join("codebooks.bin")).unwrap();
    assert_eq!(&first[..4], b"DMKM");
    ok(dir.path(), &["fit-tokens", "--config", "run.toml", "--out", "again.bin"]);
    assert_eq!(first, fs::read(dir.path().join("again.bin")).unwrap());
}

#[test]
fn fit_tokens_with_too_few_frames_is_a_data_error() {
    let (dir, _) = workspace();
    let out = run(dir.path(), &["fit-tokens", "--config", "run.toml", "--k", "100000"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn invalid_config_is_rejected() {
    let (dir, config) = workspace();
    let text = fs::read_to_string(&config).unwrap().replace("k = 16", "k = 0");
    fs::write(dir.path().join("bad.toml"), text).unwrap();
    let out = run(dir.path(), &["fit-tokens", "--config", "bad.toml"]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(dir.path(), &["train", "--config", "run.toml", "--head-mode", "bogus"]);
    assert!(!out.status.success());
}

#[test]
fn token_training_without_codebooks_is_a_config_error() {
    let (dir, _) = workspace();
    let out = run(dir.path(), &["train", "--config", "run.toml"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("fit-tokens"));
}

#[test]
fn pipeline_train_evaluate_predict_analyze_plot() {
    let (dir, _) = workspace();
    let d = dir.path();
    ok(d, &["fit-tokens", "--config", "run.toml"]);
    for (mode, run_dir) in [
        ("token_prediction", "runs/token"),
        ("none", "runs/none"),
        ("mse_distillation", "runs/mse"),
    ] {
        let stdout = ok(d, &["train", "--config", "run.toml", "--head-mode", mode, "--run-dir", run_dir]);
        assert!(stdout.contains("best checkpoint"), "{stdout}");
        assert!(d.join(run_dir).join("best.ckpt").is_file());
        assert!(d.join(run_dir).join("config.toml").is_file());
        let report = fs::read_to_string(d.join(run_dir).join("reports/test.txt")).unwrap();
        assert!(report.starts_with("level=utterance"));
        assert!(report.contains("level=system"));
    }

    let stdout = ok(
        d,
        &[
            "evaluate",
            "--checkpoint",
            "runs/token/best.ckpt",
            "--manifest",
            "corpus/manifest.txt",
            "--system-level",
            "--dump",
            "preds.tsv",
            "--codebooks",
            "codebooks.bin",
        ],
    );
    let lines: Vec<&str> = stdout.lines().collect();
    assert!(lines[0].starts_with("level=utterance n=9 "), "{stdout}");
    assert!(lines[1].starts_with("level=system"), "{stdout}");
    let dump = fs::read_to_string(d.join("preds.tsv")).unwrap();
    assert_eq!(dump.lines().filter(|l| !l.is_empty()).count(), 10);

    // zero-shot scoring never reports system level
    let stdout = ok(
        d,
        &["evaluate", "--checkpoint", "runs/none/best.ckpt", "--manifest", "corpus/manifest.txt", "--zero-shot", "--system-level"],
    );
    assert_eq!(stdout.lines().count(), 1);
    assert!(stdout.starts_with("level=utterance n=60 "));

    // a checkpoint is bound to the codebooks it was trained with
    ok(d, &["fit-tokens", "--config", "run.toml", "--k", "8", "--out", "other.bin"]);
    let out = run(
        d,
        &["evaluate", "--checkpoint", "runs/token/best.ckpt", "--manifest", "corpus/manifest.txt", "--codebooks", "other.bin"],
    );
    assert!(!out.status.success());

    let manifest = fs::read_to_string(d.join("corpus/manifest.txt")).unwrap();
    let id = manifest_rows(&manifest)[0].split('|').next().unwrap().to_string();
    let stdout = ok(d, &["predict", "--checkpoint", "runs/token/best.ckpt", "--manifest", "corpus/manifest.txt", "--id", &id]);
    let value: f64 = stdout.trim().parse().expect("a number");
    assert!(value.is_finite());

    let stdout = ok(
        d,
        &[
            "analyze-cca",
            "--config",
            "run.toml",
            "--checkpoint",
            "distilmos=runs/token/best.ckpt",
            "--checkpoint",
            "w/o token prediction=runs/none/best.ckpt",
            "--checkpoint",
            "mse_distillation=runs/mse/best.ckpt",
            "--split",
            "train",
            "--out",
            "cca.tsv",
            "--plot",
            "cca.svg",
        ],
    );
    let rows: Vec<Vec<&str>> = stdout.lines().map(|l| l.split('\t').collect()).collect();
    assert_eq!(rows.len(), 5, "{stdout}");
    assert_eq!(rows[0][0], "layer");
    assert_eq!(rows[0].len(), 6);
    for row in &rows[1..] {
        assert_eq!(row.len(), 6);
        for v in &row[1..] {
            let v: f64 = v.parse().unwrap();
            assert!((0.0..=1.0 + 1e-9).contains(&v));
        }
    }
    assert!(fs::read_to_string(d.join("cca.svg")).unwrap().contains("<svg"));

    ok(d, &["plot", "--table", "cca.tsv", "--out", "again.svg", "--title", "layers"]);
    assert!(fs::read_to_string(d.join("again.svg")).unwrap().contains("<svg"));
}

#[test]
fn stop_and_resume() {
    let (dir, _) = workspace();
    let d = dir.path();
    let stdout = ok(d, &["train", "--config", "run.toml", "--head-mode", "none", "--stop-after", "6"]);
    assert!(stdout.contains("--resume"), "{stdout}");
    assert!(d.join("runs/distilmos/train_state.bin").is_file());
    let stdout = ok(d, &["train", "--config", "run.toml", "--head-mode", "none", "--resume"]);
    assert!(stdout.contains("best checkpoint"));
    let log = fs::read_to_string(d.join("runs/distilmos/train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 12);
}

#[test]
fn sweep_k_reports_one_row_per_k() {
    let (dir, _) = workspace();
    let stdout = ok(dir.path(), &["sweep-k", "--config", "run.toml", "--ks", "4,8", "--out", "sweep.tsv"]);
    let rows: Vec<&str> = stdout.lines().filter(|l| l.contains('\t')).collect();
    assert_eq!(rows[0], "k\tutterance_srcc\tsystem_srcc");
    assert_eq!(rows.len(), 3);
    assert!(rows[1].starts_with("4\t") && rows[2].starts_with("8\t"));
    assert_eq!(fs::read_to_string(dir.path().join("sweep.tsv")).unwrap(), format!("{}\n", rows.join("\n")));
}
