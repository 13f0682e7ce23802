//! End-to-end tests of the command-line surface: flags, file formats,
//! and the exit-code contract (0 ok, 2 usage/config, 3 failed check,
//! 4 corrupt artifact, 5 runtime failure).

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_orthoattn")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .output()
        .expect("spawn orthoattn")
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawn orthoattn")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn genbank_then_checkbank_ortho() {
    let dir = tempfile::tempdir().unwrap();
    let bank = dir.path().join("k.ofb");
    let out = run(&[
        "genbank", "--kind", "ortho", "--c", "8", "--h", "2", "--w", "2", "--seed", "7",
        "--out", bank.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(bank.exists());
    assert!(stdout(&out).contains("group 0"));
    assert!(stdout(&out).contains("PASS"));

    let check = run(&["checkbank", "--in", bank.to_str().unwrap()]);
    assert_eq!(code(&check), 0);
    assert!(stdout(&check).contains("max deviation"));
}

#[test]
fn genbank_gap_is_constant_kernel() {
    let dir = tempfile::tempdir().unwrap();
    let bank = dir.path().join("g.ofb");
    let out = run(&[
        "genbank", "--kind", "gap", "--c", "3", "--h", "2", "--w", "2", "--out",
        bank.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0);
    let loaded = orthoattn::filterbank::load_bank(&bank).unwrap();
    assert!(loaded.kernel().data().iter().all(|&v| v == 0.25));
}

#[test]
fn genbank_rejects_zero_channels_with_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "genbank", "--kind", "ortho", "--c", "0", "--h", "2", "--w", "2", "--out",
        dir.path().join("x.ofb").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("positive"));
}

#[test]
fn unknown_flag_is_usage_error() {
    let out = run(&["genbank", "--bogus", "1"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn checkbank_detects_tampered_payload() {
    let dir = tempfile::tempdir().unwrap();
    let bank = dir.path().join("k.ofb");
    run(&[
        "genbank", "--kind", "ortho", "--c", "4", "--h", "2", "--w", "2", "--out",
        bank.to_str().unwrap(),
    ]);
    let mut bytes = std::fs::read(&bank).unwrap();
    let n = bytes.len();
    bytes[n - 12] ^= 0xFF; // payload byte, CRC now wrong
    std::fs::write(&bank, bytes).unwrap();
    let out = run(&["checkbank", "--in", bank.to_str().unwrap()]);
    assert_eq!(code(&out), 4);
}

#[test]
fn checkbank_expect_kind_mismatch_fails_check() {
    let dir = tempfile::tempdir().unwrap();
    let bank = dir.path().join("g.ofb");
    run(&[
        "genbank", "--kind", "gap", "--c", "2", "--h", "2", "--w", "2", "--out",
        bank.to_str().unwrap(),
    ]);
    let out = run(&[
        "checkbank", "--in", bank.to_str().unwrap(), "--expect-kind", "ortho",
    ]);
    assert_eq!(code(&out), 3);
}

#[test]
fn gradcheck_attention_passes_tightly() {
    let out = run(&["gradcheck", "--preset", "attention", "--seed", "0"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    assert!(text.contains("gradcheck: PASS"));
    // Reported max relative error stays at or under 1e-6.
    let err: f64 = text
        .lines()
        .find(|l| l.starts_with("max relative error"))
        .and_then(|l| l.split(':').nth(1))
        .and_then(|v| v.trim().parse().ok())
        .expect("parse error line");
    assert!(err <= 1e-6, "reported {err}");
}

#[test]
fn gradcheck_network_presets_pass() {
    for preset in ["tiny34", "tiny50"] {
        let out = run(&["gradcheck", "--preset", preset, "--seed", "0"]);
        assert_eq!(
            code(&out),
            0,
            "{preset}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        assert!(stdout(&out).contains("gradcheck: PASS"));
    }
}

#[test]
fn gradcheck_detects_injected_sign_flip() {
    let out = run(&[
        "gradcheck", "--preset", "attention", "--seed", "0", "--inject-sign-flip",
    ]);
    assert_eq!(code(&out), 3);
    let out = run(&[
        "gradcheck", "--preset", "tiny34", "--seed", "0", "--inject-sign-flip",
    ]);
    assert_eq!(code(&out), 3);
}

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let metrics = dir.join("metrics.csv");
    let ckpt = dir.join("model.ock");
    let comparison = dir.join("comparison.csv");
    let config = format!(
        r#"{{
  "schema_version": 1,
  "seed": 0,
  "data": {{ "kind": "synthetic", "classes": 3, "n_per_class": 12, "height": 16, "width": 16, "val_per_class": 4 }},
  "network": {{ "preset": "tiny34", "input_height": 16, "input_width": 16,
                "attention": {{ "placement": "standard", "squeeze": "ortho", "reduction": 2 }} }},
  "train": {{ "epochs": 2, "batch_size": 16, "lr": 0.05 }},
  "outputs": {{ "metrics_csv": {metrics:?}, "checkpoint": {ckpt:?}, "comparison_csv": {comparison:?} }}{extra}
}}"#,
        metrics = metrics.to_str().unwrap(),
        ckpt = ckpt.to_str().unwrap(),
        comparison = comparison.to_str().unwrap(),
    );
    let path = dir.join("run.json");
    std::fs::write(&path, config).unwrap();
    path
}

#[test]
fn train_eval_compare_flow() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        ",\n  \"compare\": { \"kinds\": [\"gap\", \"ortho\", \"random\"], \"seeds\": [0] }",
    );

    let out = run_in(dir.path(), &["train", "--config", config.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let metrics_path = dir.path().join("metrics.csv");
    let csv = std::fs::read_to_string(&metrics_path).unwrap();
    assert!(csv.starts_with("epoch,split,metric,value\n"));
    // 2 epochs x (loss, acc, lr, top1, top5).
    assert_eq!(csv.lines().count(), 1 + 2 * 5);
    let ckpt_bytes = std::fs::read(dir.path().join("model.ock")).unwrap();

    // Idempotence: rerunning reproduces both artifacts bitwise.
    let rerun = run_in(dir.path(), &["train", "--config", config.to_str().unwrap()]);
    assert_eq!(code(&rerun), 0);
    assert_eq!(std::fs::read_to_string(&metrics_path).unwrap(), csv);
    assert_eq!(std::fs::read(dir.path().join("model.ock")).unwrap(), ckpt_bytes);

    // Eval reports exactly the last val top-1 from the metrics file.
    let last_top1 = csv
        .lines()
        .rfind(|l| l.contains(",val,top1,"))
        .and_then(|l| l.rsplit(',').next())
        .unwrap()
        .to_string();
    let eval = run_in(dir.path(), &["eval", "--config", config.to_str().unwrap()]);
    assert_eq!(code(&eval), 0, "{}", String::from_utf8_lossy(&eval.stderr));
    let eval_out = stdout(&eval);
    let eval_top1 = eval_out
        .lines()
        .find(|l| l.starts_with("top1 "))
        .map(|l| l["top1 ".len()..].to_string())
        .unwrap();
    assert_eq!(eval_top1, last_top1);

    // Compare: one row per kind with the documented schema.
    let cmp = run_in(dir.path(), &["compare", "--config", config.to_str().unwrap()]);
    assert_eq!(code(&cmp), 0, "{}", String::from_utf8_lossy(&cmp.stderr));
    let table = std::fs::read_to_string(dir.path().join("comparison.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "kind,n_seeds,mean_t1,sd_t1");
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("gap,1,"));
    assert!(lines[2].starts_with("ortho,1,"));
    assert!(lines[3].starts_with("random,1,"));
}

#[test]
fn config_schema_violations_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"schema_version": 1, "bogus_field": true}"#).unwrap();
    let out = run(&["train", "--config", bad.to_str().unwrap()]);
    assert_eq!(code(&out), 2);

    std::fs::write(
        &bad,
        r#"{"schema_version": 99,
            "data": {"kind": "synthetic", "classes": 2, "n_per_class": 2, "height": 8, "width": 8},
            "network": {"preset": "tiny34"},
            "train": {"epochs": 1}}"#,
    )
    .unwrap();
    let out = run(&["train", "--config", bad.to_str().unwrap()]);
    assert_eq!(code(&out), 2);

    // compare without a compare section is a config error too.
    let config = write_config(dir.path(), "");
    let out = run_in(dir.path(), &["compare", "--config", config.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
}

#[test]
fn info_inspects_banks_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let bank = dir.path().join("k.ofb");
    run(&[
        "genbank", "--kind", "dct", "--c", "4", "--h", "4", "--w", "4", "--freqs", "0,0;1,1",
        "--out", bank.to_str().unwrap(),
    ]);
    let out = run(&["info", "--in", bank.to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    assert!(stdout(&out).contains("OFB1 bank: kind=dct"));

    let config = write_config(dir.path(), "");
    run_in(dir.path(), &["train", "--config", config.to_str().unwrap()]);
    let out = run(&[
        "info", "--in", dir.path().join("model.ock").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0);
    assert!(stdout(&out).contains("OCK1 checkpoint"));

    let garbage = dir.path().join("junk.bin");
    std::fs::write(&garbage, b"NOPEnope").unwrap();
    let out = run(&["info", "--in", garbage.to_str().unwrap()]);
    assert_eq!(code(&out), 4);
}
