use std::fs;
use std::process::{Command, Output};

fn xmtl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xmtl")).args(args).env("RUST_LOG", "warn").output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn count_params_best_prints_the_best_row() {
    let o = xmtl(&["count-params", "--strategy", "best"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("layer_norm + self_attn + encoder_attn"), "{text}");
    assert!(text.contains("220.6M"), "{text}");
    assert_eq!(text.lines().count(), 2);
}

#[test]
fn count_params_table_has_seven_rows() {
    let o = xmtl(&["count-params"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).lines().count(), 8);
}

#[test]
fn grad_check_passes_and_tolerance_is_enforced() {
    let o = xmtl(&["grad-check"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert_eq!(stdout(&o).lines().filter(|l| l.ends_with("ok")).count(), 6);
    let strict = xmtl(&["grad-check", "--tolerance", "1e-30"]);
    assert!(!strict.status.success());
    assert!(String::from_utf8_lossy(&strict.stderr).contains("relative gradient error"));
}

#[test]
fn missing_config_names_the_path() {
    let o = xmtl(&["train", "--config", "missing.file"]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("missing.file"), "{err}");
    assert_eq!(err.trim().lines().count(), 1);
}

#[test]
fn unknown_subcommand_prints_usage() {
    let o = xmtl(&["bogus"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
}

#[test]
fn synth_train_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    fs::write(
        &cfg,
        r#"
seed = 4
[data]
kind = "synth"
train_size = 12
valid_size = 4
test_size = 4
mono_size = 8
[model.encoder.context]
layer_count = 1
[model.decoder]
layer_count = 1
[training]
steps = 4
eval_interval = 2
batch_size = 2
[pretrain.speech]
steps = 2
[pretrain.denoising]
steps = 2
batch_size = 2
[eval]
beam = 2
max_len = 8
"#,
    )
    .unwrap();
    let cfg = cfg.to_str().unwrap();
    let data = dir.path().join("data");
    let o = xmtl(&["synth-data", "--config", cfg, "--out", data.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(data.join("train.tsv").exists() && data.join("vocab.txt").exists());

    let run = dir.path().join("run");
    let o = xmtl(&["train", "--config", cfg, "--out", run.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let train_bleu = stdout(&o).lines().find(|l| l.starts_with("BLEU")).unwrap().to_string();
    assert!(run.join("curve-en-de-lr3e-3.tsv").exists());
    let ckpt = run.join("en-de.ckpt");

    let o = xmtl(&["eval", "--checkpoint", ckpt.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o).lines().next().unwrap(), train_bleu);
}
