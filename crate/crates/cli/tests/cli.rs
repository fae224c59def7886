use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rnn_encdec::{checkpoint, ModelParams, Rng};

fn tiny_conf() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/tiny.conf")
}

fn encdec(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_encdec"))
        .current_dir(dir)
        .env_remove(encdec_cli::config::DATA_DIR_ENV)
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

/// Writes a small reversal corpus and trains on it; returns the directory.
fn trained(updates: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let conf = tiny_conf();
    let conf = conf.to_str().unwrap();
    let gen = encdec(
        dir.path(),
        &["gen-toytask", "--config", conf, "--task", "reverse", "--pairs", "100", "--set", "vocab_size=4", "--output", "data.txt"],
    );
    assert!(gen.status.success(), "{}", String::from_utf8_lossy(&gen.stderr));
    let train = encdec(
        dir.path(),
        &["train", "--config", conf, "--train-data", "data.txt", "--checkpoint", "m.ckpt", "--max-updates", updates, "--set", "batch_size=4"],
    );
    assert!(train.status.success(), "{}", String::from_utf8_lossy(&train.stderr));
    dir
}

#[test]
fn zero_updates_saves_the_initialization() {
    let dir = trained("0");
    let saved = checkpoint::load(&dir.path().join("m.ckpt")).unwrap();
    let cfg = saved.config.clone();
    assert_eq!((cfg.src_vocab, cfg.tgt_vocab, cfg.hidden), (6, 6, 8));
    let init = ModelParams::init(&cfg, 0.01, &mut Rng::new(1234)).unwrap();
    assert_eq!(saved, init);
    assert!(!dir.path().join("m.ckpt.lock").exists());
    let log = std::fs::read_to_string(dir.path().join("m.ckpt.log")).unwrap();
    assert_eq!(log, "# update\tmean_nll\tseconds\n");
}

#[test]
fn score_is_repeatable_and_commands_run() {
    let dir = trained("20");
    let p = dir.path();
    std::fs::write(p.join("pairs.txt"), "w0 w1\tw1 w0\nw2\tw2\n").unwrap();
    let args = ["score", "--checkpoint", "m.ckpt", "--input", "pairs.txt"];
    let (a, b) = (encdec(p, &args), encdec(p, &args));
    assert!(a.status.success());
    assert_eq!(stdout(&a), stdout(&b));
    let lines: Vec<String> = stdout(&a).lines().map(String::from).collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[0].ends_with("\tw0 w1\tw1 w0"));
    assert!(lines[0].split('\t').next().unwrap().parse::<f64>().unwrap() < 0.0);

    std::fs::write(p.join("src.txt"), "w0 w1\n").unwrap();
    let s = encdec(p, &["sample", "--checkpoint", "m.ckpt", "--input", "src.txt", "--set", "samples=10", "--set", "top=3"]);
    assert!(s.status.success());
    let rows = stdout(&s);
    assert!((1..=3).contains(&rows.lines().count()));
    assert!(rows.lines().all(|l| l.starts_with("w0 w1\t")));

    std::fs::write(p.join("table.txt"), "w0 ||| w0 ||| 0.5\n# note\nw1 w2 ||| w2 w1\n").unwrap();
    let r = encdec(p, &["rescore", "--checkpoint", "m.ckpt", "--input", "table.txt", "--output", "out.txt"]);
    assert!(r.status.success());
    let out = std::fs::read_to_string(p.join("out.txt")).unwrap();
    let out: Vec<&str> = out.lines().collect();
    assert!(out[0].starts_with("w0 ||| w0 ||| 0.5 -"));
    assert_eq!(out[1], "# note");
    assert!(out[2].starts_with("w1 w2 ||| w2 w1 ||| -"));

    let w = encdec(p, &["export-words", "--checkpoint", "m.ckpt", "--side", "tgt"]);
    assert!(w.status.success());
    assert_eq!(stdout(&w).lines().count(), 6);
    let v = encdec(p, &["export-phrases", "--checkpoint", "m.ckpt", "--input", "src.txt"]);
    assert!(v.status.success());
    assert_eq!(stdout(&v).lines().count(), 1);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let conf = tiny_conf();
    let conf = conf.to_str().unwrap();

    let unknown = encdec(p, &["grad-check", "--set", "no_such_key=1"]);
    assert_eq!(unknown.status.code(), Some(1));
    assert_eq!(String::from_utf8_lossy(&unknown.stderr).trim().lines().count(), 1);
    assert_eq!(encdec(p, &["frobnicate"]).status.code(), Some(1));
    assert_eq!(encdec(p, &["gen-toytask", "--task", "sort"]).status.code(), Some(1));

    let missing = encdec(p, &["score", "--checkpoint", "nope.ckpt", "--input", "x"]);
    assert_eq!(missing.status.code(), Some(2));

    let ok = encdec(p, &["grad-check", "--config", conf]);
    assert_eq!(ok.status.code(), Some(0));
    assert!(stdout(&ok).starts_with("max_rel_error\t"));
    let strict = encdec(p, &["grad-check", "--config", conf, "--set", "check_tol=1e-30"]);
    assert_eq!(strict.status.code(), Some(3));
}

#[test]
fn lock_file_blocks_a_second_writer() {
    let dir = trained("1");
    let p = dir.path();
    std::fs::write(p.join("m.ckpt.lock"), "1\n").unwrap();
    let before = std::fs::read(p.join("m.ckpt")).unwrap();
    let again = encdec(p, &["train", "--config", tiny_conf().to_str().unwrap(), "--train-data", "data.txt", "--checkpoint", "m.ckpt"]);
    assert_eq!(again.status.code(), Some(2));
    assert!(p.join("m.ckpt.lock").exists());
    assert_eq!(std::fs::read(p.join("m.ckpt")).unwrap(), before);
}

#[test]
fn shape_mismatch_with_checkpoint_is_a_data_error() {
    let dir = trained("1");
    std::fs::write(dir.path().join("pairs.txt"), "w0\tw0\n").unwrap();
    let o = encdec(dir.path(), &["score", "--checkpoint", "m.ckpt", "--input", "pairs.txt", "--set", "hidden=9"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn config_echo_lists_every_key_once() {
    let dir = tempfile::tempdir().unwrap();
    let o = encdec(dir.path(), &["gen-toytask", "--pairs", "2", "--seed", "3"]);
    assert!(o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    for (key, _) in encdec_cli::config::KEYS {
        let needle = format!("  {key} = ");
        assert_eq!(err.matches(&needle).count(), 1, "{key}");
    }
    assert!(err.contains("  seed = 3\n"));
    assert_eq!(stdout(&o).lines().count(), 2);
}

#[test]
fn data_dir_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let elsewhere = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_encdec"))
        .current_dir(elsewhere.path())
        .env(encdec_cli::config::DATA_DIR_ENV, dir.path())
        .args(["gen-toytask", "--pairs", "3", "--output", "toy.txt"])
        .output()
        .unwrap();
    assert!(o.status.success());
    let text = std::fs::read_to_string(dir.path().join("toy.txt")).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(!elsewhere.path().join("toy.txt").exists());
}
