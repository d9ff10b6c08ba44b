use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const SMALL: &str = "epochs = 2\nbatch_size = 2\nstages = 2\nfeatures = 8\nnum_classes = 4\n";

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_bayesseg"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn bayesseg")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert_eq!(
        code(&out),
        0,
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        let f = Fixture {
            dir: tempfile::tempdir().unwrap(),
        };
        ok(&[
            "synth",
            "--out",
            s(&f.path("data")),
            "--count",
            "4",
            "--seed",
            "1",
            "--size",
            "16x16",
        ]);
        f
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn train(&self, cfg: &str, name: &str) -> PathBuf {
        let cfg_path = self.path(&format!("{name}.cfg"));
        fs::write(&cfg_path, cfg).unwrap();
        let ckpt = self.path(&format!("{name}.ckpt"));
        ok(&[
            "train",
            "--config",
            s(&cfg_path),
            "--data",
            s(&self.path("data")),
            "--out",
            s(&ckpt),
        ]);
        ckpt
    }

    fn eval(&self, ckpt: &Path, mode: &str, extra: &[&str], report: &str) -> PathBuf {
        let dir = self.path(report);
        let data = self.path("data");
        let mut args = vec![
            "eval",
            "--ckpt",
            s(ckpt),
            "--data",
            s(&data),
            "--mode",
            mode,
        ];
        args.extend_from_slice(extra);
        args.extend_from_slice(&["--report-dir", s(&dir)]);
        ok(&args);
        dir
    }
}

fn read_dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().into_string().unwrap(),
                fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

#[test]
fn synth_writes_pairs_and_is_reproducible() {
    let f = Fixture::new();
    let files = read_dir_bytes(&f.path("data"));
    assert_eq!(files.len(), 9);
    assert_eq!(files.iter().filter(|(n, _)| n.ends_with(".ppm")).count(), 4);
    assert!(files.iter().any(|(n, _)| n == "manifest.txt"));

    ok(&[
        "synth",
        "--out",
        s(&f.path("again")),
        "--count",
        "4",
        "--seed",
        "1",
        "--size",
        "16x16",
    ]);
    assert_eq!(files, read_dir_bytes(&f.path("again")));
}

#[test]
fn flag_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    assert_eq!(
        code(&run(&[
            "synth",
            "--out",
            s(&out),
            "--count",
            "1",
            "--classes",
            "1"
        ])),
        2
    );
    assert_eq!(
        code(&run(&[
            "synth",
            "--out",
            s(&out),
            "--count",
            "1",
            "--size",
            "16by16"
        ])),
        2
    );
    assert_eq!(code(&run(&["eval", "--mode", "both"])), 2);
    assert_eq!(code(&run(&["frobnicate"])), 2);
    assert!(!out.exists());
}

#[test]
fn help_succeeds_for_every_subcommand() {
    for sub in ["synth", "train", "eval", "predict", "study", "gradcheck"] {
        let out = ok(&[sub, "--help"]);
        assert!(String::from_utf8(out.stdout).unwrap().contains("Usage"));
    }
}

#[test]
fn training_is_deterministic_and_eval_reports_repeat() {
    let f = Fixture::new();
    let a = f.train(SMALL, "a");
    let b = f.train(SMALL, "b");
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());

    let r1 = f.eval(&a, "wa", &[], "wa1");
    let r2 = f.eval(&a, "wa", &[], "wa2");
    let names: Vec<_> = read_dir_bytes(&r1).into_iter().map(|(n, _)| n).collect();
    assert_eq!(
        names,
        ["class_uncertainty.csv", "metrics.csv", "percentiles.csv"]
    );
    assert_eq!(read_dir_bytes(&r1), read_dir_bytes(&r2));
}

#[test]
fn training_log_is_written() {
    let f = Fixture::new();
    let cfg = f.path("run.cfg");
    fs::write(&cfg, SMALL).unwrap();
    let log = f.path("log.csv");
    ok(&[
        "train",
        "--config",
        s(&cfg),
        "--data",
        s(&f.path("data")),
        "--out",
        s(&f.path("m.ckpt")),
        "--log",
        s(&log),
    ]);
    let text = fs::read_to_string(log).unwrap();
    let lines: Vec<_> = text.lines().collect();
    assert_eq!(lines[0], "epoch,loss,train_global_acc");
    assert_eq!(lines.len(), 3);
}

#[test]
fn no_dropout_makes_mc_equal_wa() {
    let f = Fixture::new();
    let ckpt = f.train(&format!("{SMALL}dropout_variant = none\n"), "plain");
    let wa = f.eval(&ckpt, "wa", &[], "wa");
    let mc = f.eval(&ckpt, "mc", &["--samples", "3"], "mc");
    assert_eq!(
        fs::read(wa.join("metrics.csv")).unwrap(),
        fs::read(mc.join("metrics.csv")).unwrap()
    );

    let image = f.path("data").join("img_00000.ppm");
    let (seg, unc) = (f.path("seg.pgm"), f.path("unc.pgm"));
    ok(&[
        "predict",
        "--ckpt",
        s(&ckpt),
        "--image",
        s(&image),
        "--out-seg",
        s(&seg),
        "--out-unc",
        s(&unc),
        "--samples",
        "3",
    ]);
    let gray = fs::read(unc).unwrap();
    assert!(gray.ends_with(&[128u8; 256]));
}

#[test]
fn single_sample_has_zero_variance() {
    let f = Fixture::new();
    let ckpt = f.train(SMALL, "m");
    let rep = f.eval(&ckpt, "mc", &["--samples", "1"], "mc1");
    let text = fs::read_to_string(rep.join("class_uncertainty.csv")).unwrap();
    for line in text.lines().skip(1).filter(|l| !l.starts_with("spearman")) {
        let unc = line.split(',').nth(1).unwrap();
        assert!(
            unc.is_empty() || unc.parse::<f64>().unwrap() == 0.0,
            "{line}"
        );
    }
}

#[test]
fn class_count_mismatch_exits_five() {
    let f = Fixture::new();
    let ckpt = f.train(
        &SMALL.replace("num_classes = 4", "num_classes = 4\ninit_seed = 3"),
        "m",
    );
    ok(&[
        "synth",
        "--out",
        s(&f.path("three")),
        "--count",
        "2",
        "--classes",
        "3",
        "--size",
        "16x16",
    ]);
    let out = run(&[
        "eval",
        "--ckpt",
        s(&ckpt),
        "--data",
        s(&f.path("three")),
        "--mode",
        "wa",
        "--report-dir",
        s(&f.path("rep")),
    ]);
    assert_eq!(code(&out), 5);
    assert!(!f.path("rep").exists());

    // training config disagreeing with the data
    let cfg = f.path("bad.cfg");
    fs::write(&cfg, SMALL).unwrap();
    let out = run(&[
        "train",
        "--config",
        s(&cfg),
        "--data",
        s(&f.path("three")),
        "--out",
        s(&f.path("x")),
    ]);
    assert_eq!(code(&out), 5);
}

#[test]
fn predict_is_seeded_and_checks_extents() {
    let f = Fixture::new();
    let ckpt = f.train(SMALL, "m");
    let image = f.path("data").join("img_00001.ppm");
    let outputs = |tag: &str, seed: &str| {
        let names = [
            format!("seg{tag}.pgm"),
            format!("unc{tag}.pgm"),
            format!("vr{tag}.pgm"),
        ];
        let paths: Vec<PathBuf> = names.iter().map(|n| f.path(n)).collect();
        ok(&[
            "predict",
            "--ckpt",
            s(&ckpt),
            "--image",
            s(&image),
            "--out-seg",
            s(&paths[0]),
            "--out-unc",
            s(&paths[1]),
            "--samples",
            "4",
            "--seed",
            seed,
            "--variation-ratio",
            s(&paths[2]),
        ]);
        paths
            .iter()
            .map(|p| fs::read(p).unwrap())
            .collect::<Vec<_>>()
    };
    let first = outputs("a", "7");
    assert_eq!(first, outputs("b", "7"));
    assert!(first[0].starts_with(b"P5\n16 16\n255\n"));
    assert!(first[1].starts_with(b"P5"));

    ok(&[
        "synth",
        "--out",
        s(&f.path("odd")),
        "--count",
        "1",
        "--size",
        "18x18",
    ]);
    let out = run(&[
        "predict",
        "--ckpt",
        s(&ckpt),
        "--image",
        s(&f.path("odd").join("img_00000.ppm")),
        "--out-seg",
        s(&f.path("o.pgm")),
        "--out-unc",
        s(&f.path("ou.pgm")),
    ]);
    assert_eq!(code(&out), 5);
    assert!(!String::from_utf8_lossy(&out.stderr).trim().is_empty());
}

#[test]
fn study_writes_mean_and_std() {
    let f = Fixture::new();
    let ckpt = f.train(SMALL, "m");
    let out = f.path("study.csv");
    ok(&[
        "study",
        "--ckpt",
        s(&ckpt),
        "--data",
        s(&f.path("data")),
        "--t-list",
        "1",
        "--trials",
        "2",
        "--out",
        s(&out),
    ]);
    let text = fs::read_to_string(out).unwrap();
    let lines: Vec<_> = text.lines().collect();
    assert_eq!(lines[0], "T,mean,std");
    assert!(lines[1].starts_with("1,"));
    assert!(lines[2].starts_with("wa,"));
    assert_eq!(lines.len(), 3);
}

#[test]
fn missing_and_corrupt_inputs_exit_three() {
    let f = Fixture::new();
    let junk = f.path("junk.ckpt");
    fs::write(&junk, b"not a checkpoint").unwrap();
    for ckpt in [junk, f.path("absent.ckpt")] {
        let out = run(&[
            "eval",
            "--ckpt",
            s(&ckpt),
            "--data",
            s(&f.path("data")),
            "--mode",
            "wa",
            "--report-dir",
            s(&f.path("r")),
        ]);
        assert_eq!(code(&out), 3);
    }
    let cfg = f.path("typo.cfg");
    fs::write(&cfg, "epochs = 2\nlearnin_rate = 0.1\n").unwrap();
    let out = run(&[
        "train",
        "--config",
        s(&cfg),
        "--data",
        s(&f.path("data")),
        "--out",
        s(&f.path("x")),
    ]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains(":2:"));
}

#[test]
fn diverging_training_exits_four() {
    let f = Fixture::new();
    let cfg = f.path("hot.cfg");
    fs::write(&cfg, format!("{SMALL}learning_rate = 1e30\n")).unwrap();
    let ckpt = f.path("hot.ckpt");
    let out = run(&[
        "train",
        "--config",
        s(&cfg),
        "--data",
        s(&f.path("data")),
        "--out",
        s(&ckpt),
    ]);
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!ckpt.exists());
}

#[test]
fn gradcheck_passes_and_catches_a_broken_adjoint() {
    let a = ok(&["gradcheck", "--seed", "3"]);
    let b = ok(&["gradcheck", "--seed", "3"]);
    assert_eq!(a.stdout, b.stdout);
    assert_eq!(String::from_utf8(a.stdout).unwrap().lines().count(), 7);

    let bad = run(&["gradcheck", "--inject-fault", "batchnorm"]);
    assert_eq!(code(&bad), 1);
    assert!(String::from_utf8_lossy(&bad.stderr).contains("batchnorm"));
}
