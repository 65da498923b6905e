use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "t1 = 1\nt2 = 1\nt3 = 1\nupper_epochs = 1\nbatch_size = 8\nlr = 0.003\n";

fn owdfa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_owdfa")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn generate_small(dir: &Path) {
    let out = owdfa(&[
        "generate",
        "--out",
        dir.to_str().unwrap(),
        "--seed",
        "3",
        "--labeled-per-known",
        "8",
        "--unlabeled-per-class",
        "8",
        "--test-per-class",
        "4",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

fn train(data: &Path, out: &Path, cfg: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    owdfa(&args)
}

#[test]
fn train_all_then_report_and_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, run) = (tmp.path().join("data"), tmp.path().join("run"));
    generate_small(&data);
    let cfg = tmp.path().join("tiny.cfg");
    std::fs::write(&cfg, TINY).unwrap();

    let out = train(&data, &run, &cfg, &["--stage", "all"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in [
        "stage1-pretrain.ckpt",
        "stage2-cpl.ckpt",
        "stage3-iterative.ckpt",
        "upper-bound.ckpt",
        "pseudo.labels.bin",
        "report.txt",
        "report.csv",
        "curves.dat",
        "pairs.csv",
        "timing.txt",
    ] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    let report_txt = std::fs::read_to_string(run.join("report.txt")).unwrap();
    assert!(!report_txt.contains("wall"), "timings stay out of the report");

    let rep = owdfa(&["report", "--run", run.to_str().unwrap()]);
    assert!(rep.status.success());
    let table = stdout(&rep);
    for col in ["ACC-K", "ACC-N", "ACC-A", "S1-Pretrain", "S2-CPL", "S3-IL", "Upper"] {
        assert!(table.contains(col), "{col} missing from\n{table}");
    }

    let csv = owdfa(&["report", "--run", run.to_str().unwrap(), "--run", run.to_str().unwrap(), "--csv"]);
    assert!(csv.status.success());
    assert!(stdout(&csv).contains("run/S2-CPL,"));

    let ev = owdfa(&[
        "eval",
        "--data",
        data.to_str().unwrap(),
        "--ckpt",
        run.join("stage2-cpl.ckpt").to_str().unwrap(),
    ]);
    assert!(ev.status.success());
    assert!(stdout(&ev).contains("stage2-cpl"));
}

#[test]
fn staged_training_resumes_and_enforces_order() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    generate_small(&data);
    let cfg = tmp.path().join("tiny.cfg");
    std::fs::write(&cfg, TINY).unwrap();
    let (r1, r2) = (tmp.path().join("r1"), tmp.path().join("r2"));

    assert!(train(&data, &r1, &cfg, &["--stage", "1"]).status.success());
    let s1 = r1.join("stage1-pretrain.ckpt");
    let out = train(&data, &r2, &cfg, &["--stage", "2", "--resume", s1.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    // stage 3 needs a stage-2 checkpoint
    let out = train(&data, &r2, &cfg, &["--stage", "3", "--resume", s1.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(5));
    assert!(String::from_utf8_lossy(&out.stderr).contains("incompatible checkpoint"));
}

#[test]
fn failures_have_distinct_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    generate_small(&data);
    let run = tmp.path().join("run");

    let bad = tmp.path().join("bad.cfg");
    std::fs::write(&bad, "ETA_4 = 1\n").unwrap();
    let out = train(&data, &run, &bad, &[]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("ETA_4"));

    let good = tmp.path().join("tiny.cfg");
    std::fs::write(&good, TINY).unwrap();
    let out = train(&data, &run, &good, &["--ablation", "gr+glv"]);
    assert_eq!(out.status.code(), Some(4));

    let out = train(&tmp.path().join("nowhere"), &run, &good, &[]);
    assert_eq!(out.status.code(), Some(3));
    let out = train(&data, &run, &tmp.path().join("missing.cfg"), &[]);
    assert_eq!(out.status.code(), Some(3));

    let junk = tmp.path().join("junk.ckpt");
    std::fs::write(&junk, b"definitely not a checkpoint").unwrap();
    let out = owdfa(&["eval", "--data", data.to_str().unwrap(), "--ckpt", junk.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(6));

    let out = owdfa(&["report", "--run", tmp.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
}
