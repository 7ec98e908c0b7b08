use std::{
    fs,
    path::Path,
    process::{Command, Output},
};

fn ffce(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ffce"))
        .args(args)
        .env("FFCE_THREADS", "2")
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn synth_train_infer_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("d");
    let out = ffce(&[
        "synth",
        "--seed",
        "7",
        "--volumes",
        "4",
        "--dims",
        "32,32,32",
        "--classes",
        "5",
        "--out",
        s(&d),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let files = fs::read_dir(&d).unwrap().count();
    assert_eq!(files, 9);
    assert_eq!(fs::read_to_string(d.join("train.tsv")).unwrap().lines().count(), 4);

    let (ckpt, manifest) = (dir.path().join("ckpt"), d.join("train.tsv"));
    let train = [
        "train",
        "--manifest",
        s(&manifest),
        "--epochs",
        "1",
        "--base-lr",
        "0.01",
        "--classes",
        "5",
        "--stack",
        "4",
        "--channels",
        "4",
        "--codewords",
        "2",
        "--kernel",
        "3",
        "--batch-size",
        "16",
        "--out",
        s(&ckpt),
    ];
    let out = ffce(&train);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(fs::metadata(&ckpt).unwrap().len() > 0);

    let seg = dir.path().join("seg.mvol");
    let out = ffce(&[
        "infer",
        "--ckpt",
        s(&ckpt),
        "--in",
        s(&d.join("vol_000.mvol")),
        "--out",
        s(&seg),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    let report = dir.path().join("r.json");
    let out = ffce(&[
        "eval",
        "--pred",
        s(&seg),
        "--gt",
        s(&d.join("lab_000.mvol")),
        "--report",
        s(&report),
        "--classes",
        "5",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(v["per_class"].as_array().unwrap().len(), 5);
    assert!((0.0..=1.0).contains(&v["mean_dice"].as_f64().unwrap()));

    let csv = dir.path().join("r.csv");
    assert_eq!(code(&ffce(&["report", "--in", s(&report), "--out", s(&csv)])), 0);
    assert!(fs::read_to_string(&csv)
        .unwrap()
        .lines()
        .last()
        .unwrap()
        .starts_with("MEAN,"));
    assert_eq!(
        code(&ffce(&[
            "report",
            "--in",
            s(&report),
            "--out",
            s(&csv),
            "--format",
            "xml"
        ])),
        1
    );

    // resume with a different architecture is a data error
    let mut mismatched = train.to_vec();
    mismatched.extend(["--resume", s(&ckpt)]);
    let at = mismatched.iter().position(|&a| a == "--codewords").unwrap();
    mismatched[at + 1] = "3";
    assert_eq!(code(&ffce(&mismatched)), 2);
}

#[test]
fn resumed_cli_training_matches_uninterrupted() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("d");
    assert_eq!(
        code(&ffce(&[
            "synth",
            "--volumes",
            "1",
            "--dims",
            "16,16,16",
            "--classes",
            "3",
            "--out",
            s(&d)
        ])),
        0
    );
    let m = d.join("train.tsv");
    let base = [
        "train",
        "--manifest",
        s(&m),
        "--epochs",
        "2",
        "--classes",
        "3",
        "--stack",
        "2",
        "--channels",
        "4",
        "--codewords",
        "2",
        "--kernel",
        "3",
        "--batch-size",
        "4",
        "--seed",
        "3",
    ];
    let (full, half, resumed) = (
        dir.path().join("full"),
        dir.path().join("half"),
        dir.path().join("resumed"),
    );
    let run = |extra: &[&str]| code(&ffce(&[&base[..], extra].concat()));
    assert_eq!(run(&["--out", s(&full)]), 0);
    assert_eq!(run(&["--out", s(&half), "--until", "1"]), 0);
    assert_eq!(run(&["--out", s(&resumed), "--resume", s(&half)]), 0);
    assert_eq!(fs::read(&full).unwrap(), fs::read(&resumed).unwrap());
    assert_ne!(fs::read(&full).unwrap(), fs::read(&half).unwrap());
}

#[test]
fn usage_errors_exit_one() {
    for args in [
        &["frobnicate"][..],
        &["synth", "--bogus"],
        &["eval", "--pred", "x"],
        &[],
    ] {
        let out = ffce(args);
        assert_eq!(code(&out), 1, "{args:?}");
        assert!(!out.stderr.is_empty());
    }
    assert_eq!(code(&ffce(&["--help"])), 0);
}

#[test]
fn data_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.mvol");
    fs::write(&bad, b"MVOX\x01\x01\x00\x00").unwrap();
    let out = ffce(&[
        "eval",
        "--pred",
        s(&bad),
        "--gt",
        s(&bad),
        "--report",
        s(&dir.path().join("r.json")),
    ]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("byte"));

    let missing = dir.path().join("nope.ffck");
    let out = ffce(&["infer", "--ckpt", s(&missing), "--in", s(&bad), "--out", s(&bad)]);
    assert_eq!(code(&out), 2);

    let ckpt = dir.path().join("c.ffck");
    fs::write(&ckpt, b"FFCK\x09\x00\x00\x00").unwrap();
    let out = ffce(&["infer", "--ckpt", s(&ckpt), "--in", s(&bad), "--out", s(&bad)]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("version"));

    let out = ffce(&["synth", "--dims", "4,4,4", "--classes", "5", "--out", s(dir.path())]);
    assert_eq!(code(&out), 2);
}
