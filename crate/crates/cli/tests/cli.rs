use std::fs;
use std::path::Path;
use std::process::Command;

const SMALL: &str = r#"
seed = 1
[synth]
dim = 16
bag_size_min = 40
bag_size_max = 60
[splits]
train = 12
val = 4
test = 6
[division]
n = 8
[train]
epochs = 3
[eval]
corruption_ratios = [0.5]
lambda_grid = [0.0, 0.5, 1.0]
[augment]
count = 6
[bench]
sizes = [100, 200]
dim = 16
reps = 2
bags = 2
compare_m = 100
"#;

fn psemix(dir: &Path, args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_psemix"))
        .current_dir(dir)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn psemix")
}

fn ok(dir: &Path, args: &[&str]) {
    let out = psemix(dir, args);
    assert!(
        out.status.success(),
        "psemix {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    ok(
        dir.path(),
        &["gen", "--config", "small.toml", "--out", "data"],
    );
    dir
}

#[test]
fn full_pipeline_writes_every_artifact() {
    let dir = setup();
    let d = dir.path();
    let common = ["--config", "small.toml", "--data", "data/manifest.json"];
    ok(d, &[&["divide"][..], &common, &["--out", "div"]].concat());
    ok(d, &[&["augment"][..], &common, &["--out", "aug"]].concat());
    ok(d, &[&["train"][..], &common, &["--out", "tr"]].concat());
    ok(
        d,
        &[
            &["eval"][..],
            &common,
            &["--checkpoint", "tr/best.ckpt", "--out", "ev"],
        ]
        .concat(),
    );

    assert_eq!(fs::read_dir(d.join("data/bags")).unwrap().count(), 22);
    assert_eq!(fs::read_dir(d.join("div/partitions")).unwrap().count(), 22);
    assert_eq!(fs::read_dir(d.join("aug/bags")).unwrap().count(), 6);
    for f in [
        "tr/best.ckpt",
        "tr/last.ckpt",
        "tr/metrics.csv",
        "tr/config.toml",
        "div/timing.csv",
    ] {
        assert!(d.join(f).exists(), "{f}");
    }
    let metrics = fs::read_to_string(d.join("tr/metrics.csv")).unwrap();
    assert!(metrics.starts_with("epoch,train_loss,train_auc,val_loss,val_auc\n"));
    assert_eq!(metrics.lines().count(), 4);

    let eval = fs::read_to_string(d.join("ev/eval.csv")).unwrap();
    let protocols: Vec<&str> = eval
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap())
        .collect();
    for p in [
        "plain",
        "gap",
        "occlusion",
        "corruption_best",
        "corruption_last",
        "inbetween",
    ] {
        assert!(protocols.contains(&p), "{p} missing from\n{eval}");
    }
    assert_eq!(protocols.iter().filter(|&&p| p == "inbetween").count(), 3);
}

#[test]
fn reruns_are_byte_identical() {
    let dir = setup();
    let d = dir.path();
    let common = ["--config", "small.toml", "--data", "data/manifest.json"];
    for out in ["a", "b"] {
        ok(d, &[&["train"][..], &common, &["--out", out]].concat());
        ok(
            d,
            &[&["augment"][..], &common, &["--out", &format!("{out}_aug")]].concat(),
        );
    }
    for f in ["metrics.csv", "best.ckpt", "last.ckpt", "test.csv"] {
        assert_eq!(
            fs::read(d.join("a").join(f)).unwrap(),
            fs::read(d.join("b").join(f)).unwrap(),
            "{f}"
        );
    }
    assert_eq!(
        fs::read(d.join("a_aug/samples.json")).unwrap(),
        fs::read(d.join("b_aug/samples.json")).unwrap()
    );
}

#[test]
fn single_thread_matches_default_pool() {
    let dir = setup();
    let d = dir.path();
    let common = ["--config", "small.toml", "--data", "data/manifest.json"];
    ok(
        d,
        &[
            &["divide"][..],
            &common,
            &["--out", "one", "--threads", "1"],
        ]
        .concat(),
    );
    ok(
        d,
        &[
            &["divide"][..],
            &common,
            &["--out", "many", "--threads", "4"],
        ]
        .concat(),
    );
    for entry in fs::read_dir(d.join("one/partitions")).unwrap() {
        let name = entry.unwrap().file_name();
        assert_eq!(
            fs::read(d.join("one/partitions").join(&name)).unwrap(),
            fs::read(d.join("many/partitions").join(&name)).unwrap()
        );
    }
}

#[test]
fn seed_flag_overrides_config_and_is_persisted() {
    let dir = setup();
    let d = dir.path();
    ok(
        d,
        &[
            "gen",
            "--config",
            "small.toml",
            "--seed",
            "7",
            "--out",
            "g7",
        ],
    );
    let resolved = fs::read_to_string(d.join("g7/config.toml")).unwrap();
    assert!(resolved.starts_with("seed = 7\n"), "{resolved}");
    assert_ne!(
        fs::read(d.join("g7/bags/train_0000.psmx")).unwrap(),
        fs::read(d.join("data/bags/train_0000.psmx")).unwrap()
    );
}

#[test]
fn bad_input_fails_with_nonzero_exit() {
    let dir = setup();
    let d = dir.path();
    fs::write(d.join("typo.toml"), "[mix]\nalhpa = 1.0\n").unwrap();
    assert!(!psemix(d, &["gen", "--config", "typo.toml", "--out", "x"])
        .status
        .success());
    assert!(!psemix(d, &["train", "--out", "x"]).status.success());
    fs::write(d.join("data/bags/train_0000.psmx"), b"PSMX").unwrap();
    let out = psemix(
        d,
        &[
            "train",
            "--config",
            "small.toml",
            "--data",
            "data/manifest.json",
            "--out",
            "x",
        ],
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("train_0000"));
}

#[test]
fn bench_writes_summary() {
    let dir = setup();
    let d = dir.path();
    ok(d, &["bench", "--config", "small.toml", "--out", "b"]);
    let csv = fs::read_to_string(d.join("b/bench.csv")).unwrap();
    assert!(csv.starts_with("kind,method,m,d,reps,mean_s,median_s\n"));
    let summary: serde_json::Value =
        serde_json::from_slice(&fs::read(d.join("b/bench.json")).unwrap()).unwrap();
    assert!(summary["slope"].as_f64().unwrap().is_finite());
}
