use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use couplingflow::config::RunConfig;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_couplingflow"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn arg(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

#[test]
fn masks_dump_lists_change_set() {
    let o = run(&[
        "masks",
        "--kind",
        "checkerboard",
        "--shape",
        "1x2x2",
        "--phase",
        "0",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(
        stdout(&o).contains("change={(0,0),(1,1)}"),
        "{}",
        stdout(&o)
    );
}

#[test]
fn auroc_of_separated_sets_is_one() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("in.csv");
    let b = dir.path().join("ood.csv");
    fs::write(&a, "dataset,index,logp_nats\nin,0,2\nin,1,3\n").unwrap();
    fs::write(&b, "dataset,index,logp_nats\nood,0,0\nood,1,1\n").unwrap();
    let o = run(&["auroc", "--in", arg(&a), "--ood", arg(&b)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().next(), Some("1.0"));
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(
        &cfg,
        "data.train = synthetic:blobs:10:4:0\narch.shape = 1x4x4\ntrain.learning_rate = 0.1\n",
    )
    .unwrap();
    let o = run(&["train", "--config", arg(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    let first = stderr(&o).lines().next().unwrap_or("").to_string();
    assert!(first.starts_with("error: config: "), "{first}");
    assert!(first.contains("train.learning_rate"), "{first}");
}

#[test]
fn usage_errors_exit_two() {
    let o = run(&["masks", "--kind", "diagonal", "--shape", "1x2x2"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error: usage: "), "{}", stderr(&o));
    let o = run(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_input_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&[
        "auroc",
        "--in",
        arg(&dir.path().join("nope.csv")),
        "--ood",
        arg(&dir.path().join("nope.csv")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error: io: "), "{}", stderr(&o));
}

#[test]
fn recipes_parse() {
    let recipes = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../recipes");
    let mut seen = 0;
    for entry in fs::read_dir(&recipes).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "cfg") {
            let text = fs::read_to_string(&path).unwrap();
            RunConfig::parse(&text, &path.display().to_string())
                .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            seen += 1;
        }
    }
    assert_eq!(seen, 4);
}

const TINY: &str = "\
run.seed = 3
arch.shape = 1x4x4
arch.layout = multiscale
arch.scales = 2
arch.per_half = 1
arch.hidden = 8
arch.blocks = 1
arch.batch_norm = true
train.batch_size = 8
train.epochs = 2
train.steps_per_epoch = 5
train.metric_examples = 16
data.train = idx:train.idx
";

#[test]
fn train_score_pipeline_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = run(&[
        "gen-data",
        "--family",
        "blobs",
        "--n",
        "40",
        "--resolution",
        "4",
        "--seed",
        "1",
        "--out",
        arg(&d.join("train.idx")),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    fs::write(d.join("run.cfg"), TINY).unwrap();

    let a = d.join("a");
    let o = run(&[
        "train",
        "--config",
        arg(&d.join("run.cfg")),
        "--output-dir",
        arg(&a),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["checkpoint.cflw", "metrics.csv", "config.cfg"] {
        assert!(a.join(f).exists(), "{f} missing");
    }
    let metrics = fs::read_to_string(a.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 4);

    // the resolved config alone reruns the experiment
    let b = d.join("b");
    let o = run(&[
        "train",
        "--config",
        arg(&a.join("config.cfg")),
        "--output-dir",
        arg(&b),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["checkpoint.cflw", "metrics.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap());
    }

    let score = |ckpt: &Path, out: &Path| {
        let o = run(&[
            "score",
            "--checkpoint",
            arg(ckpt),
            "--data",
            "synthetic:patches:20:4:5",
            "--name",
            "patches",
            "--out",
            arg(out),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        fs::read(out).unwrap()
    };
    let s1 = score(&a.join("checkpoint.cflw"), &d.join("s1.csv"));
    let s2 = score(&b.join("checkpoint.cflw"), &d.join("s2.csv"));
    assert_eq!(s1, s2);
    assert_eq!(String::from_utf8(s1).unwrap().lines().count(), 21);

    let o = run(&["hist", "--scores", arg(&d.join("s1.csv")), "--bins", "5"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().count(), 1 + 5 + 2);

    let vis = d.join("vis");
    let o = run(&[
        "visualize",
        "--checkpoint",
        arg(&a.join("checkpoint.cflw")),
        "--data",
        &format!("idx:{}", arg(&d.join("train.idx"))),
        "--out",
        arg(&vis),
        "--count",
        "2",
        "--noise-samples",
        "3",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let sidecar = fs::read_to_string(vis.join("images.csv")).unwrap();
    assert!(sidecar.starts_with("file,min,max\n"));
    for line in sidecar.lines().skip(1) {
        let file = line.split(',').next().unwrap();
        let bytes = fs::read(vis.join(file)).unwrap();
        assert!(
            bytes.starts_with(b"P5\n") || bytes.starts_with(b"P6\n"),
            "{file}"
        );
    }

    let res = d.join("res");
    let o = run(&[
        "resample",
        "--checkpoint",
        arg(&a.join("checkpoint.cflw")),
        "--data",
        "synthetic:blobs:3:4:9",
        "--out",
        arg(&res),
        "--region",
        "1,1,2",
        "--samples",
        "2",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(fs::read_dir(&res).unwrap().count() >= 4);
}
