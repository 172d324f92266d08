use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use vtff::io::{read_pnm, write_pnm};
use vtff::synthetic::texture_color;

fn vtff(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vtff")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Class subdirectories of 32×32 PPM files.
fn write_dataset(root: &Path, per_class: usize, seed: u64) {
    let (images, names) = texture_color(per_class, 32, seed).unwrap();
    for (i, (img, label)) in images.iter().enumerate() {
        let dir = root.join(&names[*label]);
        fs::create_dir_all(&dir).unwrap();
        write_pnm(&dir.join(format!("{i:03}.ppm")), img).unwrap();
    }
}

const CONFIG: &str = r#"{
    "image_size": 32,
    "stage_channels": [4, 8, 16],
    "stage_strides": [2, 2, 2],
    "blocks_per_stage": 1,
    "n_layers": 1,
    "n_heads": 2,
    "embed_dim": 8,
    "mlp_hidden": 16,
    "n_classes": 4,
    "reduction_ratio": 2,
    "base_lr": 0.002,
    "warmup_steps": 2,
    "total_steps": 6,
    "batch_size": 4
}"#;

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&dir.path().join("data"), 2, 1);
        fs::write(dir.path().join("cfg.json"), CONFIG).unwrap();
        Self { dir }
    }

    fn path(&self, rel: &str) -> String {
        self.dir.path().join(rel).to_string_lossy().into_owned()
    }

    fn train(&self) -> Output {
        vtff(&["train", "--config", &self.path("cfg.json"), "--data", &self.path("data"), "--out", &self.path("run")])
    }
}

#[test]
fn train_then_eval_then_mcnemar() {
    let fx = Fixture::new();
    let out = fx.train();
    assert!(out.status.success(), "{}", stderr(&out));

    let log = fs::read_to_string(fx.path("run/log.txt")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), 6);
    for (i, line) in lines.iter().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        assert_eq!(fields.len(), 3);
        assert_eq!(fields[0], (i + 1).to_string());
        assert!(fields[2].parse::<f64>().unwrap().is_finite());
    }
    let saved: serde_json::Value = serde_json::from_str(&fs::read_to_string(fx.path("run/config.json")).unwrap()).unwrap();
    assert_eq!(saved["class_names"].as_array().unwrap().len(), 4);
    assert!(fs::metadata(fx.path("run/weights.vtff")).unwrap().len() > 0);

    let out = vtff(&[
        "eval",
        "--weights",
        &fx.path("run/weights.vtff"),
        "--data",
        &fx.path("data"),
        "--predictions",
        &fx.path("preds.json"),
        "--labels",
        &fx.path("labels.json"),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let report: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    let acc = report["overall_accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert_eq!(report["confusion_matrix"].as_array().unwrap().len(), 4);

    let out = vtff(&["mcnemar", "--a", &fx.path("preds.json"), "--b", &fx.path("preds.json"), "--labels", &fx.path("labels.json")]);
    assert!(out.status.success(), "{}", stderr(&out));
    let m: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!((m["b"].as_u64(), m["c"].as_u64(), m["p_value"].as_f64()), (Some(0), Some(0), Some(1.0)));
}

#[test]
fn training_is_deterministic() {
    let fx = Fixture::new();
    assert!(fx.train().status.success());
    let first = fs::read(fx.path("run/weights.vtff")).unwrap();
    let first_log = fs::read(fx.path("run/log.txt")).unwrap();
    assert!(fx.train().status.success());
    assert_eq!(first, fs::read(fx.path("run/weights.vtff")).unwrap());
    assert_eq!(first_log, fs::read(fx.path("run/log.txt")).unwrap());
}

#[test]
fn attn_writes_upscaled_heatmaps() {
    let fx = Fixture::new();
    assert!(fx.train().status.success());
    let image = fx.path("data/class0/000.ppm");
    let out = vtff(&["attn", "--weights", &fx.path("run/weights.vtff"), "--out", &fx.path("maps"), &image]);
    assert!(out.status.success(), "{}", stderr(&out));
    let heat = read_pnm(&fx.dir.path().join("maps/000.attn.pgm")).unwrap();
    assert_eq!((heat.height(), heat.width(), heat.channels()), (32, 32, 1));
}

#[test]
fn ablate_prints_one_row_per_variant() {
    let fx = Fixture::new();
    write_dataset(&fx.dir.path().join("test"), 1, 2);
    let out = vtff(&[
        "ablate",
        "--config",
        &fx.path("cfg.json"),
        "--train",
        &fx.path("data"),
        "--test",
        &fx.path("test"),
        "--variants",
        "baseline,full",
        "--seeds",
        "0",
        "--out",
        &fx.path("table.txt"),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let table = fs::read_to_string(fx.path("table.txt")).unwrap();
    assert_eq!(table.lines().count(), 3);
    assert!(table.lines().nth(1).unwrap().starts_with("baseline"));
    assert!(table.lines().nth(2).unwrap().starts_with("full"));
    assert_eq!(stdout(&out), table.lines().skip(1).map(|l| format!("{l}\n")).collect::<String>());
}

#[test]
fn failures_exit_nonzero_with_a_message() {
    let fx = Fixture::new();
    let cases: Vec<(Vec<String>, &str)> = vec![
        (vec!["train".into(), "--bogus".into()], "--bogus"),
        (
            vec!["eval".into(), "--weights".into(), fx.path("missing.vtff"), "--data".into(), fx.path("data")],
            "config.json",
        ),
        (
            vec!["train".into(), "--data".into(), fx.path("nowhere"), "--out".into(), fx.path("run")],
            "nowhere",
        ),
        (vec!["ablate".into(), "--train".into(), fx.path("data"), "--test".into(), fx.path("data"), "--variants".into(), "best".into()], "best"),
    ];
    for (args, needle) in cases {
        let args: Vec<&str> = args.iter().map(String::as_str).collect();
        let out = vtff(&args);
        assert!(!out.status.success(), "{args:?} succeeded");
        assert!(stderr(&out).contains(needle), "{args:?}: {}", stderr(&out));
        assert!(stdout(&out).is_empty());
    }
    fs::write(fx.path("bad.json"), r#"{"learning_rate": 1}"#).unwrap();
    let out = vtff(&["train", "--config", &fx.path("bad.json"), "--data", &fx.path("data"), "--out", &fx.path("run")]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("learning_rate"), "{}", stderr(&out));
}
