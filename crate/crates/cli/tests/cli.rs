use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn mstf(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mstf"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = mstf(dir, args);
    assert!(
        out.status.success(),
        "mstf {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

const TINY: &str = r#"
[detector]
input_size = 64
stem_widths = [8, 8]
widths = [16, 16, 16]
head_width = 16
fusion_start_epoch = 1
augmentation = [0.0, 0.0, 0.0]

[detector.mstf]
corr_dim = 8

[detector.mstf.lookup]
radii = [2, 2, 1]

[train]
epochs = 3
batch_clips = 2
"#;

/// Two 64 px videos of 8 frames and the tiny model config.
fn fixture(dir: &Path) {
    ok(dir, &["synth", "--spec", "es-only", "--seed", "3", "--out", "data", "--videos", "2", "--frames", "8", "--size", "64"]);
    fs::write(dir.join("tiny.toml"), TINY).unwrap();
}

#[test]
fn version_lists_code_and_format_versions() {
    let dir = tempfile::tempdir().unwrap();
    let v = ok(dir.path(), &["--version"]);
    assert!(v.contains(env!("CARGO_PKG_VERSION")));
    for part in ["annotation format", "eval format", "checkpoint format"] {
        assert!(v.contains(part), "{v}");
    }
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = mstf(dir.path(), &["synth", "--spec", "mixed"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--out"));
    assert_eq!(mstf(dir.path(), &["synth", "--spec", "nonsense", "--out", "x"]).status.code(), Some(2));
    assert_eq!(mstf(dir.path(), &["frobnicate"]).status.code(), Some(2));

    fs::write(dir.path().join("typo.toml"), "[detector]\ninput_sise = 64\n").unwrap();
    let out = mstf(dir.path(), &["--config", "typo.toml", "synth", "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("input_sise"));
}

#[test]
fn synth_is_deterministic_and_flags_override_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("c.toml"), "seed = 3\n").unwrap();
    ok(d, &["--config", "c.toml", "synth", "--spec", "mixed", "--seed", "7", "--out", "a", "--videos", "2", "--frames", "4"]);
    ok(d, &["synth", "--spec", "mixed", "--seed", "7", "--out", "b", "--videos", "2", "--frames", "4"]);
    let a = fs::read(d.join("a/annotations.json")).unwrap();
    assert_eq!(a, fs::read(d.join("b/annotations.json")).unwrap());
    let frame = "frames/mixed_0001/000003.png";
    assert_eq!(fs::read(d.join("a").join(frame)).unwrap(), fs::read(d.join("b").join(frame)).unwrap());
    let snap: toml::Value = toml::from_str(&fs::read_to_string(d.join("a/resolved_config.toml")).unwrap()).unwrap();
    assert_eq!(snap["subcommand"].as_str(), Some("synth"));
    assert_eq!(snap["config"]["seed"].as_integer(), Some(7));
}

#[test]
fn es_only_synth_has_only_es_boxes() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    let set = json(&dir.path().join("data/annotations.json"));
    let anns = set["annotations"].as_array().unwrap();
    assert!(!anns.is_empty());
    assert!(anns.iter().all(|a| a["area"].as_f64().unwrap() < 144.0));
}

#[test]
fn stats_formats_agree_with_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth", "--spec", "mixed", "--seed", "7", "--out", "data", "--videos", "3", "--frames", "6"]);
    let report: Value = serde_json::from_str(&ok(d, &["stats", "--annotations", "data/annotations.json"])).unwrap();
    let manifest = json(&d.join("data/manifest.json"));
    assert_eq!(report["objects"], manifest["objects"]);
    assert_eq!(report["tracks"], manifest["tracks"]);
    for b in manifest["buckets"].as_array().unwrap() {
        let r = report["buckets"].as_array().unwrap().iter().find(|r| r["name"] == b["name"]).unwrap();
        assert_eq!(r["count"], b["count"]);
    }
    let csv = ok(d, &["stats", "--annotations", "data/annotations.json", "--format", "csv"]);
    let mut rdr = csv::Reader::from_reader(csv.as_bytes());
    for row in rdr.records() {
        let row = row.unwrap();
        match (&row[0], &row[1], &row[2]) {
            ("summary", "objects", "count") => assert_eq!(row[3].parse::<u64>().unwrap(), report["objects"].as_u64().unwrap()),
            ("summary", "median_area", "value") => {
                assert_eq!(row[3].parse::<f64>().unwrap(), report["median_area"].as_f64().unwrap())
            }
            ("bucket", name, "count") => {
                let r = report["buckets"].as_array().unwrap().iter().find(|r| r["name"] == name).unwrap();
                assert_eq!(row[3].parse::<u64>().unwrap(), r["count"].as_u64().unwrap());
            }
            _ => {}
        }
    }
}

#[test]
fn eval_scores_ground_truth_and_reports_missing_files() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth", "--spec", "mixed", "--seed", "7", "--out", "data", "--videos", "2", "--frames", "4"]);
    let set = json(&d.join("data/annotations.json"));
    let preds: Vec<Value> = set["annotations"]
        .as_array()
        .unwrap()
        .iter()
        .map(|a| {
            serde_json::json!({
                "video_id": a["video_id"], "frame_index": a["frame_index"],
                "category_id": a["category_id"], "bbox": a["bbox"], "score": 1.0
            })
        })
        .collect();
    fs::write(d.join("gt.json"), serde_json::to_string(&preds).unwrap()).unwrap();
    ok(d, &["eval", "--annotations", "data/annotations.json", "--predictions", "gt.json", "--out", "r/eval.json"]);
    let r = json(&d.join("r/eval.json"));
    assert_eq!(r["ap"].as_f64(), Some(100.0));
    for b in r["buckets"].as_array().unwrap() {
        assert!(b["ap"].is_null() || b["ap"].as_f64() == Some(100.0), "{b}");
    }
    assert!(d.join("r/eval.config.toml").exists());

    let out = mstf(d, &["eval", "--annotations", "data/annotations.json", "--predictions", "missing/preds.json"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing/preds.json"));
}

#[test]
fn validate_flags_broken_annotations() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fixture(d);
    ok(d, &["validate", "--annotations", "data/annotations.json"]);
    let mut set = json(&d.join("data/annotations.json"));
    set["annotations"][0]["area"] = serde_json::json!(12345.0);
    fs::write(d.join("bad.json"), serde_json::to_string(&set).unwrap()).unwrap();
    let out = mstf(d, &["validate", "--annotations", "bad.json"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stdout).contains("area"));
    // lenient tools warn, strict ones refuse
    ok(d, &["stats", "--annotations", "bad.json"]);
    assert_eq!(mstf(d, &["--strict", "stats", "--annotations", "bad.json"]).status.code(), Some(1));
}

#[test]
fn train_resume_and_infer() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fixture(d);
    let cfg = ["--config", "tiny.toml"];
    let train = |extra: &[&str]| ok(d, &[&cfg[..], &["train", "--data", "data"], extra].concat());
    train(&["--out", "full"]);
    train(&["--out", "part", "--stop-after", "2"]);
    let clash = ["train", "--data", "data", "--out", "part", "--resume", "part/checkpoint.mstf", "--lr", "0.1"];
    assert_eq!(mstf(d, &clash).status.code(), Some(2));
    ok(d, &["train", "--data", "data", "--out", "part", "--resume", "part/checkpoint.mstf"]);
    let loss = |run: &str| json(&d.join(run).join("report.json"))["epochs"][2]["loss"].as_f64().unwrap();
    let (a, b) = (loss("full"), loss("part"));
    assert!((a - b).abs() <= 0.01 * a, "{a} vs {b}");
    let snap = fs::read_to_string(d.join("full/resolved_config.toml")).unwrap();
    assert!(snap.contains("fusion_start_epoch = 1"));

    train(&["--out", "static", "--split-ratio", "1:0", "--fusion-epoch", "0"]);
    let snap: toml::Value = toml::from_str(&fs::read_to_string(d.join("static/resolved_config.toml")).unwrap()).unwrap();
    assert_eq!(snap["config"]["detector"]["mstf"]["lookup"]["split_ratio"].as_str(), Some("1:0"));
    let bad = mstf(d, &[&cfg[..], &["train", "--data", "data", "--out", "x", "--fusion-epoch", "9"]].concat());
    assert_eq!(bad.status.code(), Some(2));

    let infer = |out: &str, extra: &[&str]| {
        let args = [&["infer", "--checkpoint", "full/checkpoint.mstf", "--data", "data", "--out", out], extra].concat();
        ok(d, &args)
    };
    let printed = infer("p1.json", &[]);
    assert!(printed.contains("median") && printed.contains("p95"));
    infer("p2.json", &[]);
    assert_eq!(fs::read(d.join("p1.json")).unwrap(), fs::read(d.join("p2.json")).unwrap());
    let lat = json(&d.join("p1.latency.json"));
    for k in ["mean_ms", "median_ms", "p95_ms"] {
        assert!(lat[k].as_f64().unwrap() > 0.0);
    }
    assert_eq!(lat["frames"].as_u64(), Some(16));
    // one state across both videos changes the second video's outputs only
    infer("carry.json", &["--reset-per-video", "false"]);
    let first_video = |p: &str| -> Vec<Value> {
        let v: Vec<Value> = serde_json::from_str(&fs::read_to_string(d.join(p)).unwrap()).unwrap();
        v.into_iter().filter(|x| x["video_id"] == 1).collect()
    };
    assert_eq!(first_video("p1.json"), first_video("carry.json"));
    ok(d, &["eval", "--annotations", "data/annotations.json", "--predictions", "p1.json"]);
}

#[test]
fn convert_tile_and_interpolate() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let coco = serde_json::json!({
        "videos": [{"id": 1, "name": "wide", "width": 400, "height": 200}],
        "images": [
            {"id": 1, "video_id": 1, "frame_id": 0, "file_name": "wide/0.png"},
            {"id": 2, "video_id": 1, "frame_id": 4, "file_name": "wide/4.png"}
        ],
        "annotations": [
            {"id": 1, "image_id": 1, "category_id": 9, "instance_id": 1, "bbox": [10, 10, 20, 20]},
            {"id": 2, "image_id": 2, "category_id": 9, "instance_id": 1, "bbox": [50, 10, 20, 20]}
        ],
        "categories": [{"id": 9, "name": "vehicle"}]
    });
    fs::write(d.join("coco.json"), coco.to_string()).unwrap();
    assert_eq!(mstf(d, &["convert", "--input", "coco.json", "--out", "a.json"]).status.code(), Some(2));
    ok(d, &["convert", "--input", "coco.json", "--out", "a.json", "--map", "vehicle=car"]);
    ok(d, &["validate", "--annotations", "a.json"]);

    let out = ok(d, &["interpolate", "--annotations", "a.json", "--out", "dense.json"]);
    assert!(out.contains("2 -> 5"), "{out}");
    let dense = json(&d.join("dense.json"));
    let mid = dense["annotations"].as_array().unwrap().iter().find(|a| a["frame_index"] == 2).unwrap();
    assert_eq!(mid["bbox"], serde_json::json!([30.0, 10.0, 20.0, 20.0]));

    ok(d, &["tile", "--annotations", "a.json", "--out", "t.json", "--crop", "200", "--output-size", "100"]);
    let t = json(&d.join("t.json"));
    assert_eq!(t["videos"].as_array().unwrap().len(), 2);
    assert!(d.join("t.provenance.json").exists());
}
