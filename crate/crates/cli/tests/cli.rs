use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &[&str] = &[
    "--set",
    "data.train_scenes=4",
    "--set",
    "data.held_out_scenes=2",
    "--set",
    "model.dim=8",
    "--set",
    "train.steps=2",
    "--set",
    "train.batch=2",
    "--set",
    "sample.steps=3",
    "--set",
    "sample.record_steps=[0, 2]",
];

fn compose(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_compose"))
        .arg("--out")
        .arg(out)
        .args(args)
        .env("PICS_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: &Path, args: &[&str]) -> Output {
    let o = compose(out, args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    o
}

fn json(path: impl AsRef<Path>) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn corpus_generation_is_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    ok(a.path(), &["gen-corpus", "--count", "3"]);
    ok(b.path(), &["gen-corpus", "--count", "3"]);
    let manifest = fs::read(a.path().join("manifest.json")).unwrap();
    assert_eq!(manifest, fs::read(b.path().join("manifest.json")).unwrap());
    let m: Value = serde_json::from_slice(&manifest).unwrap();
    assert_eq!(m["scenes"].as_array().unwrap().len(), 3);
    for file in ["image.ppm", "instances.json", "mask_00.pgm"] {
        let rel = Path::new("scenes/scene_0002").join(file);
        assert_eq!(fs::read(a.path().join(&rel)).unwrap(), fs::read(b.path().join(&rel)).unwrap());
    }

    let c = tempfile::tempdir().unwrap();
    ok(c.path(), &["--seed", "9", "gen-corpus", "--count", "3"]);
    assert_ne!(manifest, fs::read(c.path().join("manifest.json")).unwrap());
}

#[test]
fn select_writes_one_record_per_image() {
    let dir = tempfile::tempdir().unwrap();
    let ann = dir.path().join("ann.jsonl");
    fs::write(
        &ann,
        concat!(
            r#"{"image": "a.png", "boxes": [[0,0,10,10],[5,5,15,15],[20,20,24,24]]}"#,
            "\n\n",
            r#"{"image": "b.png", "boxes": [[0,0,10,10],[5,5,15,15]]}"#,
            "\n",
        ),
    )
    .unwrap();
    ok(dir.path(), &["select", "--annotations", ann.to_str().unwrap()]);
    let lines: Vec<Value> = fs::read_to_string(dir.path().join("selection.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0]["selected"], serde_json::json!([0, 1]));
    // Two boxes trip the length guard.
    assert!(lines[1]["selected"].is_null());

    // The relaxed guard accepts it.
    ok(dir.path(), &["--set", "data.literal_guard=false", "select", "--annotations", ann.to_str().unwrap()]);
    let text = fs::read_to_string(dir.path().join("selection.jsonl")).unwrap();
    let second: Value = serde_json::from_str(text.lines().nth(1).unwrap()).unwrap();
    assert_eq!(second["selected"], serde_json::json!([0, 1]));
}

#[test]
fn select_multi_mode_returns_the_anchor_first() {
    let dir = tempfile::tempdir().unwrap();
    let ann = dir.path().join("ann.jsonl");
    fs::write(&ann, r#"{"image": "m", "boxes": [[0,0,12,12],[4,4,16,16],[8,0,20,12],[30,30,31,31]]}"#).unwrap();
    ok(dir.path(), &["select", "--annotations", ann.to_str().unwrap(), "--mode", "multi:3"]);
    let rec: Value = serde_json::from_str(fs::read_to_string(dir.path().join("selection.jsonl")).unwrap().trim()).unwrap();
    let sel = rec["selected"].as_array().unwrap();
    assert_eq!(sel.len(), 3);
    assert_eq!(sel[0], 1);
}

#[test]
fn malformed_annotations_report_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let ann = dir.path().join("ann.jsonl");
    fs::write(&ann, "{\"image\": \"a\", \"boxes\": []}\n{\"image\": \"b\", \"boxes\": [[3, 3, 1, 1]]}\n").unwrap();
    let o = compose(dir.path(), &["select", "--annotations", ann.to_str().unwrap()]);
    assert!(!o.status.success());
    let err: Value = serde_json::from_slice(o.stderr.trim_ascii()).unwrap();
    assert!(err["error"].as_str().unwrap().contains("ann.jsonl:2:"), "{err}");

    let o = compose(dir.path(), &["select", "--annotations", ann.to_str().unwrap(), "--mode", "triple"]);
    assert!(!o.status.success());
}

#[test]
fn unknown_override_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let o = compose(dir.path(), &["--set", "model.depth=3", "heatmap"]);
    assert!(!o.status.success());
    let err: Value = serde_json::from_slice(o.stderr.trim_ascii()).unwrap();
    assert!(err["error"].is_string());
}

#[test]
fn heatmap_writes_image_and_range() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["--set", "heatmap.pairs=500", "--set", "heatmap.grid=16", "heatmap"]);
    let meta = json(dir.path().join("heatmap.json"));
    let (lo, hi) = (meta["min"].as_f64().unwrap(), meta["max"].as_f64().unwrap());
    assert!(0.0 <= lo && lo <= hi && hi <= 1.0);
    assert_eq!(meta["pairs"], 500);
    assert!(fs::read(dir.path().join("heatmap.pgm")).unwrap().starts_with(b"P2"));

    // The corpus variant uses the selected pair of every scene.
    ok(dir.path(), &["gen-corpus", "--count", "4"]);
    let corpus = dir.path().to_str().unwrap().to_string();
    ok(dir.path(), &["heatmap", "--corpus", &corpus]);
    assert_eq!(json(dir.path().join("heatmap.json"))["pairs"], 4);
}

#[test]
fn train_sample_eval_and_gate_dump() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let with = |extra: &[&str]| -> Vec<String> { TINY.iter().chain(extra).map(|s| s.to_string()).collect() };
    let run = |extra: &[&str]| {
        let args = with(extra);
        ok(out, &args.iter().map(String::as_str).collect::<Vec<_>>())
    };

    run(&["train"]);
    let ckpt = out.join("model.ckpt");
    assert!(ckpt.exists());
    assert_eq!(fs::read_to_string(out.join("train_log.jsonl")).unwrap().lines().count(), 2);
    let resolved = json(out.join("config.resolved.json"));
    assert_eq!(resolved["model"]["dim"], 8);

    let ckpt_arg = ckpt.to_str().unwrap().to_string();
    run(&["sample", "--checkpoint", &ckpt_arg, "--count", "1"]);
    assert!(out.join("samples/sample_00.ppm").exists());

    let first = run(&["eval", "--checkpoint", &ckpt_arg]);
    run(&["eval", "--checkpoint", &ckpt_arg]);
    let lines: Vec<Value> = fs::read_to_string(out.join("metrics.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0], lines[1], "evaluation is deterministic");
    assert_eq!(lines[0]["checkpoint_step"], 2);
    let printed: Value = serde_json::from_slice(first.stdout.trim_ascii()).unwrap();
    assert_eq!(printed, lines[0]);

    run(&["dump-alpha", "--checkpoint", &ckpt_arg]);
    let dump = json(out.join("alpha/delta_s.json"));
    let maps = dump.as_array().unwrap();
    assert_eq!(maps.len(), 2);
    for m in maps {
        let (ab, ba) = (m["ab"].as_array().unwrap(), m["ba"].as_array().unwrap());
        for (x, y) in ab.iter().zip(ba) {
            assert_eq!(x.as_f64().unwrap(), -y.as_f64().unwrap());
        }
    }
    for name in ["delta_s_step00_ab.pgm", "delta_s_step02_ba.pgm", "alpha_step02_ab.pgm"] {
        assert!(out.join("alpha").join(name).exists(), "{name}");
    }

    let missing = compose(out, &["eval", "--checkpoint", "/nonexistent/model.ckpt"]);
    assert!(!missing.status.success());
}
