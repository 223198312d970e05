use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TRAIN_TOML: &str = r#"
[train]
n_all = 32
n_stages = 3
bootstrap_rounds = [4, 8]
initial_negatives = 150
negatives_per_round = 60
max_negatives = 300
mined_per_image = 10
min_negatives = 5
seed = 3
"#;

fn mcf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mcf"))
        .args(args)
        .output()
        .expect("spawn mcf")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "status {:?}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Writes a small dataset and trains a three-stage model on it.
fn trained(dir: &Path) {
    ok(&mcf(&["synth", "--out", s(dir), "--seed", "5", "--train", "8", "--test", "3"]));
    fs::write(dir.join("train.toml"), TRAIN_TOML).unwrap();
    ok(&mcf(&[
        "--config",
        s(&dir.join("train.toml")),
        "train",
        "--annotations",
        s(&dir.join("train.csv")),
        "--out",
        s(&dir.join("model.json")),
        "--widths",
        "4,6,8,8,8",
    ]));
}

#[test]
fn synth_train_detect_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    trained(d);
    assert!(d.join("model.mcfw").exists());

    let dets = d.join("dets.csv");
    let out = mcf(&[
        "detect",
        "--model",
        s(&d.join("model.json")),
        "--weights",
        s(&d.join("model.mcfw")),
        "--list",
        s(&d.join("test.csv")),
        "--threads",
        "1",
        "--out",
        s(&dets),
        "--stats",
        s(&d.join("stats.json")),
    ]);
    ok(&out);
    let csv = fs::read_to_string(&dets).unwrap();
    assert!(csv.starts_with("image_path,x,y,w,h,score,stage_reached\n"));
    assert!(String::from_utf8_lossy(&out.stderr).contains("entering"));
    let stats: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("stats.json")).unwrap()).unwrap();
    assert_eq!(stats["total"]["stages"].as_array().unwrap().len(), 3);
    assert_eq!(stats["per_image"].as_object().unwrap().len(), 3);

    let out = mcf(&[
        "eval",
        "--gt",
        s(&d.join("test.csv")),
        "--detections",
        s(&dets),
        "--format",
        "json",
    ]);
    ok(&out);
    let curve: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let mr = curve["mr_log_avg_2"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&mr));

    let out = mcf(&["inspect-model", "--model", s(&d.join("model.json")), "--format", "json"]);
    ok(&out);
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["plan"]["k"], serde_json::json!([16, 8, 8]));
    assert_eq!(summary["stages"][2]["layer"], 3);
}

#[test]
fn json_detections_match_csv() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    trained(d);
    let image = d.join("test").join("img_0000.png");
    let (model, weights) = (d.join("model.json"), d.join("model.mcfw"));
    let base = [
        "detect",
        "--model",
        s(&model),
        "--weights",
        s(&weights),
        "--theta",
        "0.8",
        s(&image),
    ];
    let csv = mcf(&base);
    ok(&csv);
    let mut args = base.to_vec();
    args.extend(["--format", "json"]);
    let json = mcf(&args);
    ok(&json);
    let v: serde_json::Value = serde_json::from_slice(&json.stdout).unwrap();
    let rows = String::from_utf8(csv.stdout).unwrap().lines().count() - 1;
    assert_eq!(v["detections"].as_array().unwrap().len(), rows);
    assert_eq!(v["stats"]["stages"][0]["pruned"].as_u64().is_some(), true);
}

#[test]
fn bench_reports_every_configuration() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    trained(d);
    let out = mcf(&[
        "bench",
        "--model",
        s(&d.join("model.json")),
        "--weights",
        s(&d.join("model.mcfw")),
        "--gt",
        s(&d.join("test.csv")),
        "--theta",
        "off,0.8",
        "--parallel",
        "2",
        "--format",
        "json",
    ]);
    ok(&out);
    let reports: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let reports = reports.as_array().unwrap();
    assert_eq!(reports.len(), 2);
    assert_eq!(reports[0]["threads"], 1);
    assert_eq!(reports[1]["threads"], 2);
    let rows = reports[0]["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0]["speedup"], 1.0);
    assert_eq!(rows[1]["name"], "model theta=0.8");
}

#[test]
fn training_twice_gives_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    trained(d);
    let first = fs::read(d.join("model.json")).unwrap();
    let weights = fs::read(d.join("model.mcfw")).unwrap();
    trained(d);
    assert_eq!(fs::read(d.join("model.json")).unwrap(), first);
    assert_eq!(fs::read(d.join("model.mcfw")).unwrap(), weights);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    // Usage errors.
    assert_eq!(mcf(&["detect", "--model", "m.json", "--theta", "1.5", "x.png"]).status.code(), Some(2));
    assert_eq!(mcf(&["frobnicate"]).status.code(), Some(2));

    ok(&mcf(&["synth", "--out", s(d), "--train", "2", "--test", "1"]));
    // Configuration errors.
    let out = mcf(&[
        "train",
        "--annotations",
        s(&d.join("train.csv")),
        "--out",
        s(&d.join("m.json")),
        "--stages",
        "1",
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    fs::write(d.join("bad.toml"), "[tarin]\nseed = 1\n").unwrap();
    let out = mcf(&["--config", s(&d.join("bad.toml")), "synth", "--out", s(d)]);
    assert_eq!(out.status.code(), Some(2));

    // Data errors.
    let out = mcf(&["inspect-model", "--model", s(&d.join("missing.json"))]);
    assert_eq!(out.status.code(), Some(3));
    fs::write(d.join("broken.csv"), "image_path,x,y,w,h,ignore\na.png,1,2,zz,4,0\n").unwrap();
    let out = mcf(&["eval", "--gt", s(&d.join("broken.csv")), "--detections", s(&d.join("broken.csv"))]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
}
