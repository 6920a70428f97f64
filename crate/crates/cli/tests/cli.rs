use std::path::Path;
use std::process::Command;

fn fg3d(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_fg3d")).args(args).env("RUST_LOG", "warn").output().unwrap();
    assert!(out.status.success(), "fg3d {args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn write_config(dir: &Path) -> String {
    let cfg = serde_json::json!({
        "seed": 4,
        "n_plots": 1,
        "forest": { "n_trees": 5 },
        "tls": { "angular_step": 1.0f64.to_radians() },
        "train": {
            "iterations": 10, "n_checkpoints": 2, "val_pairs": 1, "n_points": 32, "cond_points": 64,
            "arch": { "cond_widths": [8], "cond_dim": 4, "local_widths": [8], "time_dim": 4, "block_width": 8, "n_blocks": 1 }
        },
        "generation": { "n_points": 32, "runs": 1 },
        "eval": { "n_points": 32, "max_pairs": 2 },
        "output_dir": dir.join("run")
    });
    let p = dir.join("config.json");
    std::fs::write(&p, cfg.to_string()).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn theory_check_reports_no_violations() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("report.json");
    let out = fg3d(&["--seed", "3", "theory-check", "--instances", "2000", "--grid", "10", "--out", path.to_str().unwrap()]);
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v, serde_json::from_str::<serde_json::Value>(&std::fs::read_to_string(&path).unwrap()).unwrap());
    assert_eq!(v["seed"], 3);
    assert_eq!(v["pinsker_failures"], 0);
    assert_eq!(v["random_instances"], 2000);
}

#[test]
fn scene_to_biometrics_chain() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write_config(d);
    let s = |p: &str| d.join(p).to_string_lossy().into_owned();
    fg3d(&["--config", &cfg, "synth", "--trees", "3", "--radius", "12", "--out", &s("scene")]);
    assert!(d.join("scene/trees.json").exists());
    std::fs::write(d.join("poses.csv"), "x,y\n0,0\n6,0\n").unwrap();
    fg3d(&["--config", &cfg, "scan", "--scene", &s("scene"), "--tls-poses", &s("poses.csv"), "--out", &s("scan")]);
    fg3d(&["--config", &cfg, "detect", "--in", &s("scan/als.ply"), "--cell", "0.5", "--min-height", "2", "--out", &s("boxes.json")]);
    let boxes: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("boxes.json")).unwrap()).unwrap();
    let n = boxes.as_array().unwrap().len();
    assert!((2..=4).contains(&n), "{n} boxes");
    fg3d(&["--config", &cfg, "biometrics", "--in", &s("scan/als.ply"), "--boxes", &s("boxes.json"), "--source", "ALS", "--out", &s("bio.csv")]);
    let csv = std::fs::read_to_string(d.join("bio.csv")).unwrap();
    assert!(csv.starts_with("tree_id,source,height_m,dbh_m,crd_m,crv_m3"));
    assert_eq!(csv.lines().count(), n + 1);
}

#[test]
fn dataset_train_generate_eval_chain() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write_config(d);
    let s = |p: &str| d.join(p).to_string_lossy().into_owned();
    fg3d(&["--config", &cfg, "dataset"]);
    assert!(d.join("run/dataset/dataset.json").exists());
    fg3d(&["--config", &cfg, "train"]);
    assert!(d.join("run/train/model.ckpt").exists());
    fg3d(&["--config", &cfg, "synth", "--trees", "2", "--radius", "10", "--out", &s("scene")]);
    fg3d(&["--config", &cfg, "scan", "--scene", &s("scene"), "--out", &s("scan")]);
    fg3d(&["--config", &cfg, "generate-landscape", "--in", &s("scan/als.ply"), "--out", &s("merged.ply"), "--summary", &s("summary.json")]);
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("summary.json")).unwrap()).unwrap();
    assert!(summary["summary"]["n_generated"].as_u64().unwrap() >= 1);
    assert_eq!(summary["config"]["seed"], 4);
    fg3d(&["--config", &cfg, "detect", "--in", &s("scan/als.ply"), "--out", &s("boxes.json")]);
    fg3d(&["--config", &cfg, "generate", "--in", &s("scan/als.ply"), "--out", &s("tree.ply")]);
    fg3d(&["--config", &cfg, "generate", "--unconditional", "--in", &s("scan/als.ply"), "--out", &s("uncond.ply")]);
    assert!(std::fs::read_to_string(d.join("tree.ply")).unwrap().contains("element vertex 32"));
    fg3d(&["--config", &cfg, "eval"]);
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("run/eval/report.json")).unwrap()).unwrap();
    assert_eq!(report["config"]["seed"], 4);
    assert!(d.join("run/MANIFEST.json").exists());
}
