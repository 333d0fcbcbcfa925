use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pc-advkit"))
        .args(args)
        .current_dir(cwd)
        .env_remove("PC_ADVKIT_THREADS")
        .output()
        .unwrap()
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

#[test]
fn metrics_on_identical_clouds_is_all_zero() {
    let dir = tempfile::tempdir().unwrap();
    let body = "0 0 0\n1 0 0\n0 1 0\n0 0 1\n1 1 0\n";
    fs::write(dir.path().join("a.xyz"), body).unwrap();
    fs::write(dir.path().join("b.xyz"), body).unwrap();
    let out = bin(&["metrics", "--clean", "a.xyz", "--adv", "b.xyz", "--k", "3"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let stdout = text(&out.stdout);
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines[0], "instance_id,d_norm,d_chamfer,d_hausdorff,d_plane");
    let fields: Vec<&str> = lines[1].split(',').collect();
    assert_eq!(fields[0], "b");
    for f in &fields[1..] {
        assert_eq!(f.parse::<f64>().unwrap(), 0.0);
    }
}

#[test]
fn missing_input_exits_1_with_path() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("a.xyz"), "0 0 0\n").unwrap();
    let out = bin(&["metrics", "--clean", "a.xyz", "--adv", "nowhere/missing.xyz"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).contains("nowhere/missing.xyz"), "{}", text(&out.stderr));
}

#[test]
fn malformed_cloud_reports_line() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("a.xyz"), "0 0 0\n1 x 0\n").unwrap();
    let out = bin(&["metrics", "--clean", "a.xyz", "--adv", "a.xyz"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).contains("a.xyz:2:"), "{}", text(&out.stderr));
}

#[test]
fn unknown_flag_and_subcommand_exit_1_with_usage() {
    let dir = tempfile::tempdir().unwrap();
    for args in [&["metrics", "--bogus"][..], &["frobnicate"][..]] {
        let out = bin(args, dir.path());
        assert_eq!(out.status.code(), Some(1));
        assert!(text(&out.stderr).to_lowercase().contains("usage"), "{}", text(&out.stderr));
    }
}

#[test]
fn help_exits_0() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin(&["--help"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    assert!(text(&out.stdout).contains("transfer-eval"));
}

#[test]
fn bad_config_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.json"), "{ \"seed\": \"nope\" }").unwrap();
    let out = bin(&["--config", "c.json", "gen-data"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).contains("c.json"));
}

/// gen-data, train, then `attack --config` driven entirely by the job block.
#[test]
fn attack_from_config_writes_ply_and_record() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let base = serde_json::json!({
        "seed": 5,
        "output_dir": "run",
        "dataset": { "synthetic": {
            "classes": ["sphere", "cube"],
            "points_per_cloud": 48,
            "instances_per_class": 6
        }},
        "models": { "train": { "epochs": 2 } },
        "attack": { "config": { "iterations": 15, "bound": 0.05 } }
    });
    fs::write(p.join("c.json"), base.to_string()).unwrap();
    let out = bin(&["--config", "c.json", "gen-data"], p);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let out = bin(&["--config", "c.json", "train", "--data", "run/dataset.json"], p);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    assert!(p.join("run/models/arch-a.json").exists());

    let mut cfg = base.clone();
    cfg["output_dir"] = "atk".into();
    cfg["job"] = serde_json::json!({
        "model": "run/models/arch-a.json",
        "input": "run/clouds/test_0000_sphere.ply",
        "target": 1
    });
    fs::write(p.join("attack.json"), cfg.to_string()).unwrap();
    let out = bin(&["attack", "--config", "attack.json"], p);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let ply = fs::read_to_string(p.join("atk/adversarial.ply")).unwrap();
    assert!(ply.starts_with("ply"));
    assert!(ply.contains("element vertex 48"));
    let record: serde_json::Value = serde_json::from_str(&fs::read_to_string(p.join("atk/attack.json")).unwrap()).unwrap();
    assert_eq!(record["instance_id"], "test_0000_sphere");
    assert_eq!(record["target_class"], 1);
    for key in ["success", "iterations_used", "losses"] {
        assert!(record.get(key).is_some(), "record lacks {key}");
    }
    let metrics = fs::read_to_string(p.join("atk/metrics.csv")).unwrap();
    assert!(metrics.starts_with("instance_id,d_norm,d_chamfer,d_hausdorff,d_plane\ntest_0000_sphere,"));
}

#[test]
fn attack_with_out_of_range_target_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let cfg = serde_json::json!({
        "dataset": { "synthetic": { "classes": ["sphere", "cube"], "points_per_cloud": 32, "instances_per_class": 4 }},
        "models": { "train": { "epochs": 1 } }
    });
    fs::write(p.join("c.json"), cfg.to_string()).unwrap();
    assert_eq!(bin(&["--config", "c.json", "--out", "o", "gen-data"], p).status.code(), Some(0));
    assert_eq!(
        bin(&["--config", "c.json", "--out", "o", "train", "--data", "o/dataset.json"], p).status.code(),
        Some(0)
    );
    let out = bin(
        &[
            "--out",
            "o",
            "attack",
            "--model",
            "o/models/arch-a.json",
            "--input",
            "o/clouds/train_0000_sphere.ply",
            "--target",
            "7",
        ],
        p,
    );
    assert_eq!(out.status.code(), Some(1), "{}", text(&out.stderr));
}
