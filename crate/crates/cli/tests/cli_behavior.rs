//! End-to-end behaviors of the `gatlab` binary: config validation exit
//! codes, file-based datasets, and the report command.

use std::path::{Path, PathBuf};
use std::process::Command;

fn tmp(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn gatlab() -> Command {
    Command::new(env!("CARGO_BIN_EXE_gatlab"))
}

#[test]
fn invalid_config_fails_with_field_path() {
    let dir = tmp("bad_config");
    let path = dir.join("bad.json");
    std::fs::write(
        &path,
        r#"{
            "dataset": {"kind": "self_sufficient_er", "n": 50, "p": 1.7, "classes": 2, "seed": 1},
            "model": {"width": 4},
            "sweep": {"architectures": ["gate"], "depths": [1], "seeds": [1]},
            "output_dir": "out"
        }"#,
    )
    .unwrap();
    let out = gatlab().arg("run").arg(&path).output().unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("dataset.p"), "stderr: {stderr}");
}

#[test]
fn unknown_command_and_missing_args_fail() {
    let out = gatlab().arg("explode").output().unwrap();
    assert!(!out.status.success());
    let out = gatlab().arg("run").output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("usage"));
}

#[test]
fn files_dataset_round_trip_with_original_labels() {
    let dir = tmp("files_dataset");
    // A 6-node path graph with 2 classes.
    std::fs::write(
        dir.join("g.edges"),
        "nodes 6\n0 1\n1 2\n2 3\n3 4\n4 5\n",
    )
    .unwrap();
    std::fs::write(dir.join("labels.csv"), "0\n0\n0\n1\n1\n1\n").unwrap();
    let config = serde_json::json!({
        "dataset": {
            "kind": "files",
            "edge_list": dir.join("g.edges"),
            "labels": dir.join("labels.csv"),
            "label_mode": "original",
            "classes": 2,
            "seed": 3
        },
        "model": {"width": 4},
        "training": {"learning_rate": 0.01, "max_epochs": 60, "eval_every": 1},
        "sweep": {"architectures": ["gate_s"], "depths": [1], "seeds": [1]},
        "output_dir": dir.join("out")
    });
    let cfg_path = dir.join("config.json");
    std::fs::write(&cfg_path, config.to_string()).unwrap();
    let out = gatlab().arg("run").arg(&cfg_path).output().unwrap();
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    // Labels are reproduced verbatim in the dataset export.
    let exported = std::fs::read_to_string(dir.join("out/datasets/base/labels.csv")).unwrap();
    assert_eq!(exported, "0\n0\n0\n1\n1\n1\n");
    // Structure unchanged apart from explicit self-loops.
    let edges = std::fs::read_to_string(dir.join("out/datasets/base/graph.edges")).unwrap();
    assert!(edges.starts_with("nodes 6\n"));
    for line in ["0 1", "1 2", "2 3", "3 4", "4 5", "0 0", "5 5"] {
        assert!(edges.contains(&format!("{line}\n")), "missing {line}");
    }
    // Original mode without a labels file is rejected up front.
    let mut bad = config.clone();
    bad["dataset"]
        .as_object_mut()
        .unwrap()
        .remove("labels");
    std::fs::write(&cfg_path, bad.to_string()).unwrap();
    let out = gatlab().arg("run").arg(&cfg_path).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("dataset.labels"));
}

#[test]
fn report_rebuilds_sweep_summary() {
    let dir = tmp("report_cmd");
    let config = serde_json::json!({
        "dataset": {"kind": "self_sufficient_er", "n": 60, "p": 0.05, "classes": 2, "seed": 2},
        "model": {"width": 4},
        "training": {"learning_rate": 0.01, "max_epochs": 40, "eval_every": 1},
        "sweep": {"architectures": ["gate_s"], "depths": [1], "seeds": [1, 2, 3]},
        "output_dir": dir.join("out")
    });
    let cfg_path = dir.join("config.json");
    std::fs::write(&cfg_path, config.to_string()).unwrap();
    assert!(gatlab().arg("run").arg(&cfg_path).status().unwrap().success());
    let summary_path = dir.join("out/sweep_summary.csv");
    let original = std::fs::read_to_string(&summary_path).unwrap();
    std::fs::remove_file(&summary_path).unwrap();
    let out = gatlab().arg("report").arg(dir.join("out")).output().unwrap();
    assert!(out.status.success());
    let rebuilt = std::fs::read_to_string(&summary_path).unwrap();
    assert_eq!(original, rebuilt);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("gate_s"));
    // Three seeds: the CI column is a number, not "na".
    let data_line = rebuilt.lines().nth(1).unwrap();
    assert_eq!(data_line.split(',').count(), 7);
    assert!(!data_line.contains("na"));
}

#[test]
fn dry_run_prints_matrix_without_artifacts() {
    let dir = tmp("dry_run");
    let config = serde_json::json!({
        "dataset": {"kind": "self_sufficient_er", "n": 50, "p": 0.05, "classes": 2, "seed": 1},
        "model": {"width": 4},
        "training": {"learning_rate": 0.01, "max_epochs": 10, "eval_every": 1},
        "sweep": {"architectures": ["gate", "gat"], "depths": [1, 2], "seeds": [1, 2, 3]},
        "output_dir": dir.join("out")
    });
    let cfg_path = dir.join("config.json");
    std::fs::write(&cfg_path, config.to_string()).unwrap();
    let out = gatlab()
        .arg("run")
        .arg(&cfg_path)
        .arg("--dry-run")
        .output()
        .unwrap();
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("resolved 12 runs"), "stdout: {stdout}");
    assert!(!dir.join("out").exists());
}
