//! End-to-end runs of the `calib` binary.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn calib(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_calib"))
        .args(args)
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn repo_file(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

fn noise_free_text() -> String {
    std::fs::read_to_string(repo_file("configs/noise_free.toml")).unwrap()
}

fn write(dir: &TempDir, name: &str, text: &str) -> PathBuf {
    let p = dir.path().join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn schema(name: &str) -> jsonschema::Validator {
    let text = std::fs::read_to_string(repo_file(&format!("docs/schemas/{name}.schema.json"))).unwrap();
    jsonschema::validator_for(&serde_json::from_str(&text).unwrap()).unwrap()
}

fn assert_valid(v: &jsonschema::Validator, instance: &Value) {
    let errors: Vec<String> = v.iter_errors(instance).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "{errors:?} in {instance}");
}

/// CSV rows as JSON objects keyed by header; empty cells become null.
fn csv_rows(path: &Path) -> (Vec<String>, Vec<Value>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header: Vec<String> = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| {
            let rec = rec.unwrap();
            let obj = header
                .iter()
                .zip(rec.iter())
                .map(|(k, cell)| {
                    let v = if cell.is_empty() {
                        Value::Null
                    } else if let Ok(i) = cell.parse::<i64>() {
                        Value::from(i)
                    } else if let Ok(f) = cell.parse::<f64>() {
                        Value::from(f)
                    } else {
                        Value::from(cell)
                    };
                    (k.clone(), v)
                })
                .collect();
            Value::Object(obj)
        })
        .collect();
    (header, rows)
}

fn read_report(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn noise_free_live_calibration_converges() {
    let dir = TempDir::new().unwrap();
    let cfg = write(&dir, "scene.toml", &noise_free_text());
    let report = dir.path().join("report.json");
    let out = calib(&["calibrate", "--scene", s(&cfg), "--report", s(&report)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let rep = read_report(&report);
    assert_valid(&schema("report"), &rep);
    assert_eq!(rep["status"], "converged");
    assert!(rep["error"]["rotation_error"].as_f64().unwrap() < 1e-4);
    assert!(rep["error"]["translation_error"].as_f64().unwrap() < 1e-4);
    assert!(String::from_utf8_lossy(&out.stdout).contains("status: converged"));
}

#[test]
fn replay_matches_live() {
    let dir = TempDir::new().unwrap();
    let text = std::fs::read_to_string(repo_file("configs/demo.toml")).unwrap();
    let cfg = write(&dir, "demo.toml", &text);
    let dump = dir.path().join("dump.jsonl");
    let out = calib(&["simulate", "--config", s(&cfg), "--out", s(&dump), "--seed", "4"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let traj = schema("trajectory");
    let body = std::fs::read_to_string(&dump).unwrap();
    for line in body.lines().take(50) {
        assert_valid(&traj, &serde_json::from_str(line).unwrap());
    }

    let live = dir.path().join("live.json");
    let replay = dir.path().join("replay.json");
    let a = calib(&[
        "calibrate",
        "--scene",
        s(&cfg),
        "--report",
        s(&live),
        "--seed",
        "4",
    ]);
    let b = calib(&[
        "calibrate",
        "--scene",
        s(&cfg),
        "--trajectories",
        s(&dump),
        "--report",
        s(&replay),
        "--seed",
        "4",
    ]);
    assert_eq!(code(&a), code(&b));
    let (live, replay) = (read_report(&live), read_report(&replay));
    assert_valid(&schema("report"), &replay);
    assert_eq!(replay["mode"], "replay");
    assert!(live["estimate"].is_object());
    assert_eq!(live["estimate"], replay["estimate"]);
    assert_eq!(live["converged"], replay["converged"]);
}

#[test]
fn simulate_is_byte_identical_and_two_joint_scene_works() {
    let scene = r#"
[scene]
[scene.camera]
fx = 1000.0
fy = 1000.0
cx = 640.0
cy = 360.0

[scene.pose]
eye = [0.9, 0.9, 0.9]
target = [0.25, 0.0, 0.2]

[[scene.robot.joints]]
translation = [0.0, 0.0, 0.2]
axis = [0.0, 0.0, 1.0]
limits = [-2.5, 2.5]

[[scene.robot.joints]]
translation = [0.3, 0.0, 0.0]
axis = [0.0, 1.0, 0.0]
limits = [-1.0, 1.0]

[[scene.keypoints.links]]
link = 1
points = [[0.2, 0.0, 0.0], [0.25, 0.05, 0.02], [0.15, -0.04, 0.05], [0.1, 0.05, -0.03]]

[run]
motion_budget = 3
"#;
    let dir = TempDir::new().unwrap();
    let cfg = write(&dir, "two_joint.toml", scene);
    let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    for out in [&a, &b] {
        let o = calib(&["simulate", "--config", s(&cfg), "--out", s(out)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let bytes = std::fs::read(&a).unwrap();
    assert_eq!(bytes, std::fs::read(&b).unwrap());
    let ids: BTreeSet<u64> = String::from_utf8(bytes)
        .unwrap()
        .lines()
        .map(|l| {
            serde_json::from_str::<Value>(l).unwrap()["motion_id"]
                .as_u64()
                .unwrap()
        })
        .collect();
    assert!(ids.len() >= 3, "{ids:?}");
}

#[test]
fn short_budget_is_not_converged() {
    let dir = TempDir::new().unwrap();
    let cfg = write(
        &dir,
        "short.toml",
        &noise_free_text().replace("seeds = [0]", "seeds = [0]\nmotion_budget = 6"),
    );
    let report = dir.path().join("r.json");
    let out = calib(&["calibrate", "--scene", s(&cfg), "--report", s(&report)]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    let rep = read_report(&report);
    assert_eq!(rep["status"], "not_converged");
    assert!(rep["estimate"].is_object());
}

#[test]
fn camera_facing_away_has_no_usable_observations() {
    let dir = TempDir::new().unwrap();
    // looks away from the robot: nothing is ever in view
    let text = noise_free_text()
        .replace("eye = [-0.9, 1.2, 1.1]", "eye = [2.0, 2.0, 1.0]")
        .replace("target = [0.0, 0.0, 0.45]", "target = [4.0, 4.0, 1.0]")
        .replace("seeds = [0]", "seeds = [0]\nmotion_budget = 4");
    let cfg = write(&dir, "away.toml", &text);
    let report = dir.path().join("r.json");
    let out = calib(&["calibrate", "--scene", s(&cfg), "--report", s(&report)]);
    assert_eq!(code(&out), 4);
    let err = stderr(&out);
    assert_eq!(err.matches("motion ").count(), 4, "{err}");
    let rep = read_report(&report);
    assert_valid(&schema("report"), &rep);
    assert_eq!(rep["status"], "no_estimate");
}

#[test]
fn input_errors_exit_2() {
    let dir = TempDir::new().unwrap();
    let good = write(&dir, "good.toml", &noise_free_text());
    let report = dir.path().join("r.json");

    // truncated trajectory line
    let dump = dir.path().join("dump.jsonl");
    assert_eq!(
        code(&calib(&["simulate", "--config", s(&good), "--out", s(&dump)])),
        0
    );
    let body = std::fs::read_to_string(&dump).unwrap();
    let mut lines: Vec<&str> = body.lines().take(3).collect();
    let cut = &lines[2][..lines[2].len() / 2];
    lines[2] = cut;
    let broken = write(&dir, "broken.jsonl", &lines.join("\n"));
    let out = calib(&[
        "calibrate",
        "--scene",
        s(&good),
        "--trajectories",
        s(&broken),
        "--report",
        s(&report),
    ]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("line 3"), "{}", stderr(&out));

    // unknown key
    let bad = write(
        &dir,
        "bad.toml",
        &noise_free_text().replace("[run]", "[run]\nbudget = 3"),
    );
    let out = calib(&["calibrate", "--scene", s(&bad), "--report", s(&report)]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("budget"), "{}", stderr(&out));

    // prismatic joint
    let prismatic = noise_free_text().replace(
        "robot = { preset = \"seven_dof_arm\" }",
        "robot = { joints = [{ kind = \"prismatic\", axis = [0.0, 0.0, 1.0], limits = [0.0, 0.3] }] }",
    );
    let p = write(&dir, "prismatic.toml", &prismatic);
    let out = calib(&[
        "simulate",
        "--config",
        s(&p),
        "--out",
        s(&dir.path().join("x.jsonl")),
    ]);
    assert_eq!(code(&out), 2);
    assert!(
        stderr(&out).contains("scene.robot.joints[0].kind"),
        "{}",
        stderr(&out)
    );

    // missing file
    let out = calib(&[
        "calibrate",
        "--scene",
        "/nonexistent/scene.toml",
        "--report",
        s(&report),
    ]);
    assert_eq!(code(&out), 2);

    // bad arguments
    assert_eq!(code(&calib(&["calibrate", "--report", s(&report)])), 2);
}

#[test]
fn benchmark_single_noise_free_pose() {
    let dir = TempDir::new().unwrap();
    let text = noise_free_text()
        .replace("seeds = [0]", "seeds = [0, 1]")
        + "\n[benchmark]\nmotion_counts = [3, 5, 7, 9]\nposes = [{ eye = [1.2, -0.5, 1.0], target = [0.0, 0.0, 0.45] }]\n";
    let cfg = write(&dir, "bench.toml", &text);
    let out_csv = dir.path().join("bench.csv");
    let out = calib(&[
        "benchmark",
        "--config",
        s(&cfg),
        "--out",
        s(&out_csv),
        "--jobs",
        "1",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let (header, rows) = csv_rows(&out_csv);
    assert_eq!(
        header,
        [
            "pose_id",
            "seed",
            "motions",
            "rot_err_rad",
            "trans_err_m",
            "status",
            "converged_at",
            "detail"
        ]
    );
    assert_eq!(rows.len(), 8);
    let row_schema = schema("benchmark");
    for r in &rows {
        assert_valid(&row_schema, r);
        assert_eq!(r["status"], "ok");
        if r["motions"].as_u64().unwrap() >= 5 {
            assert!(r["rot_err_rad"].as_f64().unwrap() < 1e-4, "{r}");
            assert!(r["trans_err_m"].as_f64().unwrap() < 1e-4, "{r}");
        }
    }
    let (mheader, medians) = csv_rows(&dir.path().join("bench_medians.csv"));
    assert_eq!(
        mheader,
        ["motions", "runs", "median_rot_err_rad", "median_trans_err_m"]
    );
    assert_eq!(medians.len(), 4);
    let med_schema = schema("medians");
    for m in &medians {
        assert_valid(&med_schema, m);
    }
}

#[test]
fn benchmark_with_no_poses_writes_headers_only() {
    let dir = TempDir::new().unwrap();
    let text = noise_free_text() + "\n[benchmark]\nposes = []\nrandom_poses = { count = 0 }\n";
    let cfg = write(&dir, "empty.toml", &text);
    let out_csv = dir.path().join("empty.csv");
    let out = calib(&["benchmark", "--config", s(&cfg), "--out", s(&out_csv)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let body = std::fs::read_to_string(&out_csv).unwrap();
    assert_eq!(
        body.trim_end(),
        "pose_id,seed,motions,rot_err_rad,trans_err_m,status,converged_at,detail"
    );
}

#[test]
fn benchmark_records_failed_runs_and_continues() {
    let dir = TempDir::new().unwrap();
    // no configuration keeps every joint above this floor
    let text = noise_free_text().replace(
        "keypoints = { preset = \"demo\" }",
        "keypoints = { preset = \"demo\" }\nfloor_z = 5.0",
    ) + "\n[benchmark]\nmotion_counts = [3]\nposes = [{ eye = [1.2, -0.5, 1.0], target = [0.0, 0.0, 0.45] }]\n";
    let cfg = write(&dir, "floor.toml", &text);
    let out_csv = dir.path().join("f.csv");
    let out = calib(&["benchmark", "--config", s(&cfg), "--out", s(&out_csv)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let (_, rows) = csv_rows(&out_csv);
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0]["status"], "failed");
    assert!(
        rows[0]["detail"].as_str().unwrap().contains("plan"),
        "{}",
        rows[0]
    );
    assert_valid(&schema("benchmark"), &rows[0]);
}
