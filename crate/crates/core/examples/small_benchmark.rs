//! Three poses x two seeds through the benchmark driver, without files.

use std::path::Path;

use markerless_calib::config::RunConfig;
use markerless_calib::harness::benchmark;

const CONFIG: &str = r#"
[scene]
robot = { preset = "seven_dof_arm" }
keypoints = { preset = "demo" }
camera = { fx = 1380.0, fy = 1380.0, cx = 960.0, cy = 540.0, width = 1920.0, height = 1080.0 }
noise = { pixel_sigma = 1.0 }

[run]
seeds = [0, 1]
motion_budget = 40

[benchmark]
motion_counts = [3, 6, 12]
random_poses = { count = 3, seed = 5 }
"#;

fn main() {
    let cfg = RunConfig::parse(CONFIG, Path::new("inline.toml")).unwrap();
    let res = benchmark(&cfg, 0).unwrap();
    for r in &res.rows {
        println!(
            "pose {} seed {} motions {:>2}: {:<6} rot {:?} trans {:?}",
            r.pose_id, r.seed, r.motions, r.status, r.rot_err_rad, r.trans_err_m
        );
    }
    for m in &res.medians {
        println!(
            "median at {:>2}: {:?} rad, {:?} m over {} runs",
            m.motions, m.median_rot_err_rad, m.median_trans_err_m, m.runs
        );
    }
}
