//! Random exploratory motions under joint limits and a floor constraint.

use markerless_calib::planner::{select_motion, PlannerParams};
use markerless_calib::robot::{JointConfiguration, RobotModel};

fn main() {
    let arm = RobotModel::seven_dof_arm();
    let params = PlannerParams::default();
    // keep every joint origin past the base above the table
    let above_table = |q: &JointConfiguration| {
        arm.joint_positions(q)
            .map(|ps| ps.iter().skip(1).all(|p| p.z > 0.05))
            .unwrap_or(false)
    };
    for seed in 0..5 {
        match select_motion(&arm, above_table, seed, &params) {
            Ok(m) => println!(
                "seed {seed}: joint {} sweep {:+.3} rad from {:.2?}",
                m.joint,
                m.sweep,
                m.start_config.angles()
            ),
            Err(e) => println!("seed {seed}: {e}"),
        }
    }
}
