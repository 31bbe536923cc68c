//! Closed-form solve from exact axis observations, then with the axes
//! perturbed.

use markerless_calib::calibrator::{assemble_constraints, rotate_axis, solve_calibration, PairedObservation};
use markerless_calib::estimation::MotionObservation;
use markerless_calib::geometry::{geodesic_angle, rotation_exp, RigidTransform, UnitVector3};
use markerless_calib::planner::ExploratoryMotion;
use markerless_calib::robot::{JointConfiguration, RobotModel};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn observe(
    robot: &RobotModel,
    truth: &RigidTransform,
    q: Vec<f64>,
    joint: usize,
    tilt: Vector3<f64>,
) -> PairedObservation {
    let motion = ExploratoryMotion {
        start_config: JointConfiguration(q),
        joint,
        sweep: 1.0,
    };
    let (axis_b, pos_b) = robot.forward_axis_position(&motion.start_config, joint).unwrap();
    let axis = rotate_axis(&rotation_exp(&tilt), &rotate_axis(&truth.rotation, &axis_b));
    // direction from the camera center to the foot of the axis line
    let p = truth.transform_point(&pos_b);
    let foot = p - axis.into_inner() * axis.dot(&p);
    let obs = MotionObservation {
        motion,
        axis,
        ref_direction: UnitVector3::new_normalize(foot),
        best_score: 1.0,
        second_score: 2.0,
        selected_score: 1.0,
        inlier_ratio: 1.0,
        trajectory_count: 1,
        inlier_keypoints: vec![0],
        candidate_count: 2,
    };
    PairedObservation::new(obs, robot).unwrap()
}

fn main() {
    let robot = RobotModel::seven_dof_arm();
    let truth =
        RigidTransform::from_rotation_vector(Vector3::new(2.0, -0.6, 0.4), Vector3::new(0.1, 0.3, 1.5));
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for noise in [0.0, 0.002] {
        let obs: Vec<PairedObservation> = (0..12)
            .map(|i| {
                let q: Vec<f64> = robot
                    .joints()
                    .iter()
                    .map(|j| rng.random_range(j.limits.0..j.limits.1))
                    .collect();
                let tilt =
                    Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.0) * noise;
                observe(&robot, &truth, q, i % 6, tilt)
            })
            .collect();
        let system = assemble_constraints(&obs).unwrap();
        let est = solve_calibration(&system).unwrap();
        println!(
            "axis noise {noise}: {} rows, rotation error {:.2e} rad, translation error {:.2e} m, residual {:.2e}",
            system.h().nrows(),
            geodesic_angle(&est.transform.rotation, &truth.rotation),
            (est.transform.translation - truth.translation).norm(),
            est.residual
        );
    }
}
