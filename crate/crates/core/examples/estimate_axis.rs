//! Recovers the camera-frame rotation axis of single-joint motions and
//! compares it with the simulator's ground truth.

use markerless_calib::conic::{fit_shared_conics, validate_ellipses};
use markerless_calib::estimation::{estimate_observation, EstimationParams};
use markerless_calib::geometry::{angle_between, RigidTransform};
use markerless_calib::planner::{select_motion_among, PlannerParams};
use markerless_calib::scene::{NoiseSpec, SceneDefinition};
use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let camera = RigidTransform::look_at(
        &Vector3::new(1.3, -0.4, 1.0),
        &Vector3::new(0.0, 0.0, 0.45),
        &Vector3::z(),
    )
    .unwrap();
    let scene = SceneDefinition::demo(
        camera,
        NoiseSpec {
            pixel_sigma: 1.0,
            ..Default::default()
        },
    );
    let params = EstimationParams::default();
    for i in 0..8u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(i);
        let motion = select_motion_among(
            &scene.robot,
            &scene.plannable_joints(),
            |_| true,
            &mut rng,
            &PlannerParams::default(),
        )
        .unwrap();
        let Ok(trajs) = scene.execute_motion(&motion, i as usize, 60, i) else {
            println!("motion {i}: nothing visible");
            continue;
        };
        let (true_axis, _) = scene.ground_truth_axis(&motion).unwrap();
        let outcome = fit_shared_conics(&trajs)
            .map_err(|e| e.to_string())
            .map(|f| validate_ellipses(&f))
            .and_then(|f| estimate_observation(&motion, &f, &trajs, &params).map_err(|e| e.to_string()));
        match outcome {
            Ok(obs) => println!(
                "motion {i}: joint {} axis error {:.5} rad, score gap {:.3}, agreement {:.2}, {} candidates",
                motion.joint,
                angle_between(&obs.axis, &true_axis),
                obs.score_gap(),
                obs.inlier_ratio,
                obs.candidate_count
            ),
            Err(e) => println!("motion {i}: {e}"),
        }
    }
}
