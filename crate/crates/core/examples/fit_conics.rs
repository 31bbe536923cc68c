//! Shared-orientation conic fit over the trajectories of one motion, and a
//! circle fit on the true rotation plane.

use markerless_calib::conic::{fit_shared_conics, validate_ellipses};
use markerless_calib::estimation::fit_projected_circle;
use markerless_calib::geometry::RigidTransform;
use markerless_calib::planner::ExploratoryMotion;
use markerless_calib::robot::JointConfiguration;
use markerless_calib::scene::{NoiseSpec, SceneDefinition};
use nalgebra::Vector3;

fn main() {
    let camera = RigidTransform::look_at(
        &Vector3::new(-0.9, 1.2, 1.1),
        &Vector3::new(0.0, 0.0, 0.45),
        &Vector3::z(),
    )
    .unwrap();
    for sigma in [0.0, 1.0] {
        let scene = SceneDefinition::demo(
            camera,
            NoiseSpec {
                pixel_sigma: sigma,
                ..Default::default()
            },
        );
        let motion = ExploratoryMotion {
            start_config: JointConfiguration(vec![0.2, -0.4, 0.1, -2.1, 0.3, 1.9, 0.5]),
            joint: 4,
            sweep: 1.2,
        };
        let trajs = scene.execute_motion(&motion, 0, 60, 3).unwrap();
        let fit = fit_shared_conics(&trajs).unwrap();
        let valid = validate_ellipses(&fit);
        println!(
            "sigma {sigma}: {} conics, {} valid ellipses, shared B {:.3e}, G {:.3e}, residual {:.2e}",
            fit.len(),
            valid.len(),
            fit.shared_b,
            fit.shared_g,
            fit.residual
        );
        let (axis, _) = scene.ground_truth_axis(&motion).unwrap();
        let circle = fit_projected_circle(&trajs[0], &axis).unwrap();
        println!(
            "  keypoint {} on the true plane: radius {:.4}, phase {:.3}, residual {:.2e}",
            trajs[0].keypoint_id, circle.radius, circle.phase, circle.residual
        );
    }
}
