//! Full loop against a simulated scene with tracker outliers and injected
//! spurious axes, printing the estimate error after each motion.

use markerless_calib::calibrator::{calibrate_loop, FaultConfig, LiveSource, LoopConfig};
use markerless_calib::geometry::RigidTransform;
use markerless_calib::harness::ErrorMetrics;
use markerless_calib::planner::PlannerParams;
use markerless_calib::robot::JointConfiguration;
use markerless_calib::scene::{NoiseSpec, SceneDefinition};
use nalgebra::Vector3;

fn main() {
    let truth = RigidTransform::look_at(
        &Vector3::new(0.4, 1.4, 0.9),
        &Vector3::new(0.0, 0.0, 0.45),
        &Vector3::z(),
    )
    .unwrap();
    let noise = NoiseSpec {
        pixel_sigma: 1.0,
        outlier_prob: 0.2,
        ..Default::default()
    };
    let scene = SceneDefinition::demo(truth, noise);
    let mut source = LiveSource::new(
        &scene,
        PlannerParams::default(),
        |_: &JointConfiguration| true,
        3,
        60,
    );
    let cfg = LoopConfig {
        faults: FaultConfig {
            spurious_axis_prob: 0.25,
        },
        seed: 3,
        ..Default::default()
    };
    let run = calibrate_loop(&mut source, &scene.robot, &cfg).unwrap();
    for r in &run.iterations {
        let err = r.estimate.as_ref().map(|e| ErrorMetrics::between(e, &truth));
        let what = match (&r.rejection, &r.stage1_failure) {
            (Some(why), _) | (None, Some(why)) => why.clone(),
            _ if r.injected_spurious => "accepted (spurious axis injected)".into(),
            _ => "accepted".into(),
        };
        match err {
            Some(e) => println!(
                "motion {:>2}: {:<48} rot {:.2e} trans {:.2e}",
                r.motion_id, what, e.rotation_error, e.translation_error
            ),
            None => println!("motion {:>2}: {what}", r.motion_id),
        }
    }
    let spurious_rejected = run
        .spurious
        .iter()
        .zip(&run.final_stage2)
        .filter(|(s, k)| **s && !**k)
        .count();
    println!(
        "converged: {}, spurious rejected {spurious_rejected}/{}",
        run.converged,
        run.spurious.iter().filter(|s| **s).count()
    );
}
