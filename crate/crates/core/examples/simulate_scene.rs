//! Executes one motion in the demo scene and prints a few trajectories,
//! then the first JSON Lines record.

use markerless_calib::geometry::RigidTransform;
use markerless_calib::planner::{select_motion_among, PlannerParams};
use markerless_calib::scene::{write_jsonl, NoiseSpec, SceneDefinition};
use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let camera = RigidTransform::look_at(
        &Vector3::new(1.1, 0.7, 0.9),
        &Vector3::new(0.0, 0.0, 0.45),
        &Vector3::z(),
    )
    .unwrap();
    let noise = NoiseSpec {
        pixel_sigma: 1.0,
        dropout_prob: 0.002,
        outlier_prob: 0.1,
    };
    let scene = SceneDefinition::demo(camera, noise);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let motion = select_motion_among(
        &scene.robot,
        &scene.plannable_joints(),
        |_| true,
        &mut rng,
        &PlannerParams::default(),
    )
    .unwrap();
    let trajs = scene.execute_motion(&motion, 0, 60, 7).unwrap();
    println!(
        "joint {} sweep {:+.3}: {} trajectories",
        motion.joint,
        motion.sweep,
        trajs.len()
    );
    for t in trajs.iter().take(5) {
        let first = t.samples.first().unwrap();
        let last = t.samples.last().unwrap();
        println!(
            "  keypoint {:>2}: {} samples, ({:+.4}, {:+.4}) -> ({:+.4}, {:+.4}){}",
            t.keypoint_id,
            t.len(),
            first.point.u,
            first.point.v,
            last.point.u,
            last.point.v,
            if t.injected_outlier { "  [outlier]" } else { "" }
        );
    }
    let mut line = Vec::new();
    write_jsonl(&mut line, &[trajs[0].to_record(&motion)]).unwrap();
    let text = String::from_utf8(line).unwrap();
    println!("{}...", &text[..text.len().min(160)]);
}
