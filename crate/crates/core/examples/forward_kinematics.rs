//! Joint axes and origins of the built-in arm in the base frame.

use markerless_calib::robot::{JointConfiguration, RobotModel};

fn main() {
    let arm = RobotModel::seven_dof_arm();
    let q = JointConfiguration(vec![0.0, -0.3, 0.0, -2.0, 0.0, 1.8, 0.8]);
    println!("q = {:?}", q.angles());
    for j in 0..arm.dof() {
        let (axis, origin) = arm.forward_axis_position(&q, j).expect("valid joint");
        println!(
            "joint {j}: axis [{:+.3} {:+.3} {:+.3}]  origin [{:+.3} {:+.3} {:+.3}] m",
            axis.x, axis.y, axis.z, origin.x, origin.y, origin.z
        );
    }

    // a point on the last link keeps its distance to joint 3's axis while that joint turns
    let (axis, origin) = arm.forward_axis_position(&q, 3).unwrap();
    let local = [nalgebra::Vector3::new(0.05, 0.0, 0.1)];
    for delta in [0.0, 0.4, 0.8] {
        let p = arm
            .link_points_world(&q.with_offset(3, delta), 6, &local)
            .unwrap()[0];
        let d = (p - origin).cross(&axis).norm();
        println!("delta {delta:.1}: flange point distance to axis {d:.9} m");
    }
}
