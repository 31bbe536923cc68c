//! Rotation helpers and the plane parameterization used to fit circles.

use markerless_calib::geometry::{
    geodesic_angle, nearest_rotation, rotation_exp, rotation_log, NormalizedImagePoint, PlaneFrame,
    UnitVector3,
};
use nalgebra::{Matrix3, Vector3};

fn main() {
    let r = rotation_exp(&Vector3::new(0.3, -0.2, 0.9));
    let noisy = r + Matrix3::new(0.01, -0.02, 0.0, 0.0, 0.015, 0.01, -0.01, 0.0, 0.02);
    let fixed = nearest_rotation(&noisy).unwrap();
    println!("log(R) = {:.4?}", rotation_log(&r).as_slice());
    println!(
        "projected back onto SO(3): {:.4} rad from R",
        geodesic_angle(&fixed, &r)
    );

    let frame = PlaneFrame::new(&UnitVector3::new_normalize(Vector3::new(0.2, -0.1, 1.0)));
    let p = NormalizedImagePoint::new(0.12, -0.05);
    let q = frame.project(&p).unwrap();
    let back = frame.lift(&q);
    println!(
        "image point ({}, {}) -> plane ({:.4}, {:.4}) -> ray [{:.4} {:.4} {:.4}]",
        p.u,
        p.v,
        q.x,
        q.y,
        back.x / back.z,
        back.y / back.z,
        1.0
    );
}
