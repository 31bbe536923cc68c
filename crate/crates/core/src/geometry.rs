//! Shared numerical geometry: rigid transforms, pinhole normalization,
//! plane projection and projection onto SO(3).
//!
//! Conventions used throughout the crate:
//!
//! - A [`RigidTransform`] `T_ab` maps points expressed in frame `b` into
//!   frame `a`: `p_a = R p_b + t`. The calibration target is `T_cb`
//!   (camera from robot base), written `T_bc` in the calibration modules
//!   because it is "the base-to-camera transform".
//! - Rotations are vectorized column-major: `vec(R) = [R00, R10, R20, R01, ...]`.

use nalgebra::{Matrix3, Unit, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type UnitVector3 = Unit<Vector3<f64>>;

/// Orthogonality / determinant tolerance for a valid rotation.
pub const ROTATION_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("degenerate projection: ray is nearly parallel to the plane (|n·r| = {0:e})")]
    DegenerateProjection(f64),
    #[error("degenerate rotation: matrix is rank deficient (sigma = {0:?})")]
    DegenerateRotation([f64; 3]),
}

/// Rigid body transform `p' = R p + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a transform, rejecting matrices that are not proper rotations.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        let t = Self {
            rotation,
            translation,
        };
        if !t.is_valid() {
            return Err(GeometryError::InvalidInput(
                "rotation is not orthonormal with unit determinant".into(),
            ));
        }
        Ok(t)
    }

    pub fn from_rotation_vector(rotation_vector: Vector3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: rotation_exp(&rotation_vector),
            translation,
        }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    /// Pure rotation of `angle` radians about `axis`.
    pub fn from_axis_angle(axis: &UnitVector3, angle: f64) -> Self {
        Self {
            rotation: rotation_exp(&(axis.into_inner() * angle)),
            translation: Vector3::zeros(),
        }
    }

    /// Camera pose looking from `eye` at `target`, expressed as the
    /// camera-from-world transform. Camera axes follow the usual pinhole
    /// convention: +z forward, +x right, +y down in the image.
    pub fn look_at(
        eye: &Vector3<f64>,
        target: &Vector3<f64>,
        up: &Vector3<f64>,
    ) -> Result<Self, GeometryError> {
        let forward = target - eye;
        if forward.norm() < 1e-12 {
            return Err(GeometryError::InvalidInput("eye and target coincide".into()));
        }
        let z = forward.normalize();
        let x = z.cross(up);
        if x.norm() < 1e-9 {
            return Err(GeometryError::InvalidInput(
                "up vector is parallel to the viewing direction".into(),
            ));
        }
        let x = x.normalize();
        let y = z.cross(&x);
        // rows of camera_from_world are the camera axes in world coordinates
        let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        Ok(Self {
            rotation,
            translation: -(rotation * eye),
        })
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn transform_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn is_valid(&self) -> bool {
        is_rotation(&self.rotation, ROTATION_TOL) && self.translation.iter().all(|v| v.is_finite())
    }

    pub fn rotation_vector(&self) -> Vector3<f64> {
        rotation_log(&self.rotation)
    }
}

impl std::ops::Mul for RigidTransform {
    type Output = RigidTransform;

    fn mul(self, rhs: RigidTransform) -> RigidTransform {
        self.compose(&rhs)
    }
}

pub fn is_rotation(r: &Matrix3<f64>, tol: f64) -> bool {
    let ortho = (r.transpose() * r - Matrix3::identity()).norm();
    ortho < tol && (r.determinant() - 1.0).abs() < tol
}

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self, GeometryError> {
        let intr = Self { fx, fy, cx, cy };
        intr.validate()?;
        Ok(intr)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let finite = [self.fx, self.fy, self.cx, self.cy].iter().all(|v| v.is_finite());
        if !finite || self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(GeometryError::InvalidInput(format!(
                "intrinsics require finite values with fx, fy > 0 (got {self:?})"
            )));
        }
        Ok(())
    }

    /// Pinhole projection of a camera-frame point to pixels. Returns `None`
    /// for points at or behind the camera center.
    pub fn project(&self, p_cam: &Vector3<f64>) -> Option<[f64; 2]> {
        if p_cam.z <= 0.0 {
            return None;
        }
        Some([
            self.fx * p_cam.x / p_cam.z + self.cx,
            self.fy * p_cam.y / p_cam.z + self.cy,
        ])
    }

    /// Inverse of [`normalize_pixel`].
    pub fn denormalize(&self, p: &NormalizedImagePoint) -> [f64; 2] {
        [self.fx * p.u + self.cx, self.fy * p.v + self.cy]
    }
}

/// Point on the normalized image plane `z = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizedImagePoint {
    pub u: f64,
    pub v: f64,
}

impl NormalizedImagePoint {
    pub fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }

    /// Homogeneous ray `(u, v, 1)` in the camera frame.
    pub fn ray(&self) -> Vector3<f64> {
        Vector3::new(self.u, self.v, 1.0)
    }
}

pub fn normalize_pixel(
    pixel: [f64; 2],
    intr: &CameraIntrinsics,
) -> Result<NormalizedImagePoint, GeometryError> {
    if !pixel.iter().all(|v| v.is_finite()) {
        return Err(GeometryError::InvalidInput(format!(
            "non-finite pixel coordinate {pixel:?}"
        )));
    }
    intr.validate()?;
    Ok(NormalizedImagePoint {
        u: (pixel[0] - intr.cx) / intr.fx,
        v: (pixel[1] - intr.cy) / intr.fy,
    })
}

/// Orthonormal frame of a plane placed at unit distance from the camera
/// center along `normal`.
///
/// `e1` is the coordinate axis least aligned with the normal, made
/// orthogonal to it; `e2 = normal × e1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlaneFrame {
    pub normal: UnitVector3,
    pub e1: Vector3<f64>,
    pub e2: Vector3<f64>,
}

/// Rays closer than this to the plane direction are rejected.
pub const PARALLEL_RAY_TOL: f64 = 1e-9;

impl PlaneFrame {
    pub fn new(normal: &UnitVector3) -> Self {
        let n = normal.into_inner();
        let mut k = 0;
        for i in 1..3 {
            if n[i].abs() < n[k].abs() {
                k = i;
            }
        }
        let h = Vector3::ith(k, 1.0);
        let e1 = (h - n * h.dot(&n)).normalize();
        let e2 = n.cross(&e1);
        Self {
            normal: *normal,
            e1,
            e2,
        }
    }

    /// Intersection of the ray `(u, v, 1)` with the plane, in plane coordinates.
    pub fn project(&self, p: &NormalizedImagePoint) -> Result<Vector2<f64>, GeometryError> {
        let ray = p.ray();
        let d = self.normal.dot(&ray);
        if d.abs() <= PARALLEL_RAY_TOL || !d.is_finite() {
            return Err(GeometryError::DegenerateProjection(d));
        }
        let x = ray / d;
        Ok(Vector2::new(x.dot(&self.e1), x.dot(&self.e2)))
    }

    /// 3D camera-frame point of the plane coordinate `q`.
    pub fn lift(&self, q: &Vector2<f64>) -> Vector3<f64> {
        self.normal.into_inner() + self.e1 * q.x + self.e2 * q.y
    }
}

pub fn project_to_plane(
    p: &NormalizedImagePoint,
    normal: &UnitVector3,
) -> Result<Vector2<f64>, GeometryError> {
    PlaneFrame::new(normal).project(p)
}

/// Closest rotation to `m` in Frobenius norm (`U Vᵀ` with a determinant fix).
pub fn nearest_rotation(m: &Matrix3<f64>) -> Result<Matrix3<f64>, GeometryError> {
    if !m.iter().all(|v| v.is_finite()) {
        return Err(GeometryError::InvalidInput("non-finite matrix".into()));
    }
    let svd = m.svd(true, true);
    let (mut u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let s = svd.singular_values;
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
    let sorted = [s[order[0]], s[order[1]], s[order[2]]];
    if sorted[0] == 0.0 || sorted[1] < 1e-12 * sorted[0] {
        return Err(GeometryError::DegenerateRotation(sorted));
    }
    if (u * v_t).determinant() < 0.0 {
        let k = order[2];
        u.column_mut(k).neg_mut();
    }
    Ok(u * v_t)
}

/// Skew-symmetric cross-product matrix `[v]×`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

pub fn rotation_exp(w: &Vector3<f64>) -> Matrix3<f64> {
    nalgebra::Rotation3::new(*w).into_inner()
}

/// Axis-angle vector of a rotation with angle in `[0, π]`.
///
/// At exactly π the axis sign is ambiguous; the representative whose first
/// nonzero component is positive is returned.
pub fn rotation_log(r: &Matrix3<f64>) -> Vector3<f64> {
    let vee = Vector3::new(
        r[(2, 1)] - r[(1, 2)],
        r[(0, 2)] - r[(2, 0)],
        r[(1, 0)] - r[(0, 1)],
    );
    let cos = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let sin = (0.5 * vee.norm()).min(1.0);
    let angle = sin.atan2(cos);
    if angle < 1e-12 {
        return vee * 0.5;
    }
    if cos > -0.9 {
        return vee * (angle / (2.0 * sin));
    }
    // near π: recover the axis from the symmetric part
    let b = (r + r.transpose()) * 0.5 - Matrix3::identity() * cos;
    let mut k = 0;
    for i in 1..3 {
        if b[(i, i)] > b[(k, k)] {
            k = i;
        }
    }
    let mut axis = b.column(k).into_owned() / b[(k, k)].max(f64::MIN_POSITIVE).sqrt();
    axis.normalize_mut();
    if vee.norm() > 1e-14 {
        if axis.dot(&vee) < 0.0 {
            axis = -axis;
        }
    } else if let Some(first) = axis.iter().find(|c| c.abs() > 1e-12) {
        if *first < 0.0 {
            axis = -axis;
        }
    }
    axis * angle
}

/// Geodesic distance on SO(3): the angle of `a⁻¹ b`.
pub fn geodesic_angle(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    rotation_log(&(a.transpose() * b))
        .norm()
        .min(std::f64::consts::PI)
}

/// Unsigned angle between two vectors, robust near 0 and π.
pub fn angle_between(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    a.cross(b).norm().atan2(a.dot(b))
}

/// Column-major vectorization of a 3×3 matrix.
pub fn vec_col_major(m: &Matrix3<f64>) -> nalgebra::SVector<f64, 9> {
    nalgebra::SVector::<f64, 9>::from_column_slice(m.as_slice())
}

/// Inverse of [`vec_col_major`].
pub fn unvec_col_major(v: &nalgebra::SVector<f64, 9>) -> Matrix3<f64> {
    Matrix3::from_column_slice(v.as_slice())
}
