//! Serial-manipulator kinematics for revolute chains.
//!
//! Joints and links are indexed from 0. Joint `j` sits at the end of the
//! fixed transform `parent_to_joint[j]` (expressed in the frame of link
//! `j - 1`, or the base for `j = 0`) and rotates link `j` about its local
//! axis. Rotating joint `j` therefore moves every link `>= j`.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{RigidTransform, UnitVector3};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RobotError {
    #[error("joint index {index} out of range for a {count}-joint robot")]
    InvalidJoint { index: usize, count: usize },
    #[error("configuration has {got} angles, robot has {expected} joints")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid robot description: {0}")]
    InvalidModel(String),
    #[error("non-finite joint configuration")]
    NonFinite,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Joint {
    /// Fixed mount of this joint relative to the previous link.
    pub parent_to_joint: RigidTransform,
    /// Rotation axis in the joint's local frame.
    pub axis: UnitVector3,
    /// `(min, max)` joint angle in radians.
    pub limits: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotModel {
    joints: Vec<Joint>,
}

/// Joint angles in radians, one per joint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct JointConfiguration(pub Vec<f64>);

impl JointConfiguration {
    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn angles(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Copy with joint `j` displaced by `delta`.
    pub fn with_offset(&self, j: usize, delta: f64) -> Self {
        let mut out = self.clone();
        out.0[j] += delta;
        out
    }
}

impl RobotModel {
    pub fn new(joints: Vec<Joint>) -> Result<Self, RobotError> {
        if joints.is_empty() {
            return Err(RobotError::InvalidModel("robot needs at least one joint".into()));
        }
        for (i, j) in joints.iter().enumerate() {
            if !j.parent_to_joint.is_valid() {
                return Err(RobotError::InvalidModel(format!(
                    "joint {i}: mount is not a rigid transform"
                )));
            }
            if ((j.axis.norm() - 1.0).abs() > 1e-9) || !j.axis.iter().all(|c| c.is_finite()) {
                return Err(RobotError::InvalidModel(format!(
                    "joint {i}: axis is not a unit vector"
                )));
            }
            let (lo, hi) = j.limits;
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(RobotError::InvalidModel(format!(
                    "joint {i}: limits must satisfy min < max (got {lo}, {hi})"
                )));
            }
        }
        Ok(Self { joints })
    }

    pub fn joints(&self) -> &[Joint] {
        &self.joints
    }

    pub fn dof(&self) -> usize {
        self.joints.len()
    }

    fn check_config(&self, q: &JointConfiguration) -> Result<(), RobotError> {
        if q.len() != self.dof() {
            return Err(RobotError::DimensionMismatch {
                expected: self.dof(),
                got: q.len(),
            });
        }
        if !q.0.iter().all(|a| a.is_finite()) {
            return Err(RobotError::NonFinite);
        }
        Ok(())
    }

    fn check_index(&self, index: usize) -> Result<(), RobotError> {
        if index >= self.dof() {
            return Err(RobotError::InvalidJoint {
                index,
                count: self.dof(),
            });
        }
        Ok(())
    }

    pub fn within_limits(&self, q: &JointConfiguration) -> bool {
        q.len() == self.dof()
            && self
                .joints
                .iter()
                .zip(&q.0)
                .all(|(j, &a)| a >= j.limits.0 && a <= j.limits.1)
    }

    /// Base-frame poses of every joint frame (before the joint's own rotation)
    /// and every link frame (after it), up to and including `last`.
    fn frames_upto(&self, q: &JointConfiguration, last: usize) -> (RigidTransform, RigidTransform) {
        let mut link = RigidTransform::identity();
        let mut joint = RigidTransform::identity();
        for (j, angle) in self.joints.iter().zip(&q.0).take(last + 1) {
            joint = link.compose(&j.parent_to_joint);
            link = joint.compose(&RigidTransform::from_axis_angle(&j.axis, *angle));
        }
        (joint, link)
    }

    /// Base-frame rotation axis and origin of joint `j` under configuration `q`.
    pub fn forward_axis_position(
        &self,
        q: &JointConfiguration,
        j: usize,
    ) -> Result<(UnitVector3, Vector3<f64>), RobotError> {
        self.check_index(j)?;
        self.check_config(q)?;
        let (joint, _) = self.frames_upto(q, j);
        let axis = UnitVector3::new_normalize(joint.rotation * self.joints[j].axis.into_inner());
        Ok((axis, joint.translation))
    }

    /// Base-frame pose of link `link`.
    pub fn link_pose(&self, q: &JointConfiguration, link: usize) -> Result<RigidTransform, RobotError> {
        self.check_index(link)?;
        self.check_config(q)?;
        Ok(self.frames_upto(q, link).1)
    }

    pub fn link_points_world(
        &self,
        q: &JointConfiguration,
        link: usize,
        local_points: &[Vector3<f64>],
    ) -> Result<Vec<Vector3<f64>>, RobotError> {
        let pose = self.link_pose(q, link)?;
        Ok(local_points.iter().map(|p| pose.transform_point(p)).collect())
    }

    /// Origins of all joints, handy for floor/workspace feasibility checks.
    pub fn joint_positions(&self, q: &JointConfiguration) -> Result<Vec<Vector3<f64>>, RobotError> {
        self.check_config(q)?;
        let mut out = Vec::with_capacity(self.dof());
        let mut link = RigidTransform::identity();
        for (j, angle) in self.joints.iter().zip(&q.0) {
            let joint = link.compose(&j.parent_to_joint);
            out.push(joint.translation);
            link = joint.compose(&RigidTransform::from_axis_angle(&j.axis, *angle));
        }
        Ok(out)
    }

    /// Seven-joint arm with the link lengths of a common research manipulator.
    pub fn seven_dof_arm() -> Self {
        use std::f64::consts::FRAC_PI_2;
        // (a, d, alpha) in the modified (Craig) convention
        let params: [(f64, f64, f64); 7] = [
            (0.0, 0.333, 0.0),
            (0.0, 0.0, -FRAC_PI_2),
            (0.0, 0.316, FRAC_PI_2),
            (0.0825, 0.0, FRAC_PI_2),
            (-0.0825, 0.384, -FRAC_PI_2),
            (0.0, 0.0, FRAC_PI_2),
            (0.088, 0.0, FRAC_PI_2),
        ];
        let limits = [
            (-2.8973, 2.8973),
            (-1.7628, 1.7628),
            (-2.8973, 2.8973),
            (-3.0718, -0.0698),
            (-2.8973, 2.8973),
            (-0.0175, 3.7525),
            (-2.8973, 2.8973),
        ];
        let joints = params
            .iter()
            .zip(limits)
            .map(|(&(a, d, alpha), limits)| Joint {
                parent_to_joint: modified_dh(a, d, alpha),
                axis: Vector3::z_axis(),
                limits,
            })
            .collect();
        Self::new(joints).expect("built-in arm is valid")
    }
}

/// Fixed part of a modified-DH link transform: `RotX(alpha) · TransX(a) · TransZ(d)`.
pub fn modified_dh(a: f64, d: f64, alpha: f64) -> RigidTransform {
    let rot_x = RigidTransform::from_axis_angle(&Vector3::x_axis(), alpha);
    rot_x.compose(&RigidTransform::from_translation(Vector3::new(a, 0.0, d)))
}
