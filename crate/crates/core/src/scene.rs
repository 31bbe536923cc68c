//! Ground-truth simulator producing keypoint trajectories for exploratory
//! motions, plus the JSON Lines trajectory interchange format.
//!
//! Keypoints are rigidly attached to links. Executing a motion sweeps the
//! moving joint uniformly over `frames` steps; every keypoint on a link at or
//! beyond the moving joint is transformed into the camera, projected, perturbed
//! by the tracker noise model and normalized by the intrinsics.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{normalize_pixel, CameraIntrinsics, NormalizedImagePoint, RigidTransform, UnitVector3};
use crate::planner::ExploratoryMotion;
use crate::robot::{JointConfiguration, RobotModel};

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("motion {motion_id}: no keypoint stayed visible during the sweep")]
    EmptyObservation { motion_id: usize },
    #[error(transparent)]
    Robot(#[from] crate::robot::RobotError),
}

#[derive(Debug, Error)]
pub enum TrajectoryFileError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("motion {motion_id}: records disagree on {field}")]
    Inconsistent { motion_id: usize, field: &'static str },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Statistical stand-in for a feature tracker.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSpec {
    /// Isotropic Gaussian pixel noise (pixels).
    pub pixel_sigma: f64,
    /// Per-frame probability that a track is lost (the trajectory ends there).
    pub dropout_prob: f64,
    /// Probability that a trajectory is replaced by a drifting straight track.
    pub outlier_prob: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            pixel_sigma: 0.0,
            dropout_prob: 0.0,
            outlier_prob: 0.0,
        }
    }
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<(), SceneError> {
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        if !(self.pixel_sigma >= 0.0 && self.pixel_sigma.is_finite())
            || !prob(self.dropout_prob)
            || !prob(self.outlier_prob)
        {
            return Err(SceneError::InvalidScene(format!(
                "noise needs sigma >= 0 and probabilities in [0, 1] (got {self:?})"
            )));
        }
        Ok(())
    }
}

/// Keypoints rigidly attached to one link, in that link's frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkKeypoints {
    pub link: usize,
    pub points: Vec<Vector3<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneDefinition {
    pub robot: RobotModel,
    /// Ground-truth base-to-camera transform: `p_cam = R p_base + t`.
    pub camera_from_base: RigidTransform,
    pub intrinsics: CameraIntrinsics,
    /// `(width, height)` in pixels; keypoints leaving the image are dropped.
    pub image_size: Option<(f64, f64)>,
    pub keypoints: Vec<LinkKeypoints>,
    pub noise: NoiseSpec,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectorySample {
    pub point: NormalizedImagePoint,
    /// Displacement of the moving joint from the start of the motion (rad).
    pub delta: f64,
}

/// Track of one keypoint during one motion.
///
/// `delta` runs monotonically from 0 toward the motion's signed sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointTrajectory {
    pub motion_id: usize,
    pub keypoint_id: usize,
    pub samples: Vec<TrajectorySample>,
    /// Simulator label: the track was replaced by a drifting outlier.
    /// Not serialized; consumers must not rely on it.
    pub injected_outlier: bool,
}

impl KeypointTrajectory {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn to_record(&self, motion: &ExploratoryMotion) -> TrajectoryRecord {
        TrajectoryRecord {
            motion_id: self.motion_id,
            keypoint_id: self.keypoint_id,
            joint: motion.joint,
            sweep: motion.sweep,
            start_config: motion.start_config.0.clone(),
            samples: self
                .samples
                .iter()
                .map(|s| [s.point.u, s.point.v, s.delta])
                .collect(),
        }
    }
}

/// Identifier of one keypoint: `(link, index within that link)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeypointRef {
    pub id: usize,
    pub link: usize,
    pub local: Vector3<f64>,
}

impl SceneDefinition {
    pub fn validate(&self) -> Result<(), SceneError> {
        if !self.camera_from_base.is_valid() {
            return Err(SceneError::InvalidScene(
                "camera pose is not a rigid transform".into(),
            ));
        }
        self.intrinsics
            .validate()
            .map_err(|e| SceneError::InvalidScene(e.to_string()))?;
        self.noise.validate()?;
        if let Some((w, h)) = self.image_size {
            if !(w > 0.0 && h > 0.0) {
                return Err(SceneError::InvalidScene("image size must be positive".into()));
            }
        }
        for lk in &self.keypoints {
            if lk.link >= self.robot.dof() {
                return Err(SceneError::InvalidScene(format!(
                    "keypoints reference link {} but the robot has {} links",
                    lk.link,
                    self.robot.dof()
                )));
            }
            if !lk.points.iter().all(|p| p.iter().all(|c| c.is_finite())) {
                return Err(SceneError::InvalidScene("non-finite keypoint".into()));
            }
        }
        if self.keypoints.iter().all(|lk| lk.points.is_empty()) {
            return Err(SceneError::InvalidScene("scene declares no keypoints".into()));
        }
        Ok(())
    }

    /// All keypoints with stable global ids, in declaration order.
    pub fn keypoint_refs(&self) -> Vec<KeypointRef> {
        let mut out = Vec::new();
        for lk in &self.keypoints {
            for p in &lk.points {
                out.push(KeypointRef {
                    id: out.len(),
                    link: lk.link,
                    local: *p,
                });
            }
        }
        out
    }

    /// Joints that move at least one keypoint.
    pub fn plannable_joints(&self) -> Vec<usize> {
        let deepest = self
            .keypoints
            .iter()
            .filter(|lk| !lk.points.is_empty())
            .map(|lk| lk.link)
            .max();
        match deepest {
            Some(d) => (0..=d).collect(),
            None => Vec::new(),
        }
    }

    /// Camera-frame rotation axis and joint origin of `motion` under the
    /// ground-truth transform.
    pub fn ground_truth_axis(
        &self,
        motion: &ExploratoryMotion,
    ) -> Result<(UnitVector3, Vector3<f64>), SceneError> {
        let (axis_b, pos_b) = self
            .robot
            .forward_axis_position(&motion.start_config, motion.joint)?;
        let axis_c = UnitVector3::new_normalize(self.camera_from_base.transform_vector(&axis_b));
        Ok((axis_c, self.camera_from_base.transform_point(&pos_b)))
    }

    fn in_image(&self, px: &[f64; 2]) -> bool {
        match self.image_size {
            Some((w, h)) => px[0] >= 0.0 && px[0] < w && px[1] >= 0.0 && px[1] < h,
            None => true,
        }
    }

    /// Simulates `motion` and returns one trajectory per tracked keypoint.
    pub fn execute_motion(
        &self,
        motion: &ExploratoryMotion,
        motion_id: usize,
        frames: usize,
        seed: u64,
    ) -> Result<Vec<KeypointTrajectory>, SceneError> {
        if frames < 2 {
            return Err(SceneError::InvalidScene("frames must be at least 2".into()));
        }
        if motion.joint >= self.robot.dof() {
            return Err(crate::robot::RobotError::InvalidJoint {
                index: motion.joint,
                count: self.robot.dof(),
            }
            .into());
        }
        let deltas: Vec<f64> = (0..frames)
            .map(|k| motion.sweep * k as f64 / (frames - 1) as f64)
            .collect();
        let configs: Vec<JointConfiguration> = deltas.iter().map(|d| motion.config_at(*d)).collect();

        // camera-from-link poses per frame, for every link the motion moves
        let mut link_poses: BTreeMap<usize, Vec<RigidTransform>> = BTreeMap::new();
        for link in motion.joint..self.robot.dof() {
            let poses = configs
                .iter()
                .map(|q| {
                    self.robot
                        .link_pose(q, link)
                        .map(|p| self.camera_from_base.compose(&p))
                })
                .collect::<Result<Vec<_>, _>>()?;
            link_poses.insert(link, poses);
        }

        let pixel_noise = Normal::new(0.0, self.noise.pixel_sigma.max(0.0))
            .map_err(|e| SceneError::InvalidScene(e.to_string()))?;
        let mut out = Vec::new();
        for kp in self.keypoint_refs() {
            let Some(poses) = link_poses.get(&kp.link) else {
                continue;
            };
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, kp.id as u64));
            let pixels: Option<Vec<[f64; 2]>> = poses
                .iter()
                .map(|pose| self.intrinsics.project(&pose.transform_point(&kp.local)))
                .collect();
            let Some(mut pixels) = pixels else {
                continue;
            };
            if !pixels.iter().all(|p| self.in_image(p)) {
                continue;
            }

            let outlier = self.noise.outlier_prob > 0.0 && rng.random_bool(self.noise.outlier_prob);
            if outlier {
                let heading = rng.random_range(0.0..std::f64::consts::TAU);
                let speed = rng.random_range(1.0..4.0);
                let origin = pixels[0];
                for (k, p) in pixels.iter_mut().enumerate() {
                    let s = speed * k as f64;
                    *p = [origin[0] + s * heading.cos(), origin[1] + s * heading.sin()];
                }
            }
            if self.noise.pixel_sigma > 0.0 {
                for p in pixels.iter_mut() {
                    p[0] += pixel_noise.sample(&mut rng);
                    p[1] += pixel_noise.sample(&mut rng);
                }
            }
            let mut keep = frames;
            if self.noise.dropout_prob > 0.0 {
                for k in 0..frames {
                    if rng.random_bool(self.noise.dropout_prob) {
                        keep = k;
                        break;
                    }
                }
            }
            if keep == 0 {
                continue;
            }
            let samples = pixels[..keep]
                .iter()
                .zip(&deltas)
                .map(|(px, &delta)| {
                    normalize_pixel(*px, &self.intrinsics)
                        .map(|point| TrajectorySample { point, delta })
                        .map_err(|e| SceneError::InvalidScene(e.to_string()))
                })
                .collect::<Result<Vec<_>, _>>()?;
            out.push(KeypointTrajectory {
                motion_id,
                keypoint_id: kp.id,
                samples,
                injected_outlier: outlier,
            });
        }
        if out.is_empty() {
            return Err(SceneError::EmptyObservation { motion_id });
        }
        Ok(out)
    }

    /// Demonstration scene: the built-in seven-joint arm with four keypoints
    /// on each link, viewed by a 1920×1080 camera.
    pub fn demo(camera_from_base: RigidTransform, noise: NoiseSpec) -> Self {
        let robot = RobotModel::seven_dof_arm();
        let keypoints = (0..robot.dof())
            .map(|link| LinkKeypoints {
                link,
                points: demo_link_points(link),
            })
            .collect();
        Self {
            robot,
            camera_from_base,
            intrinsics: CameraIntrinsics {
                fx: 1380.0,
                fy: 1380.0,
                cx: 960.0,
                cy: 540.0,
            },
            image_size: Some((1920.0, 1080.0)),
            keypoints,
            noise,
        }
    }
}

fn demo_link_points(link: usize) -> Vec<Vector3<f64>> {
    // a ring of surface corners around each link frame, staggered along the
    // joint axis and twisted per link; the last link carries a gripper-sized
    // cluster past the flange
    let (r, z0, n) = if link == 6 {
        (0.1, 0.17, 10)
    } else {
        (0.08, 0.0, 8)
    };
    let twist = 0.7 * link as f64;
    (0..n)
        .map(|i| {
            let phi = twist + i as f64 * std::f64::consts::TAU / n as f64;
            let z = z0 + [-0.07, 0.02, 0.07, -0.03][i % 4];
            let radius = r * [1.0, 0.7, 1.2, 0.85][(i / 2) % 4];
            Vector3::new(radius * phi.cos(), radius * phi.sin(), z)
        })
        .collect()
}

/// SplitMix64 finalizer over `(seed, stream)`; gives decorrelated
/// sub-seeds for independent random streams.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed
        ^ stream
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One line of the trajectory interchange file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryRecord {
    pub motion_id: usize,
    pub keypoint_id: usize,
    pub joint: usize,
    pub sweep: f64,
    pub start_config: Vec<f64>,
    /// `[u, v, delta]` triples.
    pub samples: Vec<[f64; 3]>,
}

impl TrajectoryRecord {
    pub fn motion(&self) -> ExploratoryMotion {
        ExploratoryMotion {
            start_config: JointConfiguration(self.start_config.clone()),
            joint: self.joint,
            sweep: self.sweep,
        }
    }

    pub fn trajectory(&self) -> KeypointTrajectory {
        KeypointTrajectory {
            motion_id: self.motion_id,
            keypoint_id: self.keypoint_id,
            samples: self
                .samples
                .iter()
                .map(|s| TrajectorySample {
                    point: NormalizedImagePoint::new(s[0], s[1]),
                    delta: s[2],
                })
                .collect(),
            injected_outlier: false,
        }
    }
}

pub fn write_jsonl<W: Write>(mut w: W, records: &[TrajectoryRecord]) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

/// Parses a trajectory file; blank lines are skipped, line numbers are 1-based.
pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<TrajectoryRecord>, TrajectoryFileError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TrajectoryRecord = serde_json::from_str(&line).map_err(|e| TrajectoryFileError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if rec.samples.iter().flatten().any(|v| !v.is_finite()) || !rec.sweep.is_finite() {
            return Err(TrajectoryFileError::Parse {
                line: i + 1,
                message: "non-finite value".into(),
            });
        }
        out.push(rec);
    }
    Ok(out)
}

/// A recorded motion with its trajectories.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordedMotion {
    pub motion_id: usize,
    pub motion: ExploratoryMotion,
    pub trajectories: Vec<KeypointTrajectory>,
}

/// Groups records by motion id (ascending), checking that every record of a
/// motion describes the same motion.
pub fn group_records(records: &[TrajectoryRecord]) -> Result<Vec<RecordedMotion>, TrajectoryFileError> {
    let mut by_motion: BTreeMap<usize, RecordedMotion> = BTreeMap::new();
    for rec in records {
        let entry = by_motion.entry(rec.motion_id).or_insert_with(|| RecordedMotion {
            motion_id: rec.motion_id,
            motion: rec.motion(),
            trajectories: Vec::new(),
        });
        let m = &entry.motion;
        if m.joint != rec.joint {
            return Err(TrajectoryFileError::Inconsistent {
                motion_id: rec.motion_id,
                field: "joint",
            });
        }
        if m.sweep.to_bits() != rec.sweep.to_bits() {
            return Err(TrajectoryFileError::Inconsistent {
                motion_id: rec.motion_id,
                field: "sweep",
            });
        }
        if m.start_config.0 != rec.start_config {
            return Err(TrajectoryFileError::Inconsistent {
                motion_id: rec.motion_id,
                field: "start_config",
            });
        }
        entry.trajectories.push(rec.trajectory());
    }
    Ok(by_motion.into_values().collect())
}
