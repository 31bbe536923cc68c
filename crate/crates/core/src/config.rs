//! TOML run configuration.
//!
//! A config file holds the scene (inline as `[scene]`, or a separate file
//! named by `scene_file`, resolved against the config's directory) and the
//! `[planner]`, `[estimation]`, `[pruning]`, `[convergence]`, `[run]` and
//! `[benchmark]` sections. Every section except the scene is optional.
//! See `docs/config.md` for the full schema.

use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibrator::{ConvergenceConfig, FaultConfig, LoopConfig, PruningConfig};
use crate::estimation::EstimationParams;
use crate::geometry::{CameraIntrinsics, RigidTransform};
use crate::planner::PlannerParams;
use crate::robot::{Joint, JointConfiguration, RobotModel};
use crate::scene::{LinkKeypoints, NoiseSpec, SceneDefinition};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {message}", path.display())]
    Parse { path: PathBuf, message: String },
    #[error("{}: field `{field}`: {message}", path.display())]
    Invalid {
        path: PathBuf,
        field: String,
        message: String,
    },
}

fn invalid(path: &Path, field: impl Into<String>, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        path: path.to_path_buf(),
        field: field.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraSection {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Image size in pixels; keypoints leaving the image are dropped.
    pub width: Option<f64>,
    pub height: Option<f64>,
}

/// Ground-truth camera pose, either `eye`/`target`/`up` or an explicit
/// `rotation_vector` + `translation` of the camera-from-base transform.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseSection {
    pub eye: Option<[f64; 3]>,
    pub target: Option<[f64; 3]>,
    pub up: Option<[f64; 3]>,
    pub rotation_vector: Option<[f64; 3]>,
    pub translation: Option<[f64; 3]>,
}

impl PoseSection {
    pub fn look_at(eye: [f64; 3], target: [f64; 3]) -> Self {
        Self {
            eye: Some(eye),
            target: Some(target),
            ..Default::default()
        }
    }

    pub fn to_transform(&self) -> Result<RigidTransform, String> {
        let v = |a: [f64; 3]| Vector3::from(a);
        match (self.eye, self.target, self.rotation_vector, self.translation) {
            (Some(eye), Some(target), None, None) => {
                let up = self.up.unwrap_or([0.0, 0.0, 1.0]);
                RigidTransform::look_at(&v(eye), &v(target), &v(up)).map_err(|e| e.to_string())
            }
            (None, None, Some(w), Some(t)) if self.up.is_none() => {
                Ok(RigidTransform::from_rotation_vector(v(w), v(t)))
            }
            _ => Err("give either eye + target (+ up) or rotation_vector + translation".into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointSection {
    /// Only `"revolute"` is supported.
    #[serde(default = "revolute")]
    pub kind: String,
    /// Fixed mount relative to the previous link.
    #[serde(default)]
    pub translation: [f64; 3],
    #[serde(default)]
    pub rotation_vector: [f64; 3],
    /// Local rotation axis; normalized on load.
    pub axis: [f64; 3],
    pub limits: [f64; 2],
}

fn revolute() -> String {
    "revolute".into()
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobotSection {
    /// `"seven_dof_arm"`; mutually exclusive with `joints`.
    pub preset: Option<String>,
    #[serde(default)]
    pub joints: Vec<JointSection>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeypointSection {
    /// `"demo"`: the built-in rings of points on every link.
    pub preset: Option<String>,
    #[serde(default)]
    pub links: Vec<LinkKeypoints>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSection {
    pub camera: CameraSection,
    /// Ground truth; required to simulate, optional when replaying a
    /// trajectory file.
    pub pose: Option<PoseSection>,
    #[serde(default)]
    pub robot: RobotSection,
    #[serde(default)]
    pub keypoints: KeypointSection,
    #[serde(default)]
    pub noise: NoiseSpec,
    /// When set, configurations that put any joint origin (beyond the first)
    /// below this height are infeasible for the planner.
    pub floor_z: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seeds: Vec<u64>,
    /// Upper bound on executed motions per run.
    pub motion_budget: usize,
    /// Frames sampled per motion.
    pub frames: usize,
    pub stop_on_convergence: bool,
    pub spurious_axis_prob: f64,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            seeds: vec![0],
            motion_budget: 60,
            frames: 60,
            stop_on_convergence: true,
            spurious_axis_prob: 0.0,
        }
    }
}

/// Camera poses drawn on a spherical band around `target`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RandomPoses {
    pub count: usize,
    pub seed: u64,
    /// Eye distance range from `target` (m).
    pub distance: [f64; 2],
    /// Elevation range above the horizontal through `target` (rad).
    pub elevation: [f64; 2],
    pub target: [f64; 3],
}

impl Default for RandomPoses {
    fn default() -> Self {
        Self {
            count: 10,
            seed: 0,
            distance: [1.2, 1.8],
            elevation: [0.15, 0.7],
            target: [0.0, 0.0, 0.45],
        }
    }
}

impl RandomPoses {
    /// Deterministic list of `count` look-at poses.
    pub fn generate(&self) -> Vec<PoseSection> {
        (0..self.count)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(crate::scene::mix_seed(self.seed, i as u64));
                let az: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                let el = sample_range(&mut rng, self.elevation);
                let d = sample_range(&mut rng, self.distance);
                let [tx, ty, tz] = self.target;
                let eye = [
                    tx + d * el.cos() * az.cos(),
                    ty + d * el.cos() * az.sin(),
                    tz + d * el.sin(),
                ];
                PoseSection::look_at(eye, self.target)
            })
            .collect()
    }
}

fn sample_range(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[1] > r[0] {
        rng.random_range(r[0]..r[1])
    } else {
        r[0]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkSection {
    /// Accepted-observation counts at which errors are recorded.
    pub motion_counts: Vec<usize>,
    /// Explicit camera poses; the scene pose is not used by the benchmark.
    pub poses: Vec<PoseSection>,
    pub random_poses: Option<RandomPoses>,
}

impl Default for BenchmarkSection {
    fn default() -> Self {
        Self {
            motion_counts: (3..=25).step_by(2).collect(),
            poses: Vec::new(),
            random_poses: None,
        }
    }
}

impl BenchmarkSection {
    /// Explicit poses followed by generated ones.
    pub fn all_poses(&self) -> Vec<PoseSection> {
        let mut out = self.poses.clone();
        if let Some(r) = &self.random_poses {
            out.extend(r.generate());
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    scene_file: Option<PathBuf>,
    scene: Option<SceneSection>,
    #[serde(default)]
    planner: PlannerParams,
    #[serde(default)]
    estimation: EstimationParams,
    #[serde(default)]
    pruning: PruningConfig,
    #[serde(default)]
    convergence: ConvergenceConfig,
    #[serde(default)]
    run: RunSection,
    #[serde(default)]
    benchmark: BenchmarkSection,
}

/// A validated run configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub scene: SceneSection,
    pub planner: PlannerParams,
    pub estimation: EstimationParams,
    pub pruning: PruningConfig,
    pub convergence: ConvergenceConfig,
    pub run: RunSection,
    pub benchmark: BenchmarkSection,
    /// Where the config was read from, for diagnostics.
    pub path: PathBuf,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = read(path)?;
        Self::parse(&text, path)
    }

    /// Parses config text; `path` anchors a relative `scene_file` and labels
    /// diagnostics.
    pub fn parse(text: &str, path: &Path) -> Result<Self, ConfigError> {
        let file: ConfigFile = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let scene = match (file.scene, file.scene_file) {
            (Some(s), None) => s,
            (None, Some(rel)) => {
                let scene_path = path.parent().unwrap_or(Path::new("")).join(rel);
                let text = read(&scene_path)?;
                toml::from_str(&text).map_err(|e| ConfigError::Parse {
                    path: scene_path.clone(),
                    message: e.to_string(),
                })?
            }
            (Some(_), Some(_)) => {
                return Err(invalid(
                    path,
                    "scene_file",
                    "give either [scene] or scene_file, not both",
                ))
            }
            (None, None) => return Err(invalid(path, "scene", "missing [scene] section or scene_file")),
        };
        let cfg = Self {
            scene,
            planner: file.planner,
            estimation: file.estimation,
            pruning: file.pruning,
            convergence: file.convergence,
            run: file.run,
            benchmark: file.benchmark,
            path: path.to_path_buf(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let p = &self.path;
        self.ground_truth()?;
        self.scene_with_pose(RigidTransform::identity())?;
        self.planner
            .validate()
            .map_err(|e| invalid(p, "planner", e.to_string()))?;
        self.pruning.validate().map_err(|e| invalid(p, "pruning", e))?;
        self.convergence
            .validate()
            .map_err(|e| invalid(p, "convergence", e))?;
        let est = &self.estimation;
        if !(est.dedup_tol >= 0.0 && est.rival_min_angle >= 0.0) {
            return Err(invalid(
                p,
                "estimation",
                "dedup_tol and rival_min_angle must be >= 0",
            ));
        }
        if est.refine_top == 0 {
            return Err(invalid(p, "estimation.refine_top", "must be >= 1"));
        }
        if !(est.ransac.line_tol > 0.0) || est.ransac.min_inliers < 2 || est.ransac.iterations == 0 {
            return Err(invalid(
                p,
                "estimation.ransac",
                "need line_tol > 0, min_inliers >= 2, iterations >= 1",
            ));
        }
        let run = &self.run;
        if run.seeds.is_empty() {
            return Err(invalid(p, "run.seeds", "at least one seed is required"));
        }
        if run.frames < 2 {
            return Err(invalid(p, "run.frames", "must be >= 2"));
        }
        if !(0.0..=1.0).contains(&run.spurious_axis_prob) {
            return Err(invalid(p, "run.spurious_axis_prob", "must lie in [0, 1]"));
        }
        let b = &self.benchmark;
        if b.motion_counts.is_empty() || b.motion_counts.contains(&0) {
            return Err(invalid(
                p,
                "benchmark.motion_counts",
                "need a non-empty list of positive counts",
            ));
        }
        for (i, pose) in b.poses.iter().enumerate() {
            pose.to_transform()
                .map_err(|e| invalid(p, format!("benchmark.poses[{i}]"), e))?;
        }
        if let Some(r) = &b.random_poses {
            let ok =
                r.distance[0] > 0.0 && r.distance[1] >= r.distance[0] && r.elevation[1] >= r.elevation[0];
            if !ok {
                return Err(invalid(
                    p,
                    "benchmark.random_poses",
                    "ranges must be [low, high] with positive distance",
                ));
            }
        }
        Ok(())
    }

    pub fn robot(&self) -> Result<RobotModel, ConfigError> {
        build_robot(&self.scene.robot).map_err(|(field, msg)| invalid(&self.path, field, msg))
    }

    /// Scene with the configured ground-truth pose.
    pub fn scene_definition(&self) -> Result<SceneDefinition, ConfigError> {
        let pose = self
            .ground_truth()?
            .ok_or_else(|| invalid(&self.path, "scene.pose", "a camera pose is required to simulate"))?;
        self.scene_with_pose(pose)
    }

    pub fn ground_truth(&self) -> Result<Option<RigidTransform>, ConfigError> {
        self.scene
            .pose
            .as_ref()
            .map(|p| p.to_transform().map_err(|e| invalid(&self.path, "scene.pose", e)))
            .transpose()
    }

    pub fn scene_with_pose(&self, camera_from_base: RigidTransform) -> Result<SceneDefinition, ConfigError> {
        let p = &self.path;
        let s = &self.scene;
        let robot = self.robot()?;
        let intrinsics = CameraIntrinsics::new(s.camera.fx, s.camera.fy, s.camera.cx, s.camera.cy)
            .map_err(|e| invalid(p, "scene.camera", e.to_string()))?;
        let image_size = match (s.camera.width, s.camera.height) {
            (Some(w), Some(h)) => Some((w, h)),
            (None, None) => None,
            _ => return Err(invalid(p, "scene.camera", "width and height go together")),
        };
        let keypoints = match (&s.keypoints.preset, s.keypoints.links.is_empty()) {
            (Some(name), true) if name == "demo" => {
                SceneDefinition::demo(RigidTransform::identity(), NoiseSpec::default())
                    .keypoints
                    .into_iter()
                    .filter(|lk| lk.link < robot.dof())
                    .collect()
            }
            (Some(name), true) => {
                return Err(invalid(
                    p,
                    "scene.keypoints.preset",
                    format!("unknown preset `{name}`"),
                ))
            }
            (None, false) => s.keypoints.links.clone(),
            (None, true) => s.keypoints.links.clone(),
            (Some(_), false) => {
                return Err(invalid(
                    p,
                    "scene.keypoints",
                    "give either preset or links, not both",
                ))
            }
        };
        let scene = SceneDefinition {
            robot,
            camera_from_base,
            intrinsics,
            image_size,
            keypoints,
            noise: s.noise,
        };
        scene.validate().map_err(|e| invalid(p, "scene", e.to_string()))?;
        Ok(scene)
    }

    /// Planner feasibility predicate derived from the scene.
    pub fn feasibility(
        &self,
        robot: &RobotModel,
    ) -> impl Fn(&JointConfiguration) -> bool + Clone + Send + Sync {
        let robot = robot.clone();
        let floor = self.scene.floor_z;
        move |q: &JointConfiguration| match floor {
            None => true,
            Some(z) => robot
                .joint_positions(q)
                .map(|ps| ps.iter().skip(1).all(|p| p.z >= z))
                .unwrap_or(false),
        }
    }

    /// Loop settings for one run with `seed`.
    pub fn loop_config(&self, seed: u64) -> LoopConfig {
        LoopConfig {
            estimation: self.estimation,
            pruning: self.pruning,
            convergence: self.convergence,
            max_iterations: self.run.motion_budget,
            stop_on_convergence: self.run.stop_on_convergence,
            stop_after_accepted: None,
            faults: FaultConfig {
                spurious_axis_prob: self.run.spurious_axis_prob,
            },
            seed,
        }
    }
}

fn read(path: &Path) -> Result<String, ConfigError> {
    std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn build_robot(section: &RobotSection) -> Result<RobotModel, (String, String)> {
    match (&section.preset, section.joints.is_empty()) {
        (Some(name), true) if name == "seven_dof_arm" => return Ok(RobotModel::seven_dof_arm()),
        (Some(name), true) => return Err(("scene.robot.preset".into(), format!("unknown preset `{name}`"))),
        (Some(_), false) => {
            return Err((
                "scene.robot".into(),
                "give either preset or joints, not both".into(),
            ))
        }
        (None, true) => return Ok(RobotModel::seven_dof_arm()),
        (None, false) => {}
    }
    let mut joints = Vec::new();
    for (i, j) in section.joints.iter().enumerate() {
        let field = |f: &str| format!("scene.robot.joints[{i}].{f}");
        if j.kind != "revolute" {
            return Err((
                field("kind"),
                format!("`{}` joints are not supported, only revolute", j.kind),
            ));
        }
        let axis = Vector3::from(j.axis);
        if !(axis.norm() > 1e-9) || !axis.iter().all(|v| v.is_finite()) {
            return Err((field("axis"), "must be a finite non-zero vector".into()));
        }
        if !(j.limits[0] < j.limits[1]) {
            return Err((field("limits"), "need min < max".into()));
        }
        joints.push(Joint {
            parent_to_joint: RigidTransform::from_rotation_vector(
                Vector3::from(j.rotation_vector),
                Vector3::from(j.translation),
            ),
            axis: nalgebra::Unit::new_normalize(axis),
            limits: (j.limits[0], j.limits[1]),
        });
    }
    RobotModel::new(joints).map_err(|e| ("scene.robot".into(), e.to_string()))
}
