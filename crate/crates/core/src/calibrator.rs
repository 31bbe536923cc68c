//! Camera-from-base estimation from accumulated motion observations.
//!
//! Each observation gives two constraints on `p_cam = R p_base + t`:
//! the robot joint axis rotated by `R` is parallel to the observed axis,
//! and the joint origin mapped into the camera frame lies on the plane
//! through the camera center spanned by the observed axis and reference
//! direction. Both are linear in `(vec(R), t)`; the rotation is solved with
//! the translation projected out, then snapped onto SO(3).

use nalgebra::{DMatrix, Matrix3, SVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conic::{fit_shared_conics, validate_ellipses};
use crate::estimation::{
    estimate_observation, estimate_rival_observation, EstimationParams, MotionObservation,
};
use crate::geometry::{
    angle_between, nearest_rotation, rotation_log, skew, unvec_col_major, RigidTransform, UnitVector3,
};
use crate::planner::{select_motion_among, ExploratoryMotion, PlannerParams, PlanningError};
use crate::robot::{JointConfiguration, RobotError, RobotModel};
use crate::scene::{mix_seed, KeypointTrajectory, RecordedMotion, SceneDefinition, SceneError};

/// Minimum number of observations for a solve.
pub const MIN_OBSERVATIONS: usize = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CalibrationError {
    #[error("need at least {MIN_OBSERVATIONS} observations, got {0}")]
    TooFewObservations(usize),
    #[error("reference planes share a pencil; translation is unobservable")]
    TranslationUnobservable,
    #[error("observed axes are all parallel; rotation is unobservable")]
    RotationUnobservable,
    #[error("relaxed rotation could not be projected: {0}")]
    Projection(String),
}

/// An accepted observation paired with the robot-side axis and joint origin
/// of its motion, in the base frame.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedObservation {
    pub observation: MotionObservation,
    pub axis_b: UnitVector3,
    pub pos_b: Vector3<f64>,
}

impl PairedObservation {
    pub fn new(observation: MotionObservation, robot: &RobotModel) -> Result<Self, RobotError> {
        let (axis_b, pos_b) =
            robot.forward_axis_position(&observation.motion.start_config, observation.motion.joint)?;
        Ok(Self {
            observation,
            axis_b,
            pos_b,
        })
    }

    /// Angle between the observed axis and the robot axis mapped by `t`.
    pub fn axis_error(&self, t: &RigidTransform) -> f64 {
        angle_between(&self.observation.axis, &(t.rotation * self.axis_b.into_inner()))
    }

    /// Distance of the mapped joint origin from the observed plane (m).
    pub fn plane_error(&self, t: &RigidTransform) -> f64 {
        self.observation
            .plane_normal()
            .dot(&t.transform_point(&self.pos_b))
            .abs()
    }
}

/// Stacked linear constraints on `(vec(R), t)`; `vec` is column-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintSystem {
    /// Axis rows, three per observation.
    pub h_r: DMatrix<f64>,
    /// Plane rows, one per observation.
    pub h_p: DMatrix<f64>,
    pub k_p: DMatrix<f64>,
    /// Observation index of every row of [`ConstraintSystem::h`].
    pub row_source: Vec<usize>,
    /// Observed camera-frame axes, one per observation.
    pub axes: Vec<UnitVector3>,
    /// Matching base-frame robot axes.
    pub robot_axes: Vec<Vector3<f64>>,
}

impl ConstraintSystem {
    pub fn len(&self) -> usize {
        self.h_p.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `[H_r; H_p]`, `4N × 9`.
    pub fn h(&self) -> DMatrix<f64> {
        let n = self.len();
        let mut h = DMatrix::zeros(4 * n, 9);
        h.rows_mut(0, 3 * n).copy_from(&self.h_r);
        h.rows_mut(3 * n, n).copy_from(&self.h_p);
        h
    }

    /// `[0; K_p]`, `4N × 3`.
    pub fn k(&self) -> DMatrix<f64> {
        let n = self.len();
        let mut k = DMatrix::zeros(4 * n, 3);
        k.rows_mut(3 * n, n).copy_from(&self.k_p);
        k
    }
}

/// `(aᵀ ⊗ I₃)`: maps `vec(R)` to `R a`.
fn kron_row(a: &Vector3<f64>) -> nalgebra::SMatrix<f64, 3, 9> {
    let mut m = nalgebra::SMatrix::<f64, 3, 9>::zeros();
    for c in 0..3 {
        for r in 0..3 {
            m[(r, 3 * c + r)] = a[c];
        }
    }
    m
}

pub fn assemble_constraints(
    observations: &[PairedObservation],
) -> Result<ConstraintSystem, CalibrationError> {
    let n = observations.len();
    if n < MIN_OBSERVATIONS {
        return Err(CalibrationError::TooFewObservations(n));
    }
    let mut h_r = DMatrix::zeros(3 * n, 9);
    let mut h_p = DMatrix::zeros(n, 9);
    let mut k_p = DMatrix::zeros(n, 3);
    let mut row_source = Vec::with_capacity(4 * n);
    for (i, o) in observations.iter().enumerate() {
        let axis_rows = skew(&o.observation.axis) * kron_row(&o.axis_b);
        h_r.view_mut((3 * i, 0), (3, 9)).copy_from(&axis_rows);
        row_source.extend([i; 3]);
        let rho = o.observation.plane_normal();
        let plane_row = rho.transpose() * kron_row(&o.pos_b);
        h_p.row_mut(i).copy_from(&plane_row);
        k_p.row_mut(i).copy_from(&rho.transpose());
    }
    row_source.extend(0..n);
    Ok(ConstraintSystem {
        h_r,
        h_p,
        k_p,
        row_source,
        axes: observations.iter().map(|o| o.observation.axis).collect(),
        robot_axes: observations.iter().map(|o| o.axis_b.into_inner()).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationEstimate {
    /// Camera-from-base transform.
    pub transform: RigidTransform,
    /// `‖S vec(R)‖ / ‖vec(R)‖` at the returned rotation.
    pub residual: f64,
    pub observation_count: usize,
    pub iteration: usize,
    /// Stage-2 pruning kept fewer than three observations and the stage-1
    /// set was used instead.
    pub stage2_fallback: bool,
}

/// Rank tolerance for the translation block, relative to its largest
/// singular value.
const K_RANK_TOL: f64 = 1e-9;
const AXIS_RANK_TOL: f64 = 1e-6;
/// Below this ratio the relaxed rotation has more than one null direction.
const RELAXED_RANK_TOL: f64 = 1e-9;

/// Orthogonal projector onto the complement of `col(K)`, `I − K K⁺`.
pub fn translation_projector(system: &ConstraintSystem) -> Result<DMatrix<f64>, CalibrationError> {
    let (u, _, _) = k_factors(system)?;
    let n = u.nrows();
    Ok(DMatrix::identity(n, n) - &u * u.transpose())
}

type SvdFactors = (DMatrix<f64>, nalgebra::DVector<f64>, DMatrix<f64>);

/// Thin SVD factors of `K` with a rank check.
fn k_factors(system: &ConstraintSystem) -> Result<SvdFactors, CalibrationError> {
    let svd = system.k().svd(true, true);
    let sv = svd.singular_values.clone();
    let max = sv.max();
    if !(max > 0.0) || sv.min() <= K_RANK_TOL * max {
        return Err(CalibrationError::TranslationUnobservable);
    }
    Ok((svd.u.expect("requested U"), sv, svd.v_t.expect("requested V")))
}

pub fn solve_calibration(system: &ConstraintSystem) -> Result<CalibrationEstimate, CalibrationError> {
    let n = system.len();
    if n < MIN_OBSERVATIONS {
        return Err(CalibrationError::TooFewObservations(n));
    }
    let axes = DMatrix::from_fn(n, 3, |r, c| system.axes[r][c]);
    let axis_sv = axes.singular_values();
    if axis_sv.len() < 2 || axis_sv[1] <= AXIS_RANK_TOL * axis_sv[0] {
        // singular values come sorted in decreasing order
        return Err(CalibrationError::RotationUnobservable);
    }

    let (u, sv, v_t) = k_factors(system)?;
    let h = system.h();
    let s = &h - &u * (u.transpose() * &h);

    let svd = s.clone().svd(false, true);
    let v = svd.v_t.expect("requested V");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|a, b| svd.singular_values[*a].total_cmp(&svd.singular_values[*b]));
    let sv_s = &svd.singular_values;
    let relaxed_unique = sv_s.len() == 9 && sv_s[order[1]] > RELAXED_RANK_TOL * sv_s[order[8]];
    let rotation = if relaxed_unique {
        let mut r = SVector::<f64, 9>::from_iterator(v.row(order[0]).iter().copied());
        if unvec_col_major(&r).determinant() < 0.0 {
            r = -r;
        }
        nearest_rotation(&unvec_col_major(&r))
    } else {
        // too few rows to pin down the relaxed problem: align the axes directly
        let m = system
            .axes
            .iter()
            .zip(&system.robot_axes)
            .fold(Matrix3::zeros(), |m, (c, b)| m + c.into_inner() * b.transpose());
        nearest_rotation(&m)
    }
    .map_err(|e| CalibrationError::Projection(e.to_string()))?;
    let r_vec = crate::geometry::vec_col_major(&rotation);
    let r_dyn = nalgebra::DVector::from_column_slice(r_vec.as_slice());

    // t = −K⁺ H r with K⁺ = V Σ⁻¹ Uᵀ
    let hr = &h * &r_dyn;
    let ut_hr = u.transpose() * &hr;
    let scaled = ut_hr.component_div(&sv);
    let t_dyn = -(v_t.transpose() * scaled);
    let translation = Vector3::new(t_dyn[0], t_dyn[1], t_dyn[2]);
    let residual = (&s * &r_dyn).norm() / r_dyn.norm();
    Ok(CalibrationEstimate {
        transform: RigidTransform {
            rotation,
            translation,
        },
        residual,
        observation_count: n,
        iteration: 0,
        stage2_fallback: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruningConfig {
    /// Minimum `(second − best) / second` candidate score gap.
    pub ambiguity_ratio_min: f64,
    /// Maximum axis reprojection angle (rad).
    pub axis_tol: f64,
    /// Maximum distance of the joint origin from the observed plane (m).
    pub plane_tol: f64,
    /// Minimum fraction of trajectories whose centers fit the centerline.
    pub agreement_min: f64,
}

impl Default for PruningConfig {
    fn default() -> Self {
        Self {
            ambiguity_ratio_min: 0.05,
            axis_tol: 0.1,
            plane_tol: 0.05,
            agreement_min: 0.6,
        }
    }
}

impl PruningConfig {
    pub fn validate(&self) -> Result<(), String> {
        let all = [
            self.ambiguity_ratio_min,
            self.axis_tol,
            self.plane_tol,
            self.agreement_min,
        ];
        if all.iter().any(|v| !(*v > 0.0)) {
            return Err(format!("pruning thresholds must be positive: {self:?}"));
        }
        Ok(())
    }
}

pub fn passes_stage1(o: &MotionObservation, cfg: &PruningConfig) -> bool {
    stage1_failure(o, cfg).is_none()
}

/// Why `o` fails stage 1, if it does.
pub fn stage1_failure(o: &MotionObservation, cfg: &PruningConfig) -> Option<String> {
    if o.inlier_ratio < cfg.agreement_min {
        return Some(format!(
            "stage 1: centerline agreement {:.3} below {}",
            o.inlier_ratio, cfg.agreement_min
        ));
    }
    if o.score_gap() < cfg.ambiguity_ratio_min {
        return Some(format!(
            "stage 1: ambiguous axis, score gap {:.4} below {}",
            o.score_gap(),
            cfg.ambiguity_ratio_min
        ));
    }
    None
}

/// Observations that most trajectories agree on and that are not ambiguous.
pub fn prune_stage1(observations: &[MotionObservation], cfg: &PruningConfig) -> Vec<MotionObservation> {
    observations
        .iter()
        .filter(|o| passes_stage1(o, cfg))
        .cloned()
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage2Result {
    /// Indices into the input that survive.
    pub kept: Vec<usize>,
    /// Too few survived, so every input was kept.
    pub fallback: bool,
}

/// Keeps observations consistent with a previous estimate.
pub fn prune_stage2(
    observations: &[PairedObservation],
    estimate: &RigidTransform,
    cfg: &PruningConfig,
) -> Stage2Result {
    let kept: Vec<usize> = observations
        .iter()
        .enumerate()
        .filter(|(_, o)| o.axis_error(estimate) <= cfg.axis_tol && o.plane_error(estimate) <= cfg.plane_tol)
        .map(|(i, _)| i)
        .collect();
    if kept.len() < MIN_OBSERVATIONS {
        return Stage2Result {
            kept: (0..observations.len()).collect(),
            fallback: true,
        };
    }
    Stage2Result {
        kept,
        fallback: false,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvergenceConfig {
    pub window: usize,
    /// Allowed range of the rotation vector (rad, 3) and translation (m, 3).
    pub gamma_max: [f64; 6],
}

impl Default for ConvergenceConfig {
    fn default() -> Self {
        Self {
            window: 5,
            gamma_max: [0.01; 6],
        }
    }
}

impl ConvergenceConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.window < 2 || self.gamma_max.iter().any(|g| !(*g > 0.0)) {
            return Err(format!(
                "convergence needs window >= 2 and positive thresholds: {self:?}"
            ));
        }
        Ok(())
    }
}

/// True once the last `window` estimates vary less than `gamma_max` in
/// every rotation-vector and translation component.
pub fn check_convergence(history: &[CalibrationEstimate], cfg: &ConvergenceConfig) -> bool {
    if history.len() < cfg.window || cfg.window == 0 {
        return false;
    }
    let recent = &history[history.len() - cfg.window..];
    let coords: Vec<[f64; 6]> = recent
        .iter()
        .map(|e| {
            let w = rotation_log(&e.transform.rotation);
            let t = e.transform.translation;
            [w.x, w.y, w.z, t.x, t.y, t.z]
        })
        .collect();
    (0..6).all(|d| {
        let (lo, hi) = coords
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), c| {
                (lo.min(c[d]), hi.max(c[d]))
            });
        hi - lo <= cfg.gamma_max[d]
    })
}

/// One motion's worth of input to the loop.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionInput {
    pub motion_id: usize,
    pub motion: ExploratoryMotion,
    /// Empty when nothing was visible.
    pub trajectories: Vec<KeypointTrajectory>,
}

#[derive(Debug, Error)]
pub enum SourceError {
    #[error("motion planning failed at iteration {iteration}: {source}")]
    Planning {
        iteration: usize,
        #[source]
        source: PlanningError,
    },
    #[error(transparent)]
    Scene(#[from] SceneError),
}

/// Supplies motions and their trajectories, one per iteration.
pub trait ObservationSource {
    /// `None` once the source is exhausted.
    fn next_motion(&mut self, iteration: usize) -> Result<Option<MotionInput>, SourceError>;
}

/// Plans and simulates motions against a scene.
///
/// Iteration `i` plans with seed stream `2i` and simulates with `2i + 1`,
/// so any prefix of a run is reproducible on its own.
pub struct LiveSource<'a, F> {
    pub scene: &'a SceneDefinition,
    pub planner: PlannerParams,
    pub feasible: F,
    pub seed: u64,
    pub frames: usize,
}

impl<'a, F> LiveSource<'a, F>
where
    F: Fn(&JointConfiguration) -> bool,
{
    pub fn new(
        scene: &'a SceneDefinition,
        planner: PlannerParams,
        feasible: F,
        seed: u64,
        frames: usize,
    ) -> Self {
        Self {
            scene,
            planner,
            feasible,
            seed,
            frames,
        }
    }
}

impl<F> ObservationSource for LiveSource<'_, F>
where
    F: Fn(&JointConfiguration) -> bool,
{
    fn next_motion(&mut self, iteration: usize) -> Result<Option<MotionInput>, SourceError> {
        let joints = self.scene.plannable_joints();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.seed, 2 * iteration as u64));
        let motion = select_motion_among(
            &self.scene.robot,
            &joints,
            &self.feasible,
            &mut rng,
            &self.planner,
        )
        .map_err(|source| SourceError::Planning { iteration, source })?;
        let sim_seed = mix_seed(self.seed, 2 * iteration as u64 + 1);
        let trajectories = match self
            .scene
            .execute_motion(&motion, iteration, self.frames, sim_seed)
        {
            Ok(t) => t,
            Err(SceneError::EmptyObservation { .. }) => Vec::new(),
            Err(e) => return Err(e.into()),
        };
        Ok(Some(MotionInput {
            motion_id: iteration,
            motion,
            trajectories,
        }))
    }
}

/// Replays recorded motions in `motion_id` order.
pub struct ReplaySource {
    motions: std::vec::IntoIter<RecordedMotion>,
}

impl ReplaySource {
    pub fn new(mut motions: Vec<RecordedMotion>) -> Self {
        motions.sort_by_key(|m| m.motion_id);
        Self {
            motions: motions.into_iter(),
        }
    }
}

impl ObservationSource for ReplaySource {
    fn next_motion(&mut self, _iteration: usize) -> Result<Option<MotionInput>, SourceError> {
        Ok(self.motions.next().map(|m| MotionInput {
            motion_id: m.motion_id,
            motion: m.motion,
            trajectories: m.trajectories,
        }))
    }
}

/// Deliberate faults for robustness experiments.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FaultConfig {
    /// Probability that a motion reports its runner-up axis candidate.
    pub spurious_axis_prob: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoopConfig {
    pub estimation: EstimationParams,
    pub pruning: PruningConfig,
    pub convergence: ConvergenceConfig,
    /// Upper bound on executed motions.
    pub max_iterations: usize,
    /// Stop as soon as the estimate converges; otherwise run the full budget.
    pub stop_on_convergence: bool,
    /// Also stop once this many observations have passed stage 1.
    pub stop_after_accepted: Option<usize>,
    pub faults: FaultConfig,
    /// Seeds fault injection only.
    pub seed: u64,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            estimation: EstimationParams::default(),
            pruning: PruningConfig::default(),
            convergence: ConvergenceConfig::default(),
            max_iterations: 60,
            stop_on_convergence: true,
            stop_after_accepted: None,
            faults: FaultConfig::default(),
            seed: 0,
        }
    }
}

/// Per-motion bookkeeping of a loop run.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub motion_id: usize,
    pub joint: usize,
    pub sweep: f64,
    /// Why the motion produced no observation, if it did not.
    pub rejection: Option<String>,
    /// Why the observation failed stage 1, if it did.
    pub stage1_failure: Option<String>,
    /// The observation was replaced by its runner-up candidate on purpose.
    pub injected_spurious: bool,
    pub passed_stage1: bool,
    /// Size of the set the estimate was solved from.
    pub used: usize,
    pub stage2_fallback: bool,
    /// Estimate after this motion (carried over when nothing was solved).
    pub estimate: Option<RigidTransform>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationRun {
    pub estimate: Option<CalibrationEstimate>,
    pub converged: bool,
    /// Executed motions at the first convergence, also when the run went on.
    pub converged_at: Option<usize>,
    pub iterations: Vec<IterationRecord>,
    /// Every usable observation in arrival order.
    pub observations: Vec<PairedObservation>,
    /// Parallel to `observations`: injected spurious label.
    pub spurious: Vec<bool>,
    /// Successive estimates (one per solve).
    pub history: Vec<CalibrationEstimate>,
    /// Parallel to `observations`: kept by the final stage-2 pass.
    pub final_stage2: Vec<bool>,
}

impl CalibrationRun {
    pub fn usable_count(&self) -> usize {
        self.observations.len()
    }

    /// Estimate right after the `accepted`-th observation that passed stage 1.
    pub fn estimate_at_accepted(&self, accepted: usize) -> Option<RigidTransform> {
        if accepted == 0 {
            return None;
        }
        self.iterations
            .iter()
            .filter(|r| r.passed_stage1)
            .nth(accepted - 1)
            .and_then(|r| r.estimate)
    }

    /// Number of observations that passed stage 1.
    pub fn accepted_count(&self) -> usize {
        self.iterations.iter().filter(|r| r.passed_stage1).count()
    }

    /// Estimate available after `motions` executed motions.
    pub fn estimate_after(&self, motions: usize) -> Option<RigidTransform> {
        if motions == 0 {
            return None;
        }
        self.iterations
            .get(motions - 1)
            .and_then(|r| r.estimate)
            .or_else(|| {
                (motions > self.iterations.len())
                    .then(|| self.iterations.last().and_then(|r| r.estimate))
                    .flatten()
            })
    }
}

#[derive(Debug, Error)]
pub enum LoopError {
    #[error(transparent)]
    Source(#[from] SourceError),
    #[error(transparent)]
    Robot(#[from] RobotError),
}

/// Select, execute, estimate, prune and solve until convergence or the
/// iteration budget runs out.
pub fn calibrate_loop(
    source: &mut dyn ObservationSource,
    robot: &RobotModel,
    cfg: &LoopConfig,
) -> Result<CalibrationRun, LoopError> {
    let mut run = CalibrationRun {
        estimate: None,
        converged: false,
        converged_at: None,
        iterations: Vec::new(),
        observations: Vec::new(),
        spurious: Vec::new(),
        history: Vec::new(),
        final_stage2: Vec::new(),
    };
    let mut stage1: Vec<bool> = Vec::new();

    for iteration in 0..cfg.max_iterations {
        let Some(input) = source.next_motion(iteration)? else {
            break;
        };
        let mut record = IterationRecord {
            iteration,
            motion_id: input.motion_id,
            joint: input.motion.joint,
            sweep: input.motion.sweep,
            rejection: None,
            stage1_failure: None,
            injected_spurious: false,
            passed_stage1: false,
            used: 0,
            stage2_fallback: false,
            estimate: run.estimate.as_ref().map(|e| e.transform),
        };
        let inject = cfg.faults.spurious_axis_prob > 0.0
            && ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed ^ 0x5eed_fa17, input.motion_id as u64))
                .random_bool(cfg.faults.spurious_axis_prob.min(1.0));
        match observe(&input, &cfg.estimation, inject) {
            Err(reason) => record.rejection = Some(reason),
            Ok((obs, spurious)) => {
                record.injected_spurious = spurious;
                record.stage1_failure = stage1_failure(&obs, &cfg.pruning);
                record.passed_stage1 = record.stage1_failure.is_none();
                stage1.push(record.passed_stage1);
                run.observations.push(PairedObservation::new(obs, robot)?);
                run.spurious.push(spurious);
                if record.passed_stage1 {
                    if let Some(est) = solve_pruned(&run, &stage1, cfg, iteration) {
                        record.used = est.observation_count;
                        record.stage2_fallback = est.stage2_fallback;
                        record.estimate = Some(est.transform);
                        run.history.push(est.clone());
                        run.estimate = Some(est);
                    }
                }
            }
        }
        run.iterations.push(record);
        run.converged = check_convergence(&run.history, &cfg.convergence);
        if run.converged && run.converged_at.is_none() {
            run.converged_at = Some(run.iterations.len());
        }
        if run.converged && cfg.stop_on_convergence {
            break;
        }
        if cfg
            .stop_after_accepted
            .is_some_and(|n| stage1.iter().filter(|k| **k).count() >= n)
        {
            break;
        }
    }

    // labels of the last stage-2 pass, for diagnostics
    run.final_stage2 = vec![false; run.observations.len()];
    let s1: Vec<usize> = (0..run.observations.len()).filter(|&i| stage1[i]).collect();
    if let Some(est) = &run.estimate {
        let subset: Vec<PairedObservation> = s1.iter().map(|&i| run.observations[i].clone()).collect();
        let res = prune_stage2(&subset, &est.transform, &cfg.pruning);
        for k in res.kept {
            run.final_stage2[s1[k]] = true;
        }
    }
    Ok(run)
}

fn observe(
    input: &MotionInput,
    params: &EstimationParams,
    inject_spurious: bool,
) -> Result<(MotionObservation, bool), String> {
    if input.trajectories.is_empty() {
        return Err("no visible keypoints".into());
    }
    let fit = fit_shared_conics(&input.trajectories).map_err(|e| format!("conic fit: {e}"))?;
    let fit = validate_ellipses(&fit);
    if fit.is_empty() {
        return Err("conic fit: no trajectory is a valid ellipse".into());
    }
    let res = if inject_spurious {
        estimate_rival_observation(&input.motion, &fit, &input.trajectories, params)
    } else {
        estimate_observation(&input.motion, &fit, &input.trajectories, params).map(|o| (o, false))
    };
    res.map_err(|e| format!("estimation: {e}"))
}

/// Solves from the stage-1 set, pruned against the previous estimate when
/// there is one.
fn solve_pruned(
    run: &CalibrationRun,
    stage1: &[bool],
    cfg: &LoopConfig,
    iteration: usize,
) -> Option<CalibrationEstimate> {
    let s1: Vec<PairedObservation> = run
        .observations
        .iter()
        .zip(stage1)
        .filter(|(_, k)| **k)
        .map(|(o, _)| o.clone())
        .collect();
    if s1.len() < MIN_OBSERVATIONS {
        return None;
    }
    let (set, fallback) = match &run.estimate {
        Some(prev) => {
            let res = prune_stage2(&s1, &prev.transform, &cfg.pruning);
            (
                res.kept.iter().map(|&i| s1[i].clone()).collect::<Vec<_>>(),
                res.fallback,
            )
        }
        None => (s1, false),
    };
    let system = assemble_constraints(&set).ok()?;
    let mut est = solve_calibration(&system).ok()?;
    est.iteration = iteration;
    est.stage2_fallback = fallback;
    Some(est)
}

/// Rotation of `axis` by `r` (for tests and diagnostics).
pub fn rotate_axis(r: &Matrix3<f64>, axis: &UnitVector3) -> UnitVector3 {
    UnitVector3::new_normalize(r * axis.into_inner())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{geodesic_angle, rotation_exp, vec_col_major};
    use crate::scene::NoiseSpec;
    use rand::Rng;

    fn random_transform(rng: &mut ChaCha8Rng) -> RigidTransform {
        let w = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let t = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(1.0..3.0),
        );
        RigidTransform::from_rotation_vector(w, t)
    }

    /// Exact observation of a base-frame axis line under `truth`.
    fn exact_pair(truth: &RigidTransform, axis_b: Vector3<f64>, pos_b: Vector3<f64>) -> PairedObservation {
        let axis_b = UnitVector3::new_normalize(axis_b);
        let axis_c = rotate_axis(&truth.rotation, &axis_b);
        let pos_c = truth.transform_point(&pos_b);
        // any other point of the axis line works as reference
        let ref_dir = UnitVector3::new_normalize(pos_c + 0.3 * axis_c.into_inner());
        PairedObservation {
            observation: MotionObservation {
                motion: ExploratoryMotion {
                    start_config: JointConfiguration(vec![0.0]),
                    joint: 0,
                    sweep: 1.0,
                },
                axis: axis_c,
                ref_direction: ref_dir,
                best_score: 0.0,
                second_score: 1.0,
                selected_score: 0.0,
                inlier_ratio: 1.0,
                trajectory_count: 4,
                inlier_keypoints: vec![0, 1, 2, 3],
                candidate_count: 2,
            },
            axis_b,
            pos_b,
        }
    }

    fn random_pairs(truth: &RigidTransform, n: usize, rng: &mut ChaCha8Rng) -> Vec<PairedObservation> {
        (0..n)
            .map(|_| {
                let a = Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                );
                let p = Vector3::new(
                    rng.random_range(-0.5..0.5),
                    rng.random_range(-0.5..0.5),
                    rng.random_range(0.0..1.0),
                );
                exact_pair(truth, a, p)
            })
            .collect()
    }

    #[test]
    fn ground_truth_satisfies_every_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let truth = random_transform(&mut rng);
        let pairs = random_pairs(&truth, 6, &mut rng);
        let sys = assemble_constraints(&pairs).unwrap();
        let r = nalgebra::DVector::from_column_slice(vec_col_major(&truth.rotation).as_slice());
        let t = nalgebra::DVector::from_column_slice(truth.translation.as_slice());
        assert!((&sys.h_r * &r).amax() < 1e-12);
        assert!((&sys.h_p * &r + &sys.k_p * &t).amax() < 1e-12);
        assert_eq!(sys.h().shape(), (24, 9));
        assert_eq!(sys.k().shape(), (24, 3));
        assert_eq!(sys.k().rows(0, 18).amax(), 0.0);
        assert_eq!(sys.row_source.len(), 24);
    }

    #[test]
    fn three_observations_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let truth = random_transform(&mut rng);
        let sys = assemble_constraints(&random_pairs(&truth, 3, &mut rng)).unwrap();
        assert_eq!(sys.h().shape(), (12, 9));
        assert_eq!(sys.k().shape(), (12, 3));
        assert_eq!(sys.k().rows(0, 9).amax(), 0.0);
        assert_eq!(
            assemble_constraints(&random_pairs(&truth, 2, &mut rng)),
            Err(CalibrationError::TooFewObservations(2))
        );
    }

    #[test]
    fn exact_systems_are_solved_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let truth = random_transform(&mut rng);
            let sys = assemble_constraints(&random_pairs(&truth, 5, &mut rng)).unwrap();
            let est = solve_calibration(&sys).unwrap();
            assert!(geodesic_angle(&est.transform.rotation, &truth.rotation) < 1e-9);
            assert!((est.transform.translation - truth.translation).norm() < 1e-9);
            assert!(est.residual < 1e-10);
            assert!((translation_projector(&sys).unwrap() * sys.k()).norm() < 1e-10);
        }
    }

    #[test]
    fn three_exact_observations_suffice() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..10 {
            let truth = random_transform(&mut rng);
            let est = solve_calibration(&assemble_constraints(&random_pairs(&truth, 3, &mut rng)).unwrap())
                .unwrap();
            assert!(geodesic_angle(&est.transform.rotation, &truth.rotation) < 1e-9);
            assert!((est.transform.translation - truth.translation).norm() < 1e-9);
        }
    }

    #[test]
    fn identity_ground_truth() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let truth = RigidTransform::identity();
        let est =
            solve_calibration(&assemble_constraints(&random_pairs(&truth, 4, &mut rng)).unwrap()).unwrap();
        assert!((est.transform.rotation - Matrix3::identity()).norm() < 1e-9);
        assert!(est.transform.translation.norm() < 1e-9);
    }

    #[test]
    fn order_and_row_scaling_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let truth = random_transform(&mut rng);
        // perturb so the solution is not exact
        let mut pairs = random_pairs(&truth, 6, &mut rng);
        for p in pairs.iter_mut() {
            let tilt = rotation_exp(&Vector3::new(0.01, -0.02, 0.015));
            p.observation.axis = rotate_axis(&tilt, &p.observation.axis);
        }
        let a = solve_calibration(&assemble_constraints(&pairs).unwrap()).unwrap();
        let mut rev = pairs.clone();
        rev.reverse();
        let b = solve_calibration(&assemble_constraints(&rev).unwrap()).unwrap();
        assert!(geodesic_angle(&a.transform.rotation, &b.transform.rotation) < 1e-10);
        assert!((a.transform.translation - b.transform.translation).norm() < 1e-10);

        // with noise, scaling the plane rows only reweights them against the
        // axis rows when there are more than three of them
        let scaled = |pairs: &[PairedObservation]| {
            let mut sys = assemble_constraints(pairs).unwrap();
            sys.h_p *= 3.5;
            sys.k_p *= 3.5;
            solve_calibration(&sys).unwrap()
        };
        let a3 = solve_calibration(&assemble_constraints(&pairs[..3]).unwrap()).unwrap();
        let c = scaled(&pairs[..3]);
        assert!(geodesic_angle(&a3.transform.rotation, &c.transform.rotation) < 1e-10);
        assert!((a3.transform.translation - c.transform.translation).norm() < 1e-10);

        let exact = random_pairs(&truth, 6, &mut rng);
        let c = scaled(&exact);
        assert!(geodesic_angle(&truth.rotation, &c.transform.rotation) < 1e-9);
        assert!((truth.translation - c.transform.translation).norm() < 1e-9);
    }

    #[test]
    fn unobservable_cases() {
        let truth = RigidTransform::identity();
        // all axes parallel
        let pairs: Vec<_> = (0..4)
            .map(|i| {
                exact_pair(
                    &truth,
                    Vector3::z(),
                    Vector3::new(0.1 * i as f64, 0.2, 1.0 + 0.1 * i as f64),
                )
            })
            .collect();
        assert_eq!(
            solve_calibration(&assemble_constraints(&pairs).unwrap()),
            Err(CalibrationError::RotationUnobservable)
        );
    }

    #[test]
    fn translation_unobservable_when_planes_share_a_pencil() {
        let truth = RigidTransform::identity();
        // every plane contains the x direction, so all plane normals lie in the y-z plane
        let pairs: Vec<_> = [Vector3::y(), Vector3::z(), Vector3::new(0.0, 1.0, 1.0)]
            .into_iter()
            .map(|a| {
                let mut o = exact_pair(&truth, a, Vector3::new(0.1, 0.2, 1.0));
                o.observation.ref_direction = UnitVector3::new_normalize(Vector3::x());
                o
            })
            .collect();
        let sys = assemble_constraints(&pairs).unwrap();
        assert!(sys.k_p.column(0).amax() < 1e-12);
        assert_eq!(
            solve_calibration(&sys),
            Err(CalibrationError::TranslationUnobservable)
        );
    }

    fn obs(inlier_ratio: f64, best: f64, second: f64) -> MotionObservation {
        let mut o = exact_pair(
            &RigidTransform::identity(),
            Vector3::z(),
            Vector3::new(0.1, 0.0, 1.0),
        )
        .observation;
        o.inlier_ratio = inlier_ratio;
        o.best_score = best;
        o.second_score = second;
        o
    }

    #[test]
    fn stage1_rules() {
        let cfg = PruningConfig::default();
        assert!(passes_stage1(&obs(1.0, 0.5, 1.0), &cfg));
        assert!(!passes_stage1(&obs(1.0, 0.7, 0.7), &cfg));
        assert!(!passes_stage1(&obs(0.5, 0.1, 1.0), &cfg));
        let kept = prune_stage1(
            &[obs(1.0, 0.5, 1.0), obs(1.0, 1.0, 1.0), obs(0.7, 0.0, 1.0)],
            &cfg,
        );
        assert_eq!(kept.len(), 2);
    }

    #[test]
    fn stage2_rules() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let truth = random_transform(&mut rng);
        let mut pairs = random_pairs(&truth, 6, &mut rng);
        for p in &pairs {
            assert!(p.axis_error(&truth) < 1e-6);
            assert!(p.plane_error(&truth) < 1e-9);
        }
        // the two-fold ambiguity: replace one axis with a clearly different one
        let spurious = rotation_exp(&(Vector3::new(0.3, 0.1, 0.0)));
        pairs[2].observation.axis = rotate_axis(&spurious, &pairs[2].observation.axis);
        let cfg = PruningConfig::default();
        let res = prune_stage2(&pairs, &truth, &cfg);
        assert_eq!(res.kept, vec![0, 1, 3, 4, 5]);
        assert!(!res.fallback);

        let open = PruningConfig {
            axis_tol: f64::INFINITY,
            plane_tol: f64::INFINITY,
            ..cfg
        };
        assert_eq!(
            prune_stage2(&pairs, &truth, &open).kept,
            (0..6).collect::<Vec<_>>()
        );

        let far = random_transform(&mut rng);
        let res = prune_stage2(&pairs, &far, &cfg);
        assert!(res.fallback);
        assert_eq!(res.kept.len(), 6);
    }

    fn estimate_at(t: Vector3<f64>) -> CalibrationEstimate {
        CalibrationEstimate {
            transform: RigidTransform::from_translation(t),
            residual: 0.0,
            observation_count: 3,
            iteration: 0,
            stage2_fallback: false,
        }
    }

    #[test]
    fn convergence_window() {
        let cfg = ConvergenceConfig::default();
        let same: Vec<_> = (0..5).map(|_| estimate_at(Vector3::new(0.1, 0.2, 0.3))).collect();
        assert!(check_convergence(&same, &cfg));
        assert!(!check_convergence(&same[..4], &cfg));

        // drift of 2·gamma per step in t_x, then it stops
        let mut hist = Vec::new();
        let mut x = 0.0;
        let mut first_converged = None;
        for step in 0..20 {
            if step < 8 {
                x += 2.0 * cfg.gamma_max[3];
            }
            hist.push(estimate_at(Vector3::new(x, 0.0, 0.0)));
            if check_convergence(&hist, &cfg) && first_converged.is_none() {
                first_converged = Some(step);
            }
        }
        // last moving step is 7; five identical estimates end at step 11
        assert_eq!(first_converged, Some(11));
    }

    fn demo_scene(noise: NoiseSpec) -> SceneDefinition {
        let pose = RigidTransform::look_at(
            &Vector3::new(1.6, -0.9, 1.0),
            &Vector3::new(0.0, 0.0, 0.45),
            &Vector3::new(0.0, 0.0, 1.0),
        )
        .unwrap();
        SceneDefinition::demo(pose, noise)
    }

    #[test]
    fn noise_free_loop_converges() {
        let scene = demo_scene(NoiseSpec::default());
        let mut src = LiveSource::new(
            &scene,
            PlannerParams::default(),
            |_: &JointConfiguration| true,
            7,
            60,
        );
        let cfg = LoopConfig {
            max_iterations: 30,
            ..Default::default()
        };
        let run = calibrate_loop(&mut src, &scene.robot, &cfg).unwrap();
        assert!(run.converged);
        let est = run.estimate.unwrap();
        let rot = geodesic_angle(&est.transform.rotation, &scene.camera_from_base.rotation);
        let tr = (est.transform.translation - scene.camera_from_base.translation).norm();
        assert!(rot < 1e-4 && tr < 1e-4, "{rot} {tr}");
    }

    #[test]
    fn infeasible_world_aborts() {
        let scene = demo_scene(NoiseSpec::default());
        let planner = PlannerParams {
            max_attempts: 5,
            ..Default::default()
        };
        let mut src = LiveSource::new(&scene, planner, |_: &JointConfiguration| false, 7, 60);
        let err = calibrate_loop(&mut src, &scene.robot, &LoopConfig::default()).unwrap_err();
        assert!(matches!(
            err,
            LoopError::Source(SourceError::Planning { iteration: 0, .. })
        ));
    }

    #[test]
    fn loop_is_deterministic() {
        let scene = demo_scene(NoiseSpec {
            pixel_sigma: 1.0,
            ..Default::default()
        });
        let cfg = LoopConfig {
            max_iterations: 8,
            stop_on_convergence: false,
            ..Default::default()
        };
        let run = |seed| {
            let mut src = LiveSource::new(
                &scene,
                PlannerParams::default(),
                |_: &JointConfiguration| true,
                seed,
                60,
            );
            calibrate_loop(&mut src, &scene.robot, &cfg).unwrap()
        };
        let (a, b) = (run(11), run(11));
        assert_eq!(a, b);
        assert_eq!(a.iterations.len(), 8);
    }
}
