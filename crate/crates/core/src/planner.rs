//! Random selection of single-joint exploratory motions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::robot::{JointConfiguration, RobotModel};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlanningError {
    #[error("invalid planner parameters: {0}")]
    InvalidParams(String),
    #[error("no feasible motion found after {attempts} attempts")]
    NoFeasibleMotion { attempts: usize },
    #[error("no joint is eligible for exploratory motion")]
    NoEligibleJoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlannerParams {
    /// Smallest acceptable |sweep| (rad).
    pub delta_min: f64,
    /// Sweeps are extended up to this magnitude when feasible (rad).
    pub delta_max: f64,
    /// Resolution at which the swept path is checked (rad).
    pub path_step: f64,
    pub max_attempts: usize,
}

impl Default for PlannerParams {
    fn default() -> Self {
        Self {
            delta_min: 0.5,
            delta_max: 1.5,
            path_step: 0.05,
            max_attempts: 200,
        }
    }
}

impl PlannerParams {
    pub fn validate(&self) -> Result<(), PlanningError> {
        let ok = self.delta_min > 0.0
            && self.delta_max >= self.delta_min
            && self.path_step > 0.0
            && self.max_attempts >= 1
            && self.delta_max.is_finite();
        if !ok {
            return Err(PlanningError::InvalidParams(format!(
                "need 0 < delta_min <= delta_max, path_step > 0, max_attempts >= 1 (got {self:?})"
            )));
        }
        Ok(())
    }
}

/// One single-joint move: start at `start_config`, rotate `joint` by `sweep`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExploratoryMotion {
    pub start_config: JointConfiguration,
    pub joint: usize,
    pub sweep: f64,
}

impl ExploratoryMotion {
    /// Configuration after displacing the moving joint by `delta`.
    pub fn config_at(&self, delta: f64) -> JointConfiguration {
        self.start_config.with_offset(self.joint, delta)
    }

    pub fn end_config(&self) -> JointConfiguration {
        self.config_at(self.sweep)
    }
}

/// Plans a motion over all joints using a fresh generator seeded with `seed`.
pub fn select_motion<F>(
    model: &RobotModel,
    feasible: F,
    seed: u64,
    params: &PlannerParams,
) -> Result<ExploratoryMotion, PlanningError>
where
    F: Fn(&JointConfiguration) -> bool,
{
    let joints: Vec<usize> = (0..model.dof()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    select_motion_among(model, &joints, feasible, &mut rng, params)
}

/// Plans a motion for one of `joints`. Joint limits are always enforced on
/// top of `feasible`.
pub fn select_motion_among<F, R>(
    model: &RobotModel,
    joints: &[usize],
    feasible: F,
    rng: &mut R,
    params: &PlannerParams,
) -> Result<ExploratoryMotion, PlanningError>
where
    F: Fn(&JointConfiguration) -> bool,
    R: Rng + ?Sized,
{
    params.validate()?;
    if joints.is_empty() || joints.iter().any(|&j| j >= model.dof()) {
        return Err(PlanningError::NoEligibleJoint);
    }
    let ok = |q: &JointConfiguration| model.within_limits(q) && feasible(q);

    for _ in 0..params.max_attempts {
        let start = JointConfiguration(
            model
                .joints()
                .iter()
                .map(|j| rng.random_range(j.limits.0..j.limits.1))
                .collect(),
        );
        let joint = joints[rng.random_range(0..joints.len())];
        let first_dir = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        if !ok(&start) {
            continue;
        }
        for dir in [first_dir, -first_dir] {
            let reach = feasible_reach(model, &start, joint, dir, params, &ok);
            if reach >= params.delta_min {
                return Ok(ExploratoryMotion {
                    start_config: start,
                    joint,
                    sweep: dir * reach,
                });
            }
        }
    }
    Err(PlanningError::NoFeasibleMotion {
        attempts: params.max_attempts,
    })
}

/// Largest sampled displacement along `dir` whose whole path stays feasible.
fn feasible_reach<F>(
    model: &RobotModel,
    start: &JointConfiguration,
    joint: usize,
    dir: f64,
    params: &PlannerParams,
    ok: &F,
) -> f64
where
    F: Fn(&JointConfiguration) -> bool,
{
    let (lo, hi) = model.joints()[joint].limits;
    let angle = start.0[joint];
    let to_limit = if dir > 0.0 { hi - angle } else { angle - lo };
    let cap = params.delta_max.min(to_limit).max(0.0);
    let mut reach = 0.0;
    let mut k = 1usize;
    loop {
        let s = (k as f64 * params.path_step).min(cap);
        if s <= reach {
            break;
        }
        if !ok(&start.with_offset(joint, dir * s)) {
            break;
        }
        reach = s;
        k += 1;
    }
    reach
}
