//! Command implementations behind the `calib` binary: simulate, calibrate
//! and benchmark, plus error metrics and report types.
//!
//! Every command is deterministic for a fixed config and seed. Reports carry
//! no timestamps.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibrator::{
    calibrate_loop, CalibrationRun, LiveSource, LoopConfig, LoopError, ObservationSource, ReplaySource,
};
use crate::config::{ConfigError, RunConfig};
use crate::geometry::{geodesic_angle, RigidTransform};
use crate::scene::{group_records, read_jsonl, write_jsonl, TrajectoryFileError, TrajectoryRecord};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_NOT_CONVERGED: i32 = 3;
pub const EXIT_NO_USABLE: i32 = 4;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {source}", path.display())]
    Trajectories {
        path: PathBuf,
        #[source]
        source: TrajectoryFileError,
    },
    #[error(transparent)]
    Loop(#[from] LoopError),
    #[error("{0}")]
    Csv(#[from] csv::Error),
}

impl HarnessError {
    /// Every harness error is an input problem: bad files, or a scene in
    /// which no motion can be planned.
    pub fn exit_code(&self) -> i32 {
        EXIT_INPUT
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorMetrics {
    /// Geodesic angle between estimated and true rotation (rad).
    pub rotation_error: f64,
    /// Distance between estimated and true translation (m).
    pub translation_error: f64,
}

impl ErrorMetrics {
    pub fn between(estimate: &RigidTransform, truth: &RigidTransform) -> Self {
        Self {
            rotation_error: geodesic_angle(&estimate.rotation, &truth.rotation),
            translation_error: (estimate.translation - truth.translation).norm(),
        }
    }
}

/// Transform as written to reports: camera-from-base, `p_cam = R p_base + t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportTransform {
    /// Row-major rotation matrix.
    pub rotation: [[f64; 3]; 3],
    pub rotation_vector: [f64; 3],
    pub translation: [f64; 3],
}

impl From<&RigidTransform> for ReportTransform {
    fn from(t: &RigidTransform) -> Self {
        let r = &t.rotation;
        let w: Vector3<f64> = t.rotation_vector();
        Self {
            rotation: [
                [r[(0, 0)], r[(0, 1)], r[(0, 2)]],
                [r[(1, 0)], r[(1, 1)], r[(1, 2)]],
                [r[(2, 0)], r[(2, 1)], r[(2, 2)]],
            ],
            rotation_vector: [w.x, w.y, w.z],
            translation: [t.translation.x, t.translation.y, t.translation.z],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub iteration: usize,
    pub motion_id: usize,
    pub joint: usize,
    pub sweep: f64,
    /// `rejected`, `stage1_rejected` or `accepted`.
    pub status: String,
    pub reason: Option<String>,
    pub injected_spurious: bool,
    /// Observations in the solve after this motion (0 when nothing was solved).
    pub used: usize,
    pub stage2_fallback: bool,
    /// Error of the estimate after this motion, when ground truth is known.
    pub error: Option<ErrorMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruningStats {
    pub motions: usize,
    pub usable_observations: usize,
    pub stage1_passed: usize,
    /// Stage-1 survivors consistent with the final estimate.
    pub stage2_kept: usize,
    pub injected_spurious: usize,
    /// Injected spurious observations not kept by the final stage-2 pass.
    pub spurious_rejected: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    /// `live` or `replay`.
    pub mode: String,
    pub seed: u64,
    /// `converged`, `not_converged` or `no_estimate`.
    pub status: String,
    pub converged: bool,
    pub converged_at: Option<usize>,
    pub motions_executed: usize,
    pub estimate: Option<ReportTransform>,
    pub residual: Option<f64>,
    pub observations_used: Option<usize>,
    pub ground_truth: Option<ReportTransform>,
    pub error: Option<ErrorMetrics>,
    pub pruning: PruningStats,
    pub iterations: Vec<IterationReport>,
}

impl CalibrationReport {
    pub fn exit_code(&self) -> i32 {
        match (self.estimate.is_some(), self.converged) {
            (false, _) => EXIT_NO_USABLE,
            (true, true) => EXIT_OK,
            (true, false) => EXIT_NOT_CONVERGED,
        }
    }

    pub fn from_run(run: &CalibrationRun, mode: &str, seed: u64, truth: Option<&RigidTransform>) -> Self {
        let iterations = run
            .iterations
            .iter()
            .map(|r| {
                let (status, reason) = match (&r.rejection, &r.stage1_failure) {
                    (Some(why), _) => ("rejected", Some(why.clone())),
                    (None, Some(why)) => ("stage1_rejected", Some(why.clone())),
                    (None, None) => ("accepted", None),
                };
                IterationReport {
                    iteration: r.iteration,
                    motion_id: r.motion_id,
                    joint: r.joint,
                    sweep: r.sweep,
                    status: status.into(),
                    reason,
                    injected_spurious: r.injected_spurious,
                    used: r.used,
                    stage2_fallback: r.stage2_fallback,
                    error: truth
                        .zip(r.estimate.as_ref())
                        .map(|(t, e)| ErrorMetrics::between(e, t)),
                }
            })
            .collect();
        let stage1_passed = run.iterations.iter().filter(|r| r.passed_stage1).count();
        let pruning = PruningStats {
            motions: run.iterations.len(),
            usable_observations: run.observations.len(),
            stage1_passed,
            stage2_kept: run.final_stage2.iter().filter(|k| **k).count(),
            injected_spurious: run.spurious.iter().filter(|s| **s).count(),
            spurious_rejected: run
                .spurious
                .iter()
                .zip(&run.final_stage2)
                .filter(|(s, k)| **s && !**k)
                .count(),
        };
        let est = run.estimate.as_ref();
        let status = match (est, run.converged) {
            (None, _) => "no_estimate",
            (Some(_), true) => "converged",
            (Some(_), false) => "not_converged",
        };
        Self {
            mode: mode.into(),
            seed,
            status: status.into(),
            converged: run.converged,
            converged_at: run.converged_at,
            motions_executed: run.iterations.len(),
            estimate: est.map(|e| (&e.transform).into()),
            residual: est.map(|e| e.residual),
            observations_used: est.map(|e| e.observation_count),
            ground_truth: truth.map(Into::into),
            error: truth
                .zip(est)
                .map(|(t, e)| ErrorMetrics::between(&e.transform, t)),
            pruning,
            iterations,
        }
    }

    /// One line per motion that gave no accepted observation.
    pub fn rejection_summary(&self) -> Vec<String> {
        self.iterations
            .iter()
            .filter_map(|r| {
                r.reason
                    .as_ref()
                    .map(|why| format!("motion {} (joint {}): {why}", r.motion_id, r.joint))
            })
            .collect()
    }
}

/// Plans and simulates the configured motion budget. Motions in which no
/// keypoint stayed visible produce no records.
pub fn simulate(cfg: &RunConfig, seed: u64) -> Result<Vec<TrajectoryRecord>, HarnessError> {
    let scene = cfg.scene_definition()?;
    let feasible = cfg.feasibility(&scene.robot);
    let mut source = LiveSource::new(&scene, cfg.planner, feasible, seed, cfg.run.frames);
    let mut records = Vec::new();
    for iteration in 0..cfg.run.motion_budget {
        let input = source
            .next_motion(iteration)
            .map_err(|e| HarnessError::Loop(e.into()))?
            .expect("live source never runs dry");
        records.extend(input.trajectories.iter().map(|t| t.to_record(&input.motion)));
    }
    Ok(records)
}

pub fn cmd_simulate(config: &Path, out: &Path, seed: Option<u64>) -> Result<usize, HarnessError> {
    let cfg = RunConfig::load(config)?;
    let seed = seed.unwrap_or(cfg.run.seeds[0]);
    let records = simulate(&cfg, seed)?;
    let file = File::create(out).map_err(io_err(out))?;
    write_jsonl(BufWriter::new(file), &records).map_err(io_err(out))?;
    Ok(records.len())
}

/// Runs the loop live against the configured scene, or over `recorded`
/// trajectories when given.
pub fn calibrate(
    cfg: &RunConfig,
    seed: u64,
    recorded: Option<Vec<TrajectoryRecord>>,
) -> Result<CalibrationReport, HarnessError> {
    let loop_cfg = cfg.loop_config(seed);
    let truth = cfg.ground_truth()?;
    match recorded {
        None => {
            let scene = cfg.scene_definition()?;
            let feasible = cfg.feasibility(&scene.robot);
            let mut source = LiveSource::new(&scene, cfg.planner, feasible, seed, cfg.run.frames);
            let run = calibrate_loop(&mut source, &scene.robot, &loop_cfg)?;
            Ok(CalibrationReport::from_run(&run, "live", seed, truth.as_ref()))
        }
        Some(records) => {
            let robot = cfg.robot()?;
            let motions = group_records(&records).map_err(|source| HarnessError::Trajectories {
                path: PathBuf::from("<records>"),
                source,
            })?;
            let mut source = ReplaySource::new(motions);
            let run = calibrate_loop(&mut source, &robot, &loop_cfg)?;
            Ok(CalibrationReport::from_run(&run, "replay", seed, truth.as_ref()))
        }
    }
}

pub fn read_trajectories(path: &Path) -> Result<Vec<TrajectoryRecord>, HarnessError> {
    let file = File::open(path).map_err(io_err(path))?;
    let records = read_jsonl(BufReader::new(file)).map_err(|source| HarnessError::Trajectories {
        path: path.to_path_buf(),
        source,
    })?;
    group_records(&records).map_err(|source| HarnessError::Trajectories {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(records)
}

pub fn cmd_calibrate(
    scene_config: &Path,
    trajectories: Option<&Path>,
    report: &Path,
    seed: Option<u64>,
) -> Result<CalibrationReport, HarnessError> {
    let cfg = RunConfig::load(scene_config)?;
    let seed = seed.unwrap_or(cfg.run.seeds[0]);
    let recorded = trajectories.map(read_trajectories).transpose()?;
    let rep = calibrate(&cfg, seed, recorded)?;
    write_json(report, &rep)?;
    Ok(rep)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), HarnessError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| HarnessError::Io {
        path: path.to_path_buf(),
        source: e.into(),
    })?;
    w.write_all(b"\n").map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

/// One CSV row: errors of one run after `motions` accepted observations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub pose_id: usize,
    pub seed: u64,
    pub motions: usize,
    pub rot_err_rad: Option<f64>,
    pub trans_err_m: Option<f64>,
    /// `ok`, `insufficient` (the budget ran out first), `no_estimate` or
    /// `failed`.
    pub status: String,
    /// Executed motions at first convergence.
    pub converged_at: Option<usize>,
    pub detail: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MedianRow {
    pub motions: usize,
    /// Runs with an estimate at this count.
    pub runs: usize,
    pub median_rot_err_rad: Option<f64>,
    pub median_trans_err_m: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkResult {
    pub rows: Vec<BenchmarkRow>,
    pub medians: Vec<MedianRow>,
}

/// Errors after each configured count of accepted observations, for every
/// pose × seed. Runs go on past convergence until the largest count is
/// reached or the motion budget is spent. `jobs = 0` uses all cores.
pub fn benchmark(cfg: &RunConfig, jobs: usize) -> Result<BenchmarkResult, HarnessError> {
    let poses = cfg.benchmark.all_poses();
    let counts = &cfg.benchmark.motion_counts;
    let largest = counts.iter().copied().max().unwrap_or(0);
    let mut tasks = Vec::new();
    for (pose_id, pose) in poses.iter().enumerate() {
        let truth = pose.to_transform().expect("validated");
        for &seed in &cfg.run.seeds {
            tasks.push((pose_id, truth, seed));
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .expect("thread pool");
    let per_run: Vec<Vec<BenchmarkRow>> = pool.install(|| {
        tasks
            .par_iter()
            .map(|&(pose_id, truth, seed)| {
                let loop_cfg = LoopConfig {
                    stop_on_convergence: false,
                    stop_after_accepted: Some(largest),
                    ..cfg.loop_config(seed)
                };
                let outcome = cfg
                    .scene_with_pose(truth)
                    .map_err(HarnessError::from)
                    .and_then(|scene| {
                        let feasible = cfg.feasibility(&scene.robot);
                        let mut source = LiveSource::new(&scene, cfg.planner, feasible, seed, cfg.run.frames);
                        Ok(calibrate_loop(&mut source, &scene.robot, &loop_cfg)?)
                    });
                benchmark_rows(pose_id, seed, counts, &truth, outcome)
            })
            .collect()
    });
    let rows: Vec<BenchmarkRow> = per_run.into_iter().flatten().collect();
    let medians = counts
        .iter()
        .map(|&m| {
            let ok: Vec<&BenchmarkRow> = rows
                .iter()
                .filter(|r| r.motions == m && r.status == "ok")
                .collect();
            let rot: Vec<f64> = ok.iter().filter_map(|r| r.rot_err_rad).collect();
            let trans: Vec<f64> = ok.iter().filter_map(|r| r.trans_err_m).collect();
            MedianRow {
                motions: m,
                runs: ok.len(),
                median_rot_err_rad: median(rot),
                median_trans_err_m: median(trans),
            }
        })
        .collect();
    Ok(BenchmarkResult { rows, medians })
}

fn benchmark_rows(
    pose_id: usize,
    seed: u64,
    counts: &[usize],
    truth: &RigidTransform,
    outcome: Result<CalibrationRun, HarnessError>,
) -> Vec<BenchmarkRow> {
    let row = |motions, err: Option<ErrorMetrics>, status: &str, converged_at, detail| BenchmarkRow {
        pose_id,
        seed,
        motions,
        rot_err_rad: err.map(|e| e.rotation_error),
        trans_err_m: err.map(|e| e.translation_error),
        status: status.into(),
        converged_at,
        detail,
    };
    match outcome {
        Err(e) => counts
            .iter()
            .map(|&m| row(m, None, "failed", None, Some(e.to_string())))
            .collect(),
        Ok(run) => {
            let accepted = run.accepted_count();
            counts
                .iter()
                .map(|&m| match run.estimate_at_accepted(m) {
                    Some(est) => row(
                        m,
                        Some(ErrorMetrics::between(&est, truth)),
                        "ok",
                        run.converged_at,
                        None,
                    ),
                    None if accepted < m => row(m, None, "insufficient", run.converged_at, None),
                    None => row(m, None, "no_estimate", run.converged_at, None),
                })
                .collect()
        }
    }
}

/// Median with the mean of the middle pair for even lengths.
pub fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// Path of the medians table written next to the benchmark CSV.
pub fn medians_path(out: &Path) -> PathBuf {
    let stem = out
        .file_stem()
        .map_or("benchmark".into(), |s| s.to_string_lossy().into_owned());
    out.with_file_name(format!("{stem}_medians.csv"))
}

pub fn cmd_benchmark(config: &Path, out: &Path, jobs: usize) -> Result<BenchmarkResult, HarnessError> {
    let cfg = RunConfig::load(config)?;
    let result = benchmark(&cfg, jobs)?;
    write_csv(out, &result.rows)?;
    write_csv(&medians_path(out), &result.medians)?;
    Ok(result)
}

/// Writes `rows` with a header, also when there are none.
fn write_csv<T: Serialize + HeaderOnly>(path: &Path, rows: &[T]) -> Result<(), HarnessError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(BufWriter::new(file));
    w.write_record(T::HEADER)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(io_err(path))
}

trait HeaderOnly {
    const HEADER: &'static [&'static str];
}

impl HeaderOnly for BenchmarkRow {
    const HEADER: &'static [&'static str] = &[
        "pose_id",
        "seed",
        "motions",
        "rot_err_rad",
        "trans_err_m",
        "status",
        "converged_at",
        "detail",
    ];
}

impl HeaderOnly for MedianRow {
    const HEADER: &'static [&'static str] = &["motions", "runs", "median_rot_err_rad", "median_trans_err_m"];
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::rotation_exp;

    #[test]
    fn metrics_of_known_offsets() {
        let truth =
            RigidTransform::from_rotation_vector(Vector3::new(0.1, -0.2, 0.3), Vector3::new(0.0, 0.0, 1.5));
        let est = RigidTransform {
            rotation: rotation_exp(&Vector3::new(0.0, 0.0, 0.01)) * truth.rotation,
            translation: truth.translation + Vector3::new(0.003, 0.004, 0.0),
        };
        let m = ErrorMetrics::between(&est, &truth);
        assert!((m.rotation_error - 0.01).abs() < 1e-12);
        assert!((m.translation_error - 0.005).abs() < 1e-12);
        let flipped = RigidTransform {
            rotation: rotation_exp(&Vector3::new(std::f64::consts::PI, 0.0, 0.0)) * truth.rotation,
            ..truth
        };
        let m = ErrorMetrics::between(&flipped, &truth);
        assert!(
            m.rotation_error <= std::f64::consts::PI && m.rotation_error > 3.0,
            "{}",
            m.rotation_error
        );
    }

    #[test]
    fn median_conventions() {
        assert_eq!(median(vec![]), None);
        assert_eq!(median(vec![3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), Some(2.5));
    }

    #[test]
    fn report_transform_is_row_major() {
        let r = rotation_exp(&Vector3::new(0.3, 0.2, -0.1));
        let t = RigidTransform {
            rotation: r,
            translation: Vector3::new(1.0, 2.0, 3.0),
        };
        let rep = ReportTransform::from(&t);
        assert_eq!(rep.rotation[0][1], r[(0, 1)]);
        assert_eq!(rep.rotation[2][0], r[(2, 0)]);
        assert_eq!(rep.translation, [1.0, 2.0, 3.0]);
    }

    #[test]
    fn medians_file_sits_next_to_output() {
        assert_eq!(
            medians_path(Path::new("out/bench.csv")),
            PathBuf::from("out/bench_medians.csv")
        );
    }
}
