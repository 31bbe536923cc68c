//! Acceptance criteria, one line each. Runs as a plain binary so the lines
//! are always printed; exits non-zero if any criterion fails.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use markerless_calib::calibrator::{
    assemble_constraints, calibrate_loop, translation_projector, CalibrationRun, LiveSource, LoopConfig,
    PairedObservation,
};
use markerless_calib::config::{RandomPoses, RunConfig};
use markerless_calib::conic::fit_shared_conics;
use markerless_calib::estimation::{axis_candidate_score, axis_candidates, fit_projected_circle};
use markerless_calib::geometry::{
    angle_between, vec_col_major, NormalizedImagePoint, RigidTransform, UnitVector3,
};
use markerless_calib::harness::{self, median, ErrorMetrics};
use markerless_calib::scene::{write_jsonl, KeypointTrajectory, TrajectorySample};
use nalgebra::{Rotation3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

/// The shipped benchmark config with its scene noise and run section
/// overridden.
fn bench_config(noise: &str, run_extra: &str) -> RunConfig {
    let path = configs_dir().join("benchmark.toml");
    let text = std::fs::read_to_string(&path).unwrap();
    let text = text
        .replace("pixel_sigma = 1.0", noise)
        .replace("motion_budget = 60", &format!("motion_budget = 60\n{run_extra}"));
    RunConfig::parse(&text, &path).unwrap()
}

struct Outcome {
    pass: bool,
    detail: String,
}

// ---------------------------------------------------------------------------
// 1. noise-free recovery

fn noise_free_recovery() -> Outcome {
    let cfg = bench_config("pixel_sigma = 0.0", "");
    let poses = RandomPoses {
        count: 10,
        seed: 101,
        ..Default::default()
    }
    .generate();
    let mut worst = (0.0f64, 0.0f64);
    let mut slowest = Duration::ZERO;
    let mut fewest = usize::MAX;
    let mut failures = Vec::new();
    for (i, pose) in poses.iter().enumerate() {
        let truth = pose.to_transform().unwrap();
        let scene = cfg.scene_with_pose(truth).unwrap();
        let start = Instant::now();
        let mut source = LiveSource::new(
            &scene,
            cfg.planner,
            cfg.feasibility(&scene.robot),
            0,
            cfg.run.frames,
        );
        let run = calibrate_loop(&mut source, &scene.robot, &cfg.loop_config(0)).unwrap();
        slowest = slowest.max(start.elapsed());
        fewest = fewest.min(run.accepted_count());
        match &run.estimate {
            Some(e) => {
                let m = ErrorMetrics::between(&e.transform, &truth);
                worst = (worst.0.max(m.rotation_error), worst.1.max(m.translation_error));
            }
            None => failures.push(i),
        }
    }
    Outcome {
        pass: failures.is_empty() && worst.0 < 1e-4 && worst.1 < 1e-4 && fewest >= 5 && slowest < Duration::from_secs(10),
        detail: format!(
            "worst {:.2e} rad / {:.2e} m, fewest accepted {fewest}, slowest pose {:.2?}, no estimate for poses {failures:?}",
            worst.0, worst.1, slowest
        ),
    }
}

// ---------------------------------------------------------------------------
// 2. trend at 1 px noise

fn noisy_trend() -> Outcome {
    let cfg = RunConfig::load(&configs_dir().join("benchmark.toml")).unwrap();
    let start = Instant::now();
    let res = harness::benchmark(&cfg, 0).unwrap();
    let at = |m: usize| res.medians.iter().find(|r| r.motions == m).unwrap().clone();
    let (m3, m25) = (at(3), at(25));
    let (r3, t3) = (m3.median_rot_err_rad.unwrap(), m3.median_trans_err_m.unwrap());
    let (r25, t25) = (m25.median_rot_err_rad.unwrap(), m25.median_trans_err_m.unwrap());
    let elapsed = start.elapsed();
    Outcome {
        pass: m25.runs == 50
            && r25 <= 0.01
            && t25 <= 0.02
            && r25 < r3
            && t25 < t3
            && elapsed < Duration::from_secs(900),
        detail: format!(
            "medians @3 {r3:.2e} rad / {t3:.2e} m, @25 {r25:.2e} rad / {t25:.2e} m over {} runs, {:.0?}",
            m25.runs, elapsed
        ),
    }
}

// ---------------------------------------------------------------------------
// 3. axis recovery on synthetic projected circles

/// Orthonormal `(e1, e2)` with `e1 × e2 = n`.
fn plane_basis(n: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let h = if n.x.abs() < 0.9 {
        Vector3::x()
    } else {
        Vector3::y()
    };
    let e1 = (h - n * h.dot(n)).normalize();
    (e1, n.cross(&e1))
}

/// Points of a 3D circle about `normal`, rotating by `delta` in the right-hand
/// sense, seen by a camera at the origin.
fn circle_track(
    center: &Vector3<f64>,
    normal: &Vector3<f64>,
    radius: f64,
    phase: f64,
    deltas: &[f64],
) -> KeypointTrajectory {
    let (e1, e2) = plane_basis(normal);
    let samples = deltas
        .iter()
        .map(|&d| {
            let a = d + phase;
            let p = center + radius * (a.cos() * e1 + a.sin() * e2);
            TrajectorySample {
                point: NormalizedImagePoint::new(p.x / p.z, p.y / p.z),
                delta: d,
            }
        })
        .collect();
    KeypointTrajectory {
        motion_id: 0,
        keypoint_id: 0,
        samples,
        injected_outlier: false,
    }
}

fn axis_recovery() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    let mut min_margin = f64::INFINITY;
    let mut wrong_order = 0;
    let mut errors = Vec::new();
    for i in 0..100 {
        // circle center somewhere in the field of view
        let dir = Vector3::new(rng.random_range(-0.4..0.4), rng.random_range(-0.3..0.3), 1.0).normalize();
        let center = dir * rng.random_range(0.8..2.0);
        let tilt = rng.random_range(5f64..60.0).to_radians();
        let (p1, p2) = plane_basis(&dir);
        let spin = rng.random_range(0.0..std::f64::consts::TAU);
        let tilt_axis = spin.cos() * p1 + spin.sin() * p2;
        let mut normal = Rotation3::from_axis_angle(&UnitVector3::new_normalize(tilt_axis), tilt) * dir;
        if rng.random_bool(0.5) {
            normal = -normal;
        }
        let sweep = rng.random_range(0.8..2.5) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let deltas: Vec<f64> = (0..60).map(|k| sweep * k as f64 / 59.0).collect();
        let track = circle_track(
            &center,
            &normal,
            rng.random_range(0.05..0.25),
            rng.random_range(0.0..std::f64::consts::TAU),
            &deltas,
        );

        let outcome = fit_shared_conics(std::slice::from_ref(&track))
            .map_err(|e| e.to_string())
            .and_then(|fit| axis_candidates(&fit.conics[0].conic, &track).map_err(|e| e.to_string()));
        let cands = match outcome {
            Ok(c) => c,
            Err(e) => {
                errors.push(format!("circle {i}: {e}"));
                continue;
            }
        };
        let scores = cands.map(|c| axis_candidate_score(&c.axis, std::slice::from_ref(&track)).unwrap());
        let best = if scores[0] <= scores[1] { 0 } else { 1 };
        worst = worst.max(angle_between(&cands[best].axis, &normal));
        let truth = if angle_between(&cands[0].axis, &normal) < angle_between(&cands[1].axis, &normal) {
            0
        } else {
            1
        };
        if scores[truth] >= scores[1 - truth] {
            wrong_order += 1;
        }
        min_margin = min_margin.min(scores[1 - truth] - scores[truth]);
    }
    Outcome {
        pass: errors.is_empty() && worst < 1e-5 && wrong_order == 0,
        detail: format!(
            "worst normal error {worst:.2e} rad, true score below rival in {}/100 (smallest gap {min_margin:.2e}){}",
            100 - wrong_order - errors.len(),
            if errors.is_empty() { String::new() } else { format!(", failures: {errors:?}") }
        ),
    }
}

// ---------------------------------------------------------------------------
// 4. circle fit against a brute-force oracle

/// Cost of the δ-tied circle with radius `r` and phase `phi`, center
/// eliminated in closed form (it is the mean offset).
fn concentrated_cost(pts: &[Vector2<f64>], deltas: &[f64], r: f64, phi: f64) -> f64 {
    let model = |d: f64| Vector2::new((d + phi).cos(), (d + phi).sin()) * r;
    let n = pts.len() as f64;
    let center = pts
        .iter()
        .zip(deltas)
        .map(|(p, &d)| p - model(d))
        .sum::<Vector2<f64>>()
        / n;
    pts.iter()
        .zip(deltas)
        .map(|(p, &d)| (p - center - model(d)).norm_squared())
        .sum()
}

/// Plain Nelder–Mead on a 2D function.
fn nelder_mead(f: impl Fn(f64, f64) -> f64, start: [f64; 2], step: [f64; 2]) -> (f64, [f64; 2]) {
    let mut s = [
        start,
        [start[0] + step[0], start[1]],
        [start[0], start[1] + step[1]],
    ];
    let mut v = s.map(|p| f(p[0], p[1]));
    for _ in 0..20_000 {
        let mut idx = [0, 1, 2];
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        s = idx.map(|i| s[i]);
        v = idx.map(|i| v[i]);
        let size = (0..2)
            .map(|k| (s[2][k] - s[0][k]).abs().max((s[1][k] - s[0][k]).abs()))
            .fold(0.0, f64::max);
        if size < 1e-14 {
            break;
        }
        let c = [(s[0][0] + s[1][0]) / 2.0, (s[0][1] + s[1][1]) / 2.0];
        let at = |t: f64| [c[0] + t * (s[2][0] - c[0]), c[1] + t * (s[2][1] - c[1])];
        let r = at(-1.0);
        let fr = f(r[0], r[1]);
        if fr < v[0] {
            let e = at(-2.0);
            let fe = f(e[0], e[1]);
            (s[2], v[2]) = if fe < fr { (e, fe) } else { (r, fr) };
        } else if fr < v[1] {
            (s[2], v[2]) = (r, fr);
        } else {
            let k = if fr < v[2] { at(-0.5) } else { at(0.5) };
            let fk = f(k[0], k[1]);
            if fk < v[2].min(fr) {
                (s[2], v[2]) = (k, fk);
            } else {
                for j in 1..3 {
                    s[j] = [(s[j][0] + s[0][0]) / 2.0, (s[j][1] + s[0][1]) / 2.0];
                    v[j] = f(s[j][0], s[j][1]);
                }
            }
        }
    }
    (v[0], s[0])
}

fn circle_fit_optimum() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    let mut below_oracle = 0;
    for _ in 0..50 {
        let radius = rng.random_range(0.02..0.3);
        let center = Vector2::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3));
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        let sweep = rng.random_range(0.5..3.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let noise = Normal::new(0.0, radius * rng.random_range(0.005..0.2)).unwrap();
        let m = rng.random_range(10..80);
        let deltas: Vec<f64> = (0..m).map(|k| sweep * k as f64 / (m - 1) as f64).collect();
        let pts: Vec<Vector2<f64>> = deltas
            .iter()
            .map(|&d| {
                center
                    + radius * Vector2::new((d + phase).cos(), (d + phase).sin())
                    + Vector2::new(noise.sample(&mut rng), noise.sample(&mut rng))
            })
            .collect();
        let track = KeypointTrajectory {
            motion_id: 0,
            keypoint_id: 0,
            samples: pts
                .iter()
                .zip(&deltas)
                .map(|(p, &d)| TrajectorySample {
                    point: NormalizedImagePoint::new(p.x, p.y),
                    delta: d,
                })
                .collect(),
            injected_outlier: false,
        };
        // the plane normal to the optical axis carries image coordinates unchanged
        let fit = fit_projected_circle(&track, &Vector3::z_axis()).unwrap();

        let spread = pts.iter().map(|p| p.norm()).fold(0.0, f64::max) * 2.0;
        let (nr, np) = (300, 720);
        let mut best = (f64::INFINITY, [0.0, 0.0]);
        for i in 0..=nr {
            let r = spread * i as f64 / nr as f64;
            for j in 0..np {
                let phi = std::f64::consts::TAU * j as f64 / np as f64;
                let c = concentrated_cost(&pts, &deltas, r, phi);
                if c < best.0 {
                    best = (c, [r, phi]);
                }
            }
        }
        let (oracle, _) = nelder_mead(
            |r, phi| concentrated_cost(&pts, &deltas, r.abs(), phi),
            best.1,
            [spread / nr as f64, std::f64::consts::TAU / np as f64],
        );
        worst = worst.max((fit.residual - oracle).abs());
        if fit.residual <= oracle + 1e-15 {
            below_oracle += 1;
        }
    }
    Outcome {
        pass: worst < 1e-6,
        detail: format!(
            "worst |J_linear - J_oracle| {worst:.2e}, linear fit at or below the oracle in {below_oracle}/50"
        ),
    }
}

// ---------------------------------------------------------------------------
// 5. constraint rows at the ground truth

fn constraint_sanity() -> Outcome {
    let cfg = bench_config("pixel_sigma = 0.0", "");
    let poses = RandomPoses {
        count: 4,
        seed: 55,
        ..Default::default()
    }
    .generate();
    let (mut axis_res, mut plane_res, mut sk) = (0.0f64, 0.0f64, 0.0f64);
    let mut count = 0;
    for pose in &poses {
        let truth = pose.to_transform().unwrap();
        let scene = cfg.scene_with_pose(truth).unwrap();
        let mut source = LiveSource::new(
            &scene,
            cfg.planner,
            cfg.feasibility(&scene.robot),
            9,
            cfg.run.frames,
        );
        let loop_cfg = LoopConfig {
            max_iterations: 25,
            stop_on_convergence: false,
            ..cfg.loop_config(9)
        };
        let run = calibrate_loop(&mut source, &scene.robot, &loop_cfg).unwrap();
        // usable observations arrive in iteration order; keep those stage 1 accepted
        let accepted: Vec<PairedObservation> = run
            .iterations
            .iter()
            .filter(|r| r.rejection.is_none())
            .zip(&run.observations)
            .filter(|(r, _)| r.passed_stage1)
            .map(|(_, o)| o.clone())
            .collect();
        let system = assemble_constraints(&accepted).unwrap();
        let r = vec_col_major(&truth.rotation);
        let r = nalgebra::DVector::from_column_slice(r.as_slice());
        let t = nalgebra::DVector::from_column_slice(truth.translation.as_slice());
        axis_res = axis_res.max((&system.h_r * &r).amax());
        plane_res = plane_res.max((&system.h_p * &r + &system.k_p * &t).amax());
        let s = translation_projector(&system).unwrap();
        sk = sk.max((s * system.k()).norm());
        count += system.len();
        // every prefix the loop may solve from
        for n in 3..accepted.len() {
            let sub = assemble_constraints(&accepted[..n]).unwrap();
            sk = sk.max((translation_projector(&sub).unwrap() * sub.k()).norm());
        }
    }
    Outcome {
        pass: axis_res < 1e-9 && plane_res < 1e-9 && sk < 1e-10,
        detail: format!(
            "{count} stage-1 observations: max axis row {axis_res:.2e}, max plane row {plane_res:.2e}, max |S K|_F {sk:.2e}"
        ),
    }
}

// ---------------------------------------------------------------------------
// 6. pruning under injected faults

fn pruning_efficacy() -> Outcome {
    let cfg = bench_config(
        "pixel_sigma = 1.0\noutlier_prob = 0.2",
        "spurious_axis_prob = 0.1",
    );
    let poses = cfg.benchmark.all_poses();
    let start = Instant::now();
    let tasks: Vec<(RigidTransform, u64)> = poses
        .iter()
        .flat_map(|p| cfg.run.seeds.iter().map(move |&s| (p.to_transform().unwrap(), s)))
        .collect();
    let runs: Vec<(RigidTransform, CalibrationRun)> = tasks
        .par_iter()
        .map(|&(truth, seed)| {
            let scene = cfg.scene_with_pose(truth).unwrap();
            let mut source = LiveSource::new(
                &scene,
                cfg.planner,
                cfg.feasibility(&scene.robot),
                seed,
                cfg.run.frames,
            );
            let loop_cfg = LoopConfig {
                stop_on_convergence: false,
                stop_after_accepted: Some(25),
                ..cfg.loop_config(seed)
            };
            (
                truth,
                calibrate_loop(&mut source, &scene.robot, &loop_cfg).unwrap(),
            )
        })
        .collect();
    let errors_at = |k: usize| {
        let m: Vec<ErrorMetrics> = runs
            .iter()
            .filter_map(|(truth, run)| {
                run.estimate_at_accepted(k)
                    .map(|e| ErrorMetrics::between(&e, truth))
            })
            .collect();
        (
            m.len(),
            median(m.iter().map(|e| e.rotation_error).collect()).unwrap_or(f64::INFINITY),
            median(m.iter().map(|e| e.translation_error).collect()).unwrap_or(f64::INFINITY),
        )
    };
    let (_, r3, t3) = errors_at(3);
    let (n25, r25, t25) = errors_at(25);
    // (spurious, passed stage 1, kept by the final stage-2 pass) per usable observation
    let labels: Vec<(bool, bool, bool)> = runs
        .iter()
        .flat_map(|(_, r)| {
            let passed = r
                .iterations
                .iter()
                .filter(|it| it.rejection.is_none())
                .map(|it| it.passed_stage1);
            r.spurious
                .iter()
                .zip(passed)
                .zip(&r.final_stage2)
                .map(|((s, p), k)| (*s, p, *k))
                .collect::<Vec<_>>()
        })
        .collect();
    let injected = labels.iter().filter(|l| l.0).count();
    let reached = labels.iter().filter(|l| l.0 && l.1).count();
    let rejected = labels.iter().filter(|l| l.0 && l.1 && !l.2).count();
    let overall = labels.iter().filter(|l| l.0 && !l.2).count();
    let rate = rejected as f64 / reached.max(1) as f64;
    Outcome {
        pass: reached > 0 && rate >= 0.9 && r25 <= 0.01 && t25 <= 0.02 && r25 < r3 && t25 < t3,
        detail: format!(
            "medians @3 {r3:.2e} rad / {t3:.2e} m, @25 {r25:.2e} rad / {t25:.2e} m over {n25} runs; \
             stage 2 rejected {rejected}/{reached} spurious that passed stage 1 ({:.1}%), \
             {overall}/{injected} rejected by either stage, {:.0?}",
            100.0 * rate,
            start.elapsed()
        ),
    }
}

// ---------------------------------------------------------------------------
// 7. determinism

fn determinism() -> Outcome {
    let path = configs_dir().join("demo.toml");
    let text = std::fs::read_to_string(&path).unwrap().replace(
        "pixel_sigma = 1.0",
        "pixel_sigma = 1.0\noutlier_prob = 0.1\ndropout_prob = 0.01",
    );
    let text = text.replace("frames = 60", "frames = 60\nspurious_axis_prob = 0.1");
    let cfg = RunConfig::parse(&text, &path).unwrap();
    let dump = |seed| {
        let mut bytes = Vec::new();
        write_jsonl(&mut bytes, &harness::simulate(&cfg, seed).unwrap()).unwrap();
        bytes
    };
    let (a, b) = (dump(11), dump(11));
    let dumps_equal = a == b && !a.is_empty();
    let bits = |seed| {
        let rep = harness::calibrate(&cfg, seed, None).unwrap();
        let t = rep.estimate.expect("estimate");
        t.rotation
            .iter()
            .flatten()
            .chain(&t.translation)
            .map(|v| v.to_bits())
            .collect::<Vec<u64>>()
    };
    let (x, y) = (bits(11), bits(11));
    let report_bytes = |seed| serde_json::to_vec(&harness::calibrate(&cfg, seed, None).unwrap()).unwrap();
    let reports_equal = report_bytes(12) == report_bytes(12);
    Outcome {
        pass: dumps_equal && x == y && reports_equal,
        detail: format!(
            "dump {} bytes identical: {dumps_equal}, transform bits identical: {}, reports identical: {reports_equal}",
            a.len(),
            x == y
        ),
    }
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() -> ExitCode {
    let criteria: [Criterion; 7] = [
        ("1 noise-free recovery", noise_free_recovery),
        ("2 noisy trend, 10 poses x 5 seeds", noisy_trend),
        ("3 axis recovery on projected circles", axis_recovery),
        ("4 circle fit global optimum", circle_fit_optimum),
        ("5 constraint system sanity", constraint_sanity),
        ("6 pruning with injected faults", pruning_efficacy),
        ("7 determinism", determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let out = run();
        println!(
            "criterion {name}: {} ({})",
            if out.pass { "PASS" } else { "FAIL" },
            out.detail
        );
        if !out.pass {
            failed += 1;
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
