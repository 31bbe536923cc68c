//! Per-motion estimation of the rotation axis and a reference direction
//! toward the axis line, both in the camera frame.
//!
//! Each validated conic yields a projection cone whose circular sections
//! give two plane normals. Every candidate normal defines a projection
//! plane; on the right one the trajectories become circles traversed at
//! the joint rate, so the candidate with the smallest radius-normalized
//! circle-fit cost wins. The circle centers on that plane lie on the image
//! of the axis line.

use std::collections::BTreeMap;

use nalgebra::{Matrix2, Matrix4, SymmetricEigen, Unit, Vector2, Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conic::{ConicCoefficients, MotionConicFit};
use crate::geometry::{angle_between, GeometryError, PlaneFrame, UnitVector3};
use crate::planner::ExploratoryMotion;
use crate::scene::{mix_seed, KeypointTrajectory};

/// Radii below this are treated as a keypoint sitting on the axis.
pub const MIN_RADIUS: f64 = 1e-9;
/// Smallest accepted `|axis × ref_direction|`.
/// Shortest trajectory that enters candidate scoring.
pub const MIN_SCORED_SAMPLES: usize = 6;

/// A track whose RMS ray angle about the preliminary axis exceeds this
/// multiple of the median track is left out of the refinement.
pub const TRACK_OUTLIER_FACTOR: f64 = 3.0;
/// Lower bound (rad) on that cutoff, for noise-free data.
pub const TRACK_OUTLIER_FLOOR: f64 = 1e-4;
pub const MIN_REFERENCE_SINE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimationError {
    #[error("conic is not the image of a circle (eigenvalues {0:?})")]
    NotARealCone([f64; 3]),
    #[error("trajectory does not sweep an arc")]
    DegenerateArc,
    #[error("trajectory collapses to a point (radius {0:e})")]
    PointCircle(f64),
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error(transparent)]
    Projection(#[from] GeometryError),
    #[error("centerline has {inliers} inliers, need {needed}")]
    CenterlineFailure { inliers: usize, needed: usize },
    #[error("no trajectory produced an axis candidate")]
    NoCandidates,
    #[error("no candidate could be scored on any trajectory")]
    AllCandidatesFailed,
    #[error("reference direction is parallel to the axis")]
    ParallelReference,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RansacParams {
    /// Inlier threshold: perpendicular distance on the unit-distance plane.
    pub line_tol: f64,
    pub min_inliers: usize,
    /// Random hypotheses drawn when exhaustive enumeration would be larger.
    pub iterations: usize,
    pub seed: u64,
}

impl Default for RansacParams {
    fn default() -> Self {
        Self {
            line_tol: 0.01,
            min_inliers: 2,
            iterations: 200,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimationParams {
    /// Candidates closer than this (rad) are merged.
    pub dedup_tol: f64,
    /// The runner-up score is taken over candidates at least this far (rad)
    /// from the winner, so noisy copies of the winner do not count as rivals.
    pub rival_min_angle: f64,
    /// Polish candidates by minimizing their score over the axis direction.
    pub refine: bool,
    /// How many of the best-scoring candidates are polished before selection.
    pub refine_top: usize,
    pub ransac: RansacParams,
}

impl Default for EstimationParams {
    fn default() -> Self {
        Self {
            dedup_tol: 2f64.to_radians(),
            rival_min_angle: 0.1,
            refine: true,
            refine_top: 4,
            ransac: RansacParams::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxisCandidate {
    pub axis: UnitVector3,
    /// Keypoint whose conic produced this candidate.
    pub source_trajectory: usize,
    pub score: Option<f64>,
}

/// Circle traversed at the joint rate on a projection plane:
/// `p(δ) = center + radius·(cos(δ + phase), sin(δ + phase))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CircleFit {
    pub center: Vector2<f64>,
    pub radius: f64,
    /// In `[0, 2π)`.
    pub phase: f64,
    /// Sum of squared distances to the model points.
    pub residual: f64,
}

impl CircleFit {
    pub fn point_at(&self, delta: f64) -> Vector2<f64> {
        let a = delta + self.phase;
        self.center + self.radius * Vector2::new(a.cos(), a.sin())
    }
}

/// Infinite 2D line `point + s·direction`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Line2 {
    pub point: Vector2<f64>,
    pub direction: Unit<Vector2<f64>>,
}

impl Line2 {
    pub fn through(a: &Vector2<f64>, b: &Vector2<f64>) -> Option<Self> {
        let d = b - a;
        let n = d.norm();
        if !(n > 0.0) {
            return None;
        }
        Some(Self {
            point: *a,
            direction: Unit::new_unchecked(d / n),
        })
    }

    pub fn distance(&self, p: &Vector2<f64>) -> f64 {
        let w = p - self.point;
        (w.x * self.direction.y - w.y * self.direction.x).abs()
    }

    /// Orthogonal projection of `p` onto the line.
    pub fn foot(&self, p: &Vector2<f64>) -> Vector2<f64> {
        self.point + self.direction.into_inner() * (p - self.point).dot(&self.direction)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MotionObservation {
    pub motion: ExploratoryMotion,
    pub axis: UnitVector3,
    pub ref_direction: UnitVector3,
    /// Lowest candidate score.
    pub best_score: f64,
    /// Best score among rival candidates; equals `best_score` without rivals.
    pub second_score: f64,
    /// Score of the reported axis. Differs from `best_score` only when a
    /// rival was picked on purpose.
    pub selected_score: f64,
    pub inlier_ratio: f64,
    /// Trajectories whose circle centers entered the centerline fit.
    pub trajectory_count: usize,
    /// Keypoints whose centers are centerline inliers, ascending.
    pub inlier_keypoints: Vec<usize>,
    pub candidate_count: usize,
}

impl MotionObservation {
    /// Unit normal of the plane through the camera center containing the axis.
    pub fn plane_normal(&self) -> Vector3<f64> {
        self.ref_direction.cross(&self.axis).normalize()
    }

    /// `(second − best) / second`, zero when there is no rival.
    pub fn score_gap(&self) -> f64 {
        if self.second_score > 0.0 {
            (self.second_score - self.best_score) / self.second_score
        } else {
            0.0
        }
    }
}

/// Signed rotation sense of the motion as seen in a trajectory's samples.
fn sweep_sign(trajectory: &KeypointTrajectory) -> f64 {
    match (trajectory.samples.first(), trajectory.samples.last()) {
        (Some(a), Some(b)) if b.delta != a.delta => (b.delta - a.delta).signum(),
        _ => 0.0,
    }
}

/// Shoelace area of the closed polygon of projected samples.
fn signed_area(frame: &PlaneFrame, trajectory: &KeypointTrajectory) -> Result<f64, GeometryError> {
    let pts = trajectory
        .samples
        .iter()
        .map(|s| frame.project(&s.point))
        .collect::<Result<Vec<_>, _>>()?;
    let n = pts.len();
    Ok(0.5
        * (0..n)
            .map(|k| {
                let (p, q) = (pts[k], pts[(k + 1) % n]);
                p.x * q.y - p.y * q.x
            })
            .sum::<f64>())
}

/// Both circle-plane normals of a projected circle, each oriented so that
/// the observed motion is a rotation by the trajectory's `δ` about it.
pub fn axis_candidates(
    conic: &ConicCoefficients,
    trajectory: &KeypointTrajectory,
) -> Result<[AxisCandidate; 2], EstimationError> {
    let conic = conic
        .normalized()
        .ok_or(EstimationError::NotARealCone([0.0; 3]))?;
    let eig = SymmetricEigen::new(conic.matrix());
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let vals = order.map(|i| eig.eigenvalues[i]);
    let scale = vals.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let tiny = 1e-12 * scale;
    let negatives = vals.iter().filter(|v| **v < -tiny).count();
    let positives = vals.iter().filter(|v| **v > tiny).count();
    // one eigenvalue sign apart from the other two, none zero
    let flip = match (negatives, positives) {
        (1, 2) => 1.0,
        (2, 1) => -1.0,
        _ => return Err(EstimationError::NotARealCone(vals)),
    };
    // ascending after the flip: neg < small positive <= large positive
    let (neg, small, large) = if flip > 0.0 { (0, 1, 2) } else { (2, 1, 0) };
    let l_neg = flip * vals[neg];
    let l_small = flip * vals[small];
    let l_large = flip * vals[large];
    let e_neg: Vector3<f64> = eig.eigenvectors.column(order[neg]).into_owned();
    let e_large: Vector3<f64> = eig.eigenvectors.column(order[large]).into_owned();

    let span = l_large - l_neg;
    let w_neg = ((l_small - l_neg) / span).max(0.0).sqrt();
    let w_large = ((l_large - l_small) / span).max(0.0).sqrt();

    let sense = sweep_sign(trajectory);
    if sense == 0.0 {
        return Err(EstimationError::DegenerateArc);
    }
    let mut out = [AxisCandidate {
        axis: Vector3::z_axis(),
        source_trajectory: trajectory.keypoint_id,
        score: None,
    }; 2];
    for (slot, s) in out.iter_mut().zip([1.0, -1.0]) {
        let n = UnitVector3::new_normalize(w_neg * e_neg + s * w_large * e_large);
        let area = signed_area(&PlaneFrame::new(&n), trajectory)?;
        if area == 0.0 {
            return Err(EstimationError::DegenerateArc);
        }
        slot.axis = if area.signum() == sense { n } else { -n };
    }
    Ok(out)
}

/// Least-squares circle on the projection plane normal to `axis`, with the
/// angular position tied to the joint displacement of each sample.
pub fn fit_projected_circle(
    trajectory: &KeypointTrajectory,
    axis: &UnitVector3,
) -> Result<CircleFit, EstimationError> {
    ArcDesign::new(trajectory)?.fit(&PlaneFrame::new(axis), trajectory)
}

/// Candidate score of `axis`: the sum over trajectories of the circle-fit
/// residual divided by the fitted radius. Trajectories shorter than
/// [`MIN_SCORED_SAMPLES`] are skipped.
pub fn axis_candidate_score(
    axis: &UnitVector3,
    trajectories: &[KeypointTrajectory],
) -> Result<f64, EstimationError> {
    let frame = PlaneFrame::new(axis);
    let mut total = 0.0;
    for t in trajectories.iter().filter(|t| t.len() >= MIN_SCORED_SAMPLES) {
        let f = ArcDesign::new(t)?.fit(&frame, t)?;
        total += f.residual / f.radius;
    }
    Ok(total)
}

/// The δ-dependent part of the linear circle model, shared by every
/// projection plane. Unknowns are `(cx, cy, a1, a2)` with
/// `a1 = r cos(phase)`, `a2 = r sin(phase)`, so
/// `u = cx + a1 cos δ − a2 sin δ` and `v = cy + a1 sin δ + a2 cos δ`.
#[derive(Debug, Clone)]
struct ArcDesign {
    cos_sin: Vec<(f64, f64)>,
    normal_inv: Matrix4<f64>,
}

impl ArcDesign {
    fn new(trajectory: &KeypointTrajectory) -> Result<Self, EstimationError> {
        let m = trajectory.samples.len();
        if m < 4 {
            return Err(EstimationError::TooFewSamples { needed: 4, got: m });
        }
        let cos_sin: Vec<(f64, f64)> = trajectory
            .samples
            .iter()
            .map(|s| {
                let (sn, cs) = s.delta.sin_cos();
                (cs, sn)
            })
            .collect();
        let (sc, ss) = cos_sin.iter().fold((0.0, 0.0), |a, (c, s)| (a.0 + c, a.1 + s));
        let mf = m as f64;
        #[rustfmt::skip]
        let normal = Matrix4::new(
            mf, 0.0, sc, -ss,
            0.0, mf, ss, sc,
            sc, ss, mf, 0.0,
            -ss, sc, 0.0, mf,
        );
        let eig = normal.symmetric_eigenvalues();
        if eig.min() <= 1e-12 * eig.max() {
            return Err(EstimationError::DegenerateArc);
        }
        let normal_inv = normal.try_inverse().ok_or(EstimationError::DegenerateArc)?;
        Ok(Self { cos_sin, normal_inv })
    }

    fn fit(&self, frame: &PlaneFrame, trajectory: &KeypointTrajectory) -> Result<CircleFit, EstimationError> {
        let pts = trajectory
            .samples
            .iter()
            .map(|s| frame.project(&s.point))
            .collect::<Result<Vec<_>, _>>()?;
        let mut rhs = Vector4::zeros();
        for (p, (c, s)) in pts.iter().zip(&self.cos_sin) {
            rhs += Vector4::new(p.x, p.y, p.x * c + p.y * s, -p.x * s + p.y * c);
        }
        let x = self.normal_inv * rhs;
        let residual = pts
            .iter()
            .zip(&self.cos_sin)
            .map(|(p, (c, s))| {
                let du = p.x - (x[0] + x[2] * c - x[3] * s);
                let dv = p.y - (x[1] + x[2] * s + x[3] * c);
                du * du + dv * dv
            })
            .sum();
        let radius = x[2].hypot(x[3]);
        if radius < MIN_RADIUS {
            return Err(EstimationError::PointCircle(radius));
        }
        Ok(CircleFit {
            center: Vector2::new(x[0], x[1]),
            radius,
            phase: x[3].atan2(x[2]).rem_euclid(std::f64::consts::TAU),
            residual,
        })
    }
}

/// Radius-normalized circle cost of `axis` summed over `arcs`; `None` if
/// any trajectory cannot be fitted on that plane.
fn axis_score(
    axis: &UnitVector3,
    arcs: &[(&ArcDesign, &KeypointTrajectory)],
) -> Option<(f64, Vec<CircleFit>)> {
    let frame = PlaneFrame::new(axis);
    let fits = arcs
        .iter()
        .map(|(d, t)| d.fit(&frame, t).ok())
        .collect::<Option<Vec<_>>>()?;
    Some((fits.iter().map(|f| f.residual / f.radius).sum(), fits))
}

/// Reprojection score of `axis`: each sample ray is compared with the line
/// through the camera center and its model point on the fitted circle by
/// `sin²θ`, which is the squared image distance near the optical axis and
/// does not care on which side of the center the projection plane lies.
/// Infinite when a fit fails.
fn reprojection_score(axis: &UnitVector3, arcs: &[(&ArcDesign, &KeypointTrajectory)]) -> f64 {
    track_residuals(axis, arcs).map_or(f64::INFINITY, |r| r.iter().sum())
}

/// Per-trajectory sums of `sin²θ` used by [`reprojection_score`].
fn track_residuals(axis: &UnitVector3, arcs: &[(&ArcDesign, &KeypointTrajectory)]) -> Option<Vec<f64>> {
    let frame = PlaneFrame::new(axis);
    arcs.iter()
        .map(|(d, t)| {
            let f = d.fit(&frame, t).ok()?;
            Some(
                t.samples
                    .iter()
                    .map(|s| {
                        let model = frame.lift(&f.point_at(s.delta)).normalize();
                        model.cross(&s.point.ray().normalize()).norm_squared()
                    })
                    .sum(),
            )
        })
        .collect()
}

/// Local minimization of the reprojection score over the axis direction,
/// by Nelder–Mead in tangent coordinates around `start`.
fn refine_axis(start: &UnitVector3, arcs: &[(&ArcDesign, &KeypointTrajectory)]) -> (UnitVector3, f64) {
    let frame = PlaneFrame::new(start);
    let at =
        |x: &Vector2<f64>| UnitVector3::new_normalize(start.into_inner() + frame.e1 * x.x + frame.e2 * x.y);
    let cost = |x: &Vector2<f64>| reprojection_score(&at(x), arcs);

    let step = 1e-2;
    let mut simplex = [Vector2::zeros(), Vector2::new(step, 0.0), Vector2::new(0.0, step)];
    let mut values = simplex.map(|x| cost(&x));
    for _ in 0..200 {
        let mut idx = [0usize, 1, 2];
        idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        simplex = idx.map(|i| simplex[i]);
        values = idx.map(|i| values[i]);
        let size = (simplex[1] - simplex[0])
            .norm()
            .max((simplex[2] - simplex[0]).norm());
        if size < 1e-10 {
            break;
        }
        let centroid = (simplex[0] + simplex[1]) / 2.0;
        let reflected = centroid + (centroid - simplex[2]);
        let fr = cost(&reflected);
        if fr < values[0] {
            let expanded = centroid + 2.0 * (centroid - simplex[2]);
            let fe = cost(&expanded);
            if fe < fr {
                simplex[2] = expanded;
                values[2] = fe;
            } else {
                simplex[2] = reflected;
                values[2] = fr;
            }
        } else if fr < values[1] {
            simplex[2] = reflected;
            values[2] = fr;
        } else {
            let contracted = if fr < values[2] {
                centroid + 0.5 * (reflected - centroid)
            } else {
                centroid + 0.5 * (simplex[2] - centroid)
            };
            let fc = cost(&contracted);
            if fc < values[2].min(fr) {
                simplex[2] = contracted;
                values[2] = fc;
            } else {
                for k in 1..3 {
                    simplex[k] = simplex[0] + 0.5 * (simplex[k] - simplex[0]);
                    values[k] = cost(&simplex[k]);
                }
            }
        }
    }
    let best = (0..3).min_by(|&a, &b| values[a].total_cmp(&values[b])).unwrap();
    (at(&simplex[best]), values[best])
}

/// Total-least-squares line through `points`.
fn tls_line(points: &[Vector2<f64>]) -> Option<Line2> {
    let n = points.len() as f64;
    let mean = points.iter().sum::<Vector2<f64>>() / n;
    let mut cov = Matrix2::zeros();
    for p in points {
        let d = p - mean;
        cov += d * d.transpose();
    }
    let eig = cov.symmetric_eigen();
    let i = eig.eigenvalues.imax();
    let dir: Vector2<f64> = eig.eigenvectors.column(i).into_owned();
    if !(dir.norm() > 0.0) || !(eig.eigenvalues[i] > 0.0) {
        return None;
    }
    Some(Line2 {
        point: mean,
        direction: Unit::new_normalize(dir),
    })
}

/// RANSAC line through 2D points followed by a total-least-squares refit on
/// the inliers of the best hypothesis. Every pair is tried when there are no
/// more pairs than `params.iterations`.
pub fn fit_centerline(
    centers: &[Vector2<f64>],
    params: &RansacParams,
) -> Result<(Line2, Vec<bool>), EstimationError> {
    let n = centers.len();
    let needed = params.min_inliers.max(2);
    if n < 2 {
        return Err(EstimationError::CenterlineFailure { inliers: n, needed });
    }
    let pairs = n * (n - 1) / 2;
    let hypotheses: Vec<(usize, usize)> = if pairs <= params.iterations {
        (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        (0..params.iterations)
            .map(|_| {
                let i = rng.random_range(0..n);
                let j = (i + rng.random_range(1..n)) % n;
                (i.min(j), i.max(j))
            })
            .collect()
    };

    // most inliers, then smallest inlier spread
    let mut best: Option<(usize, f64, Vec<bool>)> = None;
    for (i, j) in hypotheses {
        let Some(line) = Line2::through(&centers[i], &centers[j]) else {
            continue;
        };
        let dists: Vec<f64> = centers.iter().map(|c| line.distance(c)).collect();
        let mask: Vec<bool> = dists.iter().map(|d| *d <= params.line_tol).collect();
        let count = mask.iter().filter(|m| **m).count();
        let spread: f64 = dists
            .iter()
            .zip(&mask)
            .filter(|(_, m)| **m)
            .map(|(d, _)| d * d)
            .sum();
        let better = match &best {
            None => true,
            Some((c, s, _)) => count > *c || (count == *c && spread < *s),
        };
        if better {
            best = Some((count, spread, mask));
        }
    }
    let Some((count, _, mask)) = best else {
        return Err(EstimationError::CenterlineFailure { inliers: 0, needed });
    };
    if count < needed {
        return Err(EstimationError::CenterlineFailure {
            inliers: count,
            needed,
        });
    }
    let inliers: Vec<Vector2<f64>> = centers
        .iter()
        .zip(&mask)
        .filter(|(_, m)| **m)
        .map(|(c, _)| *c)
        .collect();
    let line = tls_line(&inliers).ok_or(EstimationError::CenterlineFailure {
        inliers: count,
        needed,
    })?;
    Ok((line, mask))
}

/// Full estimate for one motion from its validated conic fit.
pub fn estimate_observation(
    motion: &ExploratoryMotion,
    fit: &MotionConicFit,
    trajectories: &[KeypointTrajectory],
    params: &EstimationParams,
) -> Result<MotionObservation, EstimationError> {
    estimate_impl(motion, fit, trajectories, params, false).map(|(o, _)| o)
}

/// Like [`estimate_observation`] but deliberately keeps the best rival
/// instead of the winner. Used to inject the two-fold ambiguity
/// as a fault. The flag is false when there is no rival to pick.
pub fn estimate_rival_observation(
    motion: &ExploratoryMotion,
    fit: &MotionConicFit,
    trajectories: &[KeypointTrajectory],
    params: &EstimationParams,
) -> Result<(MotionObservation, bool), EstimationError> {
    estimate_impl(motion, fit, trajectories, params, true)
}

fn estimate_impl(
    motion: &ExploratoryMotion,
    fit: &MotionConicFit,
    trajectories: &[KeypointTrajectory],
    params: &EstimationParams,
    take_rival: bool,
) -> Result<(MotionObservation, bool), EstimationError> {
    let by_id: BTreeMap<usize, &KeypointTrajectory> =
        trajectories.iter().map(|t| (t.keypoint_id, t)).collect();
    let mut conics: Vec<_> = fit
        .conics
        .iter()
        .filter_map(|c| by_id.get(&c.keypoint_id).map(|t| (c, *t)))
        .collect();
    conics.sort_by_key(|(c, _)| c.keypoint_id);
    if conics.is_empty() {
        return Err(EstimationError::NoCandidates);
    }

    let mut candidates: Vec<AxisCandidate> = Vec::new();
    for (c, t) in &conics {
        let Ok(pair) = axis_candidates(&c.conic, t) else {
            continue;
        };
        for cand in pair {
            if candidates
                .iter()
                .all(|k| angle_between(&k.axis, &cand.axis) > params.dedup_tol)
            {
                candidates.push(cand);
            }
        }
    }
    if candidates.is_empty() {
        return Err(EstimationError::NoCandidates);
    }

    // every trajectory is scored, not only those with a valid conic; a
    // trajectory counts only if every candidate can fit it, so all scores
    // sum over the same set
    let mut scored: Vec<&KeypointTrajectory> = trajectories
        .iter()
        .filter(|t| t.len() >= MIN_SCORED_SAMPLES)
        .collect();
    scored.sort_by_key(|t| t.keypoint_id);
    let designs: Vec<Option<ArcDesign>> = scored.iter().map(|t| ArcDesign::new(t).ok()).collect();
    let per_candidate: Vec<Vec<Option<CircleFit>>> = candidates
        .iter()
        .map(|cand| {
            let frame = PlaneFrame::new(&cand.axis);
            scored
                .iter()
                .zip(&designs)
                .map(|(t, d)| d.as_ref().and_then(|d| d.fit(&frame, t).ok()))
                .collect()
        })
        .collect();
    let usable: Vec<usize> = (0..scored.len())
        .filter(|&j| per_candidate.iter().all(|row| row[j].is_some()))
        .collect();
    if usable.is_empty() {
        return Err(EstimationError::AllCandidatesFailed);
    }
    for (cand, row) in candidates.iter_mut().zip(&per_candidate) {
        cand.score = Some(
            usable
                .iter()
                .map(|&j| {
                    let f = row[j].expect("usable");
                    f.residual / f.radius
                })
                .sum(),
        );
    }
    let all_arcs: Vec<(&ArcDesign, &KeypointTrajectory)> = usable
        .iter()
        .map(|&j| (designs[j].as_ref().expect("usable"), scored[j]))
        .collect();
    // indices into `usable` of the trajectories the axis is fitted to. With
    // refinement on, a preliminary axis is polished on the tracks that gave
    // valid ellipses, then tracks far off their circles are dropped twice.
    let kept: Vec<usize> = if params.refine {
        let has_ellipse = |t: &KeypointTrajectory| conics.iter().any(|(c, _)| c.keypoint_id == t.keypoint_id);
        let trusted: Vec<_> = all_arcs.iter().copied().filter(|(_, t)| has_ellipse(t)).collect();
        let trusted = if trusted.is_empty() {
            all_arcs.clone()
        } else {
            trusted
        };
        let first = (0..candidates.len())
            .map(|c| (c, reprojection_score(&candidates[c].axis, &trusted)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(c, _)| refine_axis(&candidates[c].axis, &trusted).0)
            .expect("non-empty");
        let mut axis = first;
        let mut inside: Vec<usize> = (0..all_arcs.len()).collect();
        for round in 0..2 {
            let Some(res) = track_residuals(&axis, &all_arcs) else {
                break;
            };
            let rms: Vec<f64> = res
                .iter()
                .zip(&all_arcs)
                .map(|(r, (_, t))| (r / t.len() as f64).sqrt())
                .collect();
            let mut sorted = rms.clone();
            sorted.sort_by(f64::total_cmp);
            let limit = (TRACK_OUTLIER_FACTOR * sorted[sorted.len() / 2]).max(TRACK_OUTLIER_FLOOR);
            inside = (0..all_arcs.len()).filter(|&k| rms[k] <= limit).collect();
            if round == 0 && inside.len() >= 2 {
                let sub: Vec<_> = inside.iter().map(|&k| all_arcs[k]).collect();
                axis = refine_axis(&axis, &sub).0;
            }
        }
        if inside.len() >= 2 {
            inside
        } else {
            (0..all_arcs.len()).collect()
        }
    } else {
        (0..all_arcs.len()).collect()
    };
    let arcs: Vec<(&ArcDesign, &KeypointTrajectory)> = kept.iter().map(|&k| all_arcs[k]).collect();

    let argmin = |cands: &[AxisCandidate], keep: &dyn Fn(usize) -> bool| {
        (0..cands.len())
            .filter(|&c| keep(c))
            .min_by(|&a, &b| cands[a].score.unwrap().total_cmp(&cands[b].score.unwrap()))
    };
    let far = |cands: &[AxisCandidate], from: usize, c: usize| {
        angle_between(&cands[c].axis, &cands[from].axis) >= params.rival_min_angle
    };
    let (best, rival) = if params.refine {
        // rank by reprojection score, polish the leaders, then make sure the
        // rival is polished as well so the score gap compares two minima
        for cand in candidates.iter_mut() {
            cand.score = Some(reprojection_score(&cand.axis, &arcs));
        }
        let mut refined = vec![false; candidates.len()];
        let mut order: Vec<usize> = (0..candidates.len()).collect();
        order.sort_by(|&a, &b| {
            candidates[a]
                .score
                .unwrap()
                .total_cmp(&candidates[b].score.unwrap())
        });
        let polish = |cands: &mut Vec<AxisCandidate>, c: usize| {
            let (axis, score) = refine_axis(&cands[c].axis, &arcs);
            if score < cands[c].score.unwrap() {
                cands[c].axis = axis;
                cands[c].score = Some(score);
            }
        };
        for &c in order.iter().take(params.refine_top.max(1)) {
            polish(&mut candidates, c);
            refined[c] = true;
        }
        loop {
            let best = argmin(&candidates, &|_| true).expect("non-empty");
            let rival = argmin(&candidates, &|c| far(&candidates, best, c));
            match rival {
                Some(r) if !refined[r] => {
                    polish(&mut candidates, r);
                    refined[r] = true;
                }
                _ => break (best, rival),
            }
        }
    } else {
        let best = argmin(&candidates, &|_| true).expect("non-empty");
        (best, argmin(&candidates, &|c| far(&candidates, best, c)))
    };
    let best_score = candidates[best].score.unwrap();
    let second_score = rival.map_or(best_score, |r| candidates[r].score.unwrap());
    let pick = match (take_rival, rival) {
        (true, Some(r)) => r,
        _ => best,
    };
    let axis = candidates[pick].axis;
    let selected_score = candidates[pick].score.unwrap();
    let (_, fits) = axis_score(&axis, &arcs).ok_or(EstimationError::AllCandidatesFailed)?;

    let frame = PlaneFrame::new(&axis);
    let centers: Vec<Vector2<f64>> = fits.iter().map(|f| f.center).collect();
    let ransac = RansacParams {
        seed: mix_seed(params.ransac.seed, motion_id_of(trajectories)),
        ..params.ransac
    };
    let (line, mask) = fit_centerline(&centers, &ransac)?;
    let inlier_centers: Vec<Vector2<f64>> = centers
        .iter()
        .zip(&mask)
        .filter(|(_, m)| **m)
        .map(|(c, _)| *c)
        .collect();
    let centroid = inlier_centers.iter().sum::<Vector2<f64>>() / inlier_centers.len() as f64;
    let ref_direction = UnitVector3::new_normalize(frame.lift(&line.foot(&centroid)));
    if axis.cross(&ref_direction).norm() <= MIN_REFERENCE_SINE {
        return Err(EstimationError::ParallelReference);
    }
    let mut inlier_keypoints: Vec<usize> = kept
        .iter()
        .zip(&mask)
        .filter(|(_, m)| **m)
        .map(|(&k, _)| scored[usable[k]].keypoint_id)
        .collect();
    inlier_keypoints.sort_unstable();

    let obs = MotionObservation {
        motion: motion.clone(),
        axis,
        ref_direction,
        best_score,
        second_score,
        selected_score,
        inlier_ratio: inlier_keypoints.len() as f64 / usable.len() as f64,
        trajectory_count: usable.len(),
        inlier_keypoints,
        candidate_count: candidates.len(),
    };
    Ok((obs, pick != best))
}

fn motion_id_of(trajectories: &[KeypointTrajectory]) -> u64 {
    trajectories.first().map_or(0, |t| t.motion_id as u64)
}
