//! Joint conic fitting for all keypoint trajectories of one motion.
//!
//! Every trajectory of a motion gets its own conic
//! `A u² + B uv + C v² + D u + E v + F = 0`, but all conics share the
//! orientation parameters `B` and `G = C − A`. The stacked unknown vector is
//! `g = (B, G, A₀, D₀, E₀, F₀, A₁, …)` and the fit minimizes `‖W g‖` subject
//! to `‖g‖ = 1`, where `W` has one row per sample.

use nalgebra::{DMatrix, DVector, Matrix2, Matrix3, SMatrix};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene::KeypointTrajectory;

/// Minimum samples for a trajectory to take part in the fit.
pub const MIN_SAMPLES: usize = 6;
/// Ellipse discriminant margin on the `A² + B² + C² = 1` normalized conic.
pub const ELLIPSE_EPS: f64 = 1e-9;
/// Largest accepted ratio of semi-major to semi-minor axis.
pub const MAX_AXIS_RATIO: f64 = 50.0;

const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FitError {
    #[error("no trajectory has at least {MIN_SAMPLES} usable samples")]
    InsufficientData,
    #[error("design matrix is rank deficient (sigma ratio {ratio:e})")]
    DegenerateFit { ratio: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConicCoefficients {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub e: f64,
    pub f: f64,
}

impl ConicCoefficients {
    pub fn new(a: f64, b: f64, c: f64, d: f64, e: f64, f: f64) -> Self {
        Self { a, b, c, d, e, f }
    }

    pub fn as_array(&self) -> [f64; 6] {
        [self.a, self.b, self.c, self.d, self.e, self.f]
    }

    /// Algebraic distance of `(u, v)`.
    pub fn eval(&self, u: f64, v: f64) -> f64 {
        self.a * u * u + self.b * u * v + self.c * v * v + self.d * u + self.e * v + self.f
    }

    /// Symmetric matrix `Q` with `[u v 1] Q [u v 1]ᵀ = eval(u, v)`.
    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            self.a,
            self.b / 2.0,
            self.d / 2.0,
            self.b / 2.0,
            self.c,
            self.e / 2.0,
            self.d / 2.0,
            self.e / 2.0,
            self.f,
        )
    }

    pub fn from_matrix(q: &Matrix3<f64>) -> Self {
        Self {
            a: q[(0, 0)],
            b: q[(0, 1)] + q[(1, 0)],
            c: q[(1, 1)],
            d: q[(0, 2)] + q[(2, 0)],
            e: q[(1, 2)] + q[(2, 1)],
            f: q[(2, 2)],
        }
    }

    pub fn scaled(&self, k: f64) -> Self {
        let [a, b, c, d, e, f] = self.as_array().map(|x| x * k);
        Self { a, b, c, d, e, f }
    }

    /// Copy scaled so that `A² + B² + C² = 1` with `A + C >= 0`.
    pub fn normalized(&self) -> Option<Self> {
        let n = (self.a * self.a + self.b * self.b + self.c * self.c).sqrt();
        if !(n > 0.0) || !n.is_finite() {
            return None;
        }
        let sign = if self.a + self.c < 0.0 { -1.0 } else { 1.0 };
        Some(self.scaled(sign / n))
    }

    /// `B² − 4AC`; negative for ellipses.
    pub fn discriminant(&self) -> f64 {
        self.b * self.b - 4.0 * self.a * self.c
    }

    /// Ratio of the semi-major to the semi-minor axis, if the quadratic part
    /// is definite.
    pub fn axis_ratio(&self) -> Option<f64> {
        let m = Matrix2::new(self.a, self.b / 2.0, self.b / 2.0, self.c);
        let eig = m.symmetric_eigenvalues();
        let (lo, hi) = (eig[0].abs().min(eig[1].abs()), eig[0].abs().max(eig[1].abs()));
        if eig[0] * eig[1] <= 0.0 || lo == 0.0 {
            return None;
        }
        Some((hi / lo).sqrt())
    }

    /// Real, non-degenerate ellipse with bounded eccentricity.
    pub fn is_valid_ellipse(&self) -> bool {
        let Some(n) = self.normalized() else {
            return false;
        };
        if n.discriminant() >= -ELLIPSE_EPS {
            return false;
        }
        // with A + C > 0 the conic has real points iff det Q < 0
        if n.matrix().determinant() >= 0.0 {
            return false;
        }
        matches!(n.axis_ratio(), Some(r) if r <= MAX_AXIS_RATIO)
    }
}

/// Conic of one trajectory within a motion fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FittedConic {
    pub keypoint_id: usize,
    pub conic: ConicCoefficients,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MotionConicFit {
    pub conics: Vec<FittedConic>,
    /// Shared `B` in image-plane coordinates.
    pub shared_b: f64,
    /// Shared `G = C − A` in image-plane coordinates.
    pub shared_g: f64,
    /// RMS algebraic distance of the unit-norm solution (conditioned coordinates).
    pub residual: f64,
    /// Keypoints excluded before fitting (too short or degenerate tracks).
    pub dropped: Vec<usize>,
}

impl MotionConicFit {
    pub fn is_empty(&self) -> bool {
        self.conics.is_empty()
    }

    pub fn len(&self) -> usize {
        self.conics.len()
    }
}

/// Similarity that centers the samples and scales their RMS radius to √2.
#[derive(Debug, Clone, Copy)]
struct Conditioning {
    mean: [f64; 2],
    scale: f64,
}

impl Conditioning {
    fn from_points(points: impl Iterator<Item = (f64, f64)> + Clone) -> Self {
        let n = points.clone().count().max(1) as f64;
        let (sx, sy) = points
            .clone()
            .fold((0.0, 0.0), |acc, p| (acc.0 + p.0, acc.1 + p.1));
        let mean = [sx / n, sy / n];
        let ms = points.fold(0.0, |acc, p| {
            acc + (p.0 - mean[0]).powi(2) + (p.1 - mean[1]).powi(2)
        }) / n;
        let scale = if ms > 0.0 { (2.0 / ms).sqrt() } else { 1.0 };
        Self { mean, scale }
    }

    fn apply(&self, u: f64, v: f64) -> (f64, f64) {
        ((u - self.mean[0]) * self.scale, (v - self.mean[1]) * self.scale)
    }

    /// Maps a conic in conditioned coordinates back to image coordinates.
    fn denormalize(&self, q: &Matrix3<f64>) -> Matrix3<f64> {
        let s = self.scale;
        let t = Matrix3::new(
            s,
            0.0,
            -s * self.mean[0],
            0.0,
            s,
            -s * self.mean[1],
            0.0,
            0.0,
            1.0,
        );
        t.transpose() * q * t
    }
}

/// Upper-triangular factor of one trajectory's rows, columns ordered
/// `[u²+v², u, v, 1, uv, v²]` (own block first, shared last).
fn trajectory_factor(points: &[(f64, f64)]) -> SMatrix<f64, 6, 6> {
    let mut rows = DMatrix::<f64>::zeros(points.len(), 6);
    for (i, &(x, y)) in points.iter().enumerate() {
        rows[(i, 0)] = x * x + y * y;
        rows[(i, 1)] = x;
        rows[(i, 2)] = y;
        rows[(i, 3)] = 1.0;
        rows[(i, 4)] = x * y;
        rows[(i, 5)] = y * y;
    }
    let r = rows.qr().r();
    let mut out = SMatrix::<f64, 6, 6>::zeros();
    out.view_mut((0, 0), (r.nrows(), 6)).copy_from(&r);
    out
}

/// Whether the samples span the plane (not all coincident or collinear);
/// otherwise the trajectory's own conic block has spurious null directions.
fn spans_plane(points: &[(f64, f64)]) -> bool {
    let mut m = DMatrix::<f64>::zeros(points.len(), 3);
    for (i, &(x, y)) in points.iter().enumerate() {
        m[(i, 0)] = x;
        m[(i, 1)] = y;
        m[(i, 2)] = 1.0;
    }
    let sv = m.singular_values();
    let max = sv.max();
    max > 0.0 && sv.min() > 1e-9 * max
}

/// Fits one conic per trajectory under the shared-orientation constraint.
///
/// Trajectories with fewer than [`MIN_SAMPLES`] samples, or whose samples
/// are coincident or collinear, are dropped and listed in
/// [`MotionConicFit::dropped`].
///
/// When every trajectory is an exact circle the unit-norm problem has one
/// null direction per trajectory (all with `B = G = 0`); each trajectory
/// then takes its own circle from that null space.
pub fn fit_shared_conics(trajectories: &[KeypointTrajectory]) -> Result<MotionConicFit, FitError> {
    let mut dropped = Vec::new();
    let long: Vec<&KeypointTrajectory> = trajectories
        .iter()
        .filter(|t| {
            let ok = t.len() >= MIN_SAMPLES;
            if !ok {
                dropped.push(t.keypoint_id);
            }
            ok
        })
        .collect();
    if long.is_empty() {
        return Err(FitError::InsufficientData);
    }
    let cond = Conditioning::from_points(
        long.iter()
            .flat_map(|t| t.samples.iter().map(|s| (s.point.u, s.point.v))),
    );

    let mut kept: Vec<(&KeypointTrajectory, SMatrix<f64, 6, 6>)> = Vec::new();
    let mut total_samples = 0usize;
    for t in long {
        let pts: Vec<(f64, f64)> = t
            .samples
            .iter()
            .map(|s| cond.apply(s.point.u, s.point.v))
            .collect();
        if spans_plane(&pts) {
            total_samples += pts.len();
            kept.push((t, trajectory_factor(&pts)));
        } else {
            dropped.push(t.keypoint_id);
        }
    }
    if kept.is_empty() {
        return Err(FitError::InsufficientData);
    }

    // compressed design matrix: same singular values and right singular
    // vectors as the full per-sample matrix
    let l = kept.len();
    let cols = 4 * l + 2;
    let mut w = DMatrix::<f64>::zeros(6 * l, cols);
    for (j, (_, r)) in kept.iter().enumerate() {
        let row0 = 6 * j;
        w.view_mut((row0, 2 + 4 * j), (6, 4))
            .copy_from(&r.fixed_view::<6, 4>(0, 0));
        w.view_mut((row0, 0), (6, 2))
            .copy_from(&r.fixed_view::<6, 2>(0, 4));
    }
    let g = unit_null_vector(&w, l)?;
    let residual = (&w * &g).norm() / (total_samples as f64).sqrt();

    let (b_n, g_n) = (g[0], g[1]);
    let s2 = cond.scale * cond.scale;
    let shared_b = b_n * s2;
    let shared_g = g_n * s2;
    let conics = kept
        .iter()
        .enumerate()
        .map(|(j, (t, _))| {
            let o = 2 + 4 * j;
            let a_n = g[o];
            let local = ConicCoefficients::new(a_n, b_n, a_n + g_n, g[o + 1], g[o + 2], g[o + 3]);
            let full = ConicCoefficients::from_matrix(&cond.denormalize(&local.matrix()));
            FittedConic {
                keypoint_id: t.keypoint_id,
                conic: ConicCoefficients {
                    b: shared_b,
                    c: full.a + shared_g,
                    ..full
                },
            }
        })
        .collect();
    Ok(MotionConicFit {
        conics,
        shared_b,
        shared_g,
        residual,
        dropped,
    })
}

/// Unit vector minimizing `‖W g‖` for the block layout of
/// [`fit_shared_conics`] with `l` trajectories.
fn unit_null_vector(w: &DMatrix<f64>, l: usize) -> Result<DVector<f64>, FitError> {
    let cols = w.ncols();
    let svd = w.clone().svd(false, true);
    let v_t = svd.v_t.as_ref().expect("requested V");
    let sv = &svd.singular_values;
    if sv.len() < cols {
        return Err(FitError::DegenerateFit { ratio: 0.0 });
    }
    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]));
    let smax = sv[order[0]];
    if !(smax > 0.0) {
        return Err(FitError::DegenerateFit { ratio: 0.0 });
    }
    let null: Vec<usize> = order
        .iter()
        .copied()
        .filter(|&i| sv[i] <= RANK_TOL * smax)
        .collect();
    if null.len() <= 1 {
        return Ok(v_t.row(order[cols - 1]).transpose());
    }

    // multi-dimensional null space: only the all-circles case is resolvable
    let basis = DMatrix::from_fn(cols, null.len(), |r, c| v_t[(null[c], r)]);
    let shared = basis.rows(0, 2);
    let ratio = sv[order[cols - 2]] / smax;
    if shared.norm() > 1e-8 {
        return Err(FitError::DegenerateFit { ratio });
    }
    let mut g = DVector::<f64>::zeros(cols);
    for j in 0..l {
        let block = basis.rows(2 + 4 * j, 4).into_owned();
        let svd = block.clone().svd(false, true);
        let vt = svd.v_t.expect("requested V");
        let top = svd.singular_values.imax();
        if svd.singular_values[top] < 1e-8 {
            return Err(FitError::DegenerateFit { ratio });
        }
        let own = &block * vt.row(top).transpose();
        g.rows_mut(2 + 4 * j, 4)
            .copy_from(&(own.normalize() / (l as f64).sqrt()));
    }
    Ok(g)
}

/// Keeps only conics that are genuine, not-too-eccentric ellipses.
pub fn validate_ellipses(fit: &MotionConicFit) -> MotionConicFit {
    let mut out = fit.clone();
    out.conics.retain(|c| c.conic.is_valid_ellipse());
    out
}
