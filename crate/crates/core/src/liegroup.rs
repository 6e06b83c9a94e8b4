//! Closed-form SO(3) / SE(3) group and algebra operations.
//!
//! Twists are stored as `(omega, v)`: angular velocity first, linear velocity
//! second. The matrix embedding of a twist is the usual
//! `[[hat(omega), v], [0, 0]]`, so `exp_se3` agrees with the 4×4 matrix power
//! series.
//!
//! Every transform produced here has an orthonormal rotation block with unit
//! determinant to within 1e-9; composition re-projects onto SO(3) once the
//! accumulated drift exceeds 1e-12.

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Below this angle the Rodrigues coefficients switch to their Taylor series.
pub const SMALL_ANGLE: f64 = 1e-6;

/// Tolerance on `‖R Rᵀ − I‖_F` accepted by the logarithm maps.
pub const ROTATION_TOLERANCE: f64 = 1e-6;

const POLAR_DRIFT: f64 = 1e-12;

#[derive(Debug, Error, Clone, Copy, PartialEq)]
pub enum LieError {
    #[error("matrix is not a rotation (orthonormality error {deviation:.3e}, det {det:.6})")]
    NotARotation { deviation: f64, det: f64 },
    #[error("empty input")]
    EmptyInput,
}

/// Element of se(3): angular velocity `omega` (rad per unit time) and
/// linear velocity `v` (scene units per unit time).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Twist {
    pub omega: Vec3,
    pub v: Vec3,
}

impl Twist {
    pub fn new(omega: Vec3, v: Vec3) -> Self {
        Self { omega, v }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn from_array(xi: [f64; 6]) -> Self {
        Self {
            omega: Vec3::new(xi[0], xi[1], xi[2]),
            v: Vec3::new(xi[3], xi[4], xi[5]),
        }
    }

    pub fn to_array(&self) -> [f64; 6] {
        [
            self.omega.x,
            self.omega.y,
            self.omega.z,
            self.v.x,
            self.v.y,
            self.v.z,
        ]
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            omega: self.omega * s,
            v: self.v * s,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|c| c.is_finite())
    }

    /// Largest absolute component-wise difference.
    pub fn max_abs_diff(&self, other: &Twist) -> f64 {
        self.to_array()
            .iter()
            .zip(other.to_array())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// The 4×4 matrix embedding `[[hat(omega), v], [0, 0]]`.
    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::zeros();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&hat(&self.omega));
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.v);
        m
    }
}

impl std::ops::Add for Twist {
    type Output = Twist;
    fn add(self, rhs: Twist) -> Twist {
        Twist::new(self.omega + rhs.omega, self.v + rhs.v)
    }
}

/// Element of SE(3): rotation block plus translation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn new(rotation: Mat3, translation: Vec3) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn from_translation(t: Vec3) -> Self {
        Self::new(Mat3::identity(), t)
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Reads the top 3×4 block of a homogeneous matrix. No validation.
    pub fn from_matrix(m: &Matrix4<f64>) -> Self {
        Self {
            rotation: m.fixed_view::<3, 3>(0, 0).into_owned(),
            translation: m.fixed_view::<3, 1>(0, 3).into_owned(),
        }
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `‖R Rᵀ − I‖_F`.
    pub fn orthonormality_error(&self) -> f64 {
        orthonormality_error(&self.rotation)
    }

    pub fn max_abs_diff(&self, other: &RigidTransform) -> f64 {
        let dr = (self.rotation - other.rotation).abs().max();
        let dt = (self.translation - other.translation).abs().max();
        dr.max(dt)
    }
}

pub fn orthonormality_error(r: &Mat3) -> f64 {
    (r * r.transpose() - Mat3::identity()).norm()
}

/// Cross-product matrix: `hat(w) * p == w × p`.
pub fn hat(w: &Vec3) -> Mat3 {
    Mat3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// Inverse of [`hat`] on skew-symmetric matrices.
pub fn vee(m: &Mat3) -> Vec3 {
    Vec3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// `(sin θ / θ, (1 − cos θ) / θ², (θ − sin θ) / θ³)` at angle `theta`.
pub(crate) fn rodrigues_coefficients(theta: f64) -> (f64, f64, f64) {
    if theta < SMALL_ANGLE {
        let t2 = theta * theta;
        (1.0 - t2 / 6.0, 0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0)
    } else {
        let (s, c) = theta.sin_cos();
        let t2 = theta * theta;
        (s / theta, (1.0 - c) / t2, (theta - s) / (t2 * theta))
    }
}

/// Rodrigues' formula.
pub fn exp_so3(omega: &Vec3) -> Mat3 {
    let theta = omega.norm();
    let (a, b, _) = rodrigues_coefficients(theta);
    let k = hat(omega);
    Mat3::identity() + k * a + k * k * b
}

/// Left Jacobian `V(ω)` of SO(3), mapping `v` to the translation of `exp_se3`.
pub fn left_jacobian_so3(omega: &Vec3) -> Mat3 {
    let theta = omega.norm();
    let (_, b, c) = rodrigues_coefficients(theta);
    let k = hat(omega);
    Mat3::identity() + k * b + k * k * c
}

fn check_rotation(r: &Mat3) -> Result<(), LieError> {
    let deviation = orthonormality_error(r);
    let det = r.determinant();
    if !deviation.is_finite() || deviation > ROTATION_TOLERANCE || det <= 0.0 {
        return Err(LieError::NotARotation { deviation, det });
    }
    Ok(())
}

/// Result of the SO(3) logarithm, with a flag for the near-half-turn branch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct So3Log {
    pub omega: Vec3,
    /// `trace(R) ≤ −1 + 1e-6`; the axis came from the symmetric part of `R`.
    pub near_pi: bool,
}

/// SO(3) logarithm returning the rotation vector with `‖ω‖ ∈ [0, π]`.
pub fn log_so3(r: &Mat3) -> Result<Vec3, LieError> {
    log_so3_flagged(r).map(|l| l.omega)
}

pub fn log_so3_flagged(r: &Mat3) -> Result<So3Log, LieError> {
    check_rotation(r)?;
    // a = sin θ · n
    let a = vee(&(r - r.transpose())) * 0.5;
    let sin_theta = a.norm();
    let cos_theta = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let theta = sin_theta.atan2(cos_theta);
    let near_pi = r.trace() <= -1.0 + 1e-6;

    if theta < SMALL_ANGLE {
        return Ok(So3Log {
            omega: a * (1.0 + theta * theta / 6.0),
            near_pi,
        });
    }
    if cos_theta > -0.9 {
        return Ok(So3Log {
            omega: a * (theta / sin_theta),
            near_pi,
        });
    }

    // (R + Rᵀ)/2 − cos θ·I = (1 − cos θ)·n nᵀ; take its best-conditioned column.
    let sym = (r + r.transpose()) * 0.5 - Mat3::identity() * cos_theta;
    let k = (0..3)
        .max_by(|&i, &j| sym[(i, i)].total_cmp(&sym[(j, j)]))
        .unwrap_or(0);
    let mut axis: Vec3 = sym.column(k).into_owned();
    axis /= axis.norm();
    let along = a.dot(&axis);
    if along.abs() > 1e-12 {
        if along < 0.0 {
            axis = -axis;
        }
    } else if let Some(first) = axis.iter().copied().find(|c| c.abs() > 1e-12) {
        if first < 0.0 {
            axis = -axis;
        }
    }
    Ok(So3Log {
        omega: axis * theta,
        near_pi,
    })
}

pub fn exp_se3(xi: &Twist) -> RigidTransform {
    let theta = xi.omega.norm();
    let (a, b, c) = rodrigues_coefficients(theta);
    let k = hat(&xi.omega);
    let k2 = k * k;
    let rotation = Mat3::identity() + k * a + k2 * b;
    let v_mat = Mat3::identity() + k * b + k2 * c;
    RigidTransform {
        rotation,
        translation: v_mat * xi.v,
    }
}

pub fn log_se3(g: &RigidTransform) -> Result<Twist, LieError> {
    let omega = log_so3(&g.rotation)?;
    let theta = omega.norm();
    let k = hat(&omega);
    // V⁻¹ = I − ½·hat(ω) + d(θ)·hat(ω)²
    let d = if theta < 1e-4 {
        1.0 / 12.0 + theta * theta / 720.0
    } else {
        let (s, c) = theta.sin_cos();
        (1.0 - theta * s / (2.0 * (1.0 - c))) / (theta * theta)
    };
    let v_inv = Mat3::identity() - k * 0.5 + k * k * d;
    Ok(Twist {
        omega,
        v: v_inv * g.translation,
    })
}

/// Nearest rotation in the Frobenius sense (polar factor).
pub fn project_to_so3(m: &Mat3) -> Mat3 {
    let svd = m.svd(true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return *m,
    };
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        let mut u = u;
        u.column_mut(2).neg_mut();
        r = u * v_t;
    }
    r
}

/// Group product `a ∘ b` (apply `b` first).
pub fn compose(a: &RigidTransform, b: &RigidTransform) -> RigidTransform {
    let mut rotation = a.rotation * b.rotation;
    if orthonormality_error(&rotation) > POLAR_DRIFT {
        rotation = project_to_so3(&rotation);
    }
    RigidTransform {
        rotation,
        translation: a.rotation * b.translation + a.translation,
    }
}

pub fn apply_point(g: &RigidTransform, p: &Vec3) -> Vec3 {
    g.rotation * p + g.translation
}

/// Rotation about +z by `theta`.
pub fn rot_z(theta: f64) -> Mat3 {
    let (s, c) = theta.sin_cos();
    Mat3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Error left after explaining a z-rotation of `points` by the best shared
/// translation: `Σ ‖(R_z(θ) − I)(pᵢ − p̄)‖²`.
pub fn translation_residual(points: &[Vec3], theta: f64) -> Result<f64, LieError> {
    if points.is_empty() {
        return Err(LieError::EmptyInput);
    }
    let centroid = points.iter().fold(Vec3::zeros(), |acc, p| acc + p) / points.len() as f64;
    let d = rot_z(theta) - Mat3::identity();
    Ok(points
        .iter()
        .map(|p| (d * (p - centroid)).norm_squared())
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn random_vec(rng: &mut ChaCha8Rng, scale: f64) -> Vec3 {
        Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ) * scale
    }

    fn with_norm(rng: &mut ChaCha8Rng, norm: f64) -> Vec3 {
        loop {
            let v = random_vec(rng, 1.0);
            if v.norm() > 1e-3 {
                return v.normalize() * norm;
            }
        }
    }

    /// Σₙ Mⁿ/n! truncated after `terms` terms.
    fn series4(m: &Matrix4<f64>, terms: usize) -> Matrix4<f64> {
        let mut acc = Matrix4::identity();
        let mut term = Matrix4::identity();
        for n in 1..terms {
            term = term * m / n as f64;
            acc += term;
        }
        acc
    }

    fn series3(m: &Mat3, terms: usize) -> Mat3 {
        let mut acc = Mat3::identity();
        let mut term = Mat3::identity();
        for n in 1..terms {
            term = term * m / n as f64;
            acc += term;
        }
        acc
    }

    #[test]
    fn hat_examples() {
        let m = hat(&Vec3::new(0.0, 0.0, 1.0));
        assert_eq!(m, Mat3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0));
        assert_eq!(hat(&Vec3::zeros()), Mat3::zeros());
    }

    #[test]
    fn hat_matches_cross_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let w = random_vec(&mut rng, 5.0);
            let p = random_vec(&mut rng, 5.0);
            let lhs = hat(&w) * p;
            let rhs = Vec3::new(
                w.y * p.z - w.z * p.y,
                w.z * p.x - w.x * p.z,
                w.x * p.y - w.y * p.x,
            );
            assert!((lhs - rhs).abs().max() <= 1e-15 * 25.0);
            assert_eq!(vee(&hat(&w)), w);
        }
    }

    #[test]
    fn exp_so3_examples() {
        assert_eq!(exp_so3(&Vec3::zeros()), Mat3::identity());
        let r = exp_so3(&Vec3::new(0.0, 0.0, PI / 2.0));
        let expected = Mat3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert!((r - expected).abs().max() < 1e-15);
        let r = exp_so3(&Vec3::new(0.0, 0.0, PI));
        assert!(
            (r - Mat3::from_diagonal(&Vec3::new(-1.0, -1.0, 1.0)))
                .abs()
                .max()
                < 1e-15
        );
    }

    #[test]
    fn exp_so3_matches_series() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let w = with_norm(&mut rng, 0.3);
            let oracle = series3(&hat(&w), 30);
            assert!((exp_so3(&w) - oracle).abs().max() < 1e-12);
        }
    }

    #[test]
    fn small_angle_branch_is_continuous() {
        let axis = Vec3::new(0.3, -0.5, 0.8).normalize();
        let below = exp_se3(&Twist::new(
            axis * (SMALL_ANGLE * 0.999),
            Vec3::new(1.0, 2.0, 3.0),
        ));
        let above = exp_se3(&Twist::new(
            axis * (SMALL_ANGLE * 1.001),
            Vec3::new(1.0, 2.0, 3.0),
        ));
        assert!(below.max_abs_diff(&above) < 1e-8);
    }

    #[test]
    fn log_so3_examples() {
        assert_eq!(log_so3(&Mat3::identity()).unwrap(), Vec3::zeros());
        let half = Mat3::from_diagonal(&Vec3::new(-1.0, -1.0, 1.0));
        let l = log_so3_flagged(&half).unwrap();
        assert!(l.near_pi);
        assert!((l.omega - Vec3::new(0.0, 0.0, PI)).norm() < 1e-12);
    }

    #[test]
    fn log_so3_rejects_non_rotation() {
        let m = Mat3::identity() * 1.1;
        assert!(matches!(log_so3(&m), Err(LieError::NotARotation { .. })));
        let reflect = Mat3::from_diagonal(&Vec3::new(1.0, 1.0, -1.0));
        assert!(matches!(
            log_so3(&reflect),
            Err(LieError::NotARotation { .. })
        ));
    }

    #[test]
    fn log_so3_round_trip_near_pi() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let gap = rng.random_range(1e-9..1e-3);
            let w = with_norm(&mut rng, PI - gap);
            let back = log_so3(&exp_so3(&w)).unwrap();
            assert!((exp_so3(&back) - exp_so3(&w)).abs().max() < 1e-9);
            assert!((back - w).abs().max() < 1e-6, "{w:?} {back:?}");
        }
    }

    #[test]
    fn exp_se3_examples() {
        let g = exp_se3(&Twist::new(Vec3::zeros(), Vec3::new(1.0, 2.0, 3.0)));
        assert_eq!(g.rotation, Mat3::identity());
        assert_eq!(g.translation, Vec3::new(1.0, 2.0, 3.0));
        assert_eq!(exp_se3(&Twist::zero()), RigidTransform::identity());
    }

    #[test]
    fn exp_se3_matches_series() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let xi = Twist::new(random_vec(&mut rng, 1.5), random_vec(&mut rng, 1.5));
            let oracle = series4(&xi.to_matrix(), 30);
            let g = exp_se3(&xi).to_matrix();
            assert!((g - oracle).abs().max() < 1e-12);
        }
    }

    #[test]
    fn log_se3_examples() {
        let id = log_se3(&RigidTransform::identity()).unwrap();
        assert_eq!(id, Twist::zero());
        let t = Vec3::new(0.5, -2.0, 7.0);
        let xi = log_se3(&RigidTransform::from_translation(t)).unwrap();
        assert_eq!(xi.omega, Vec3::zeros());
        assert!((xi.v - t).norm() < 1e-15);
    }

    #[test]
    fn log_se3_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let norm = rng.random_range(0.0..3.0);
            let xi = Twist::new(with_norm(&mut rng, norm), random_vec(&mut rng, 3.0));
            let g = exp_se3(&xi);
            let back = log_se3(&g).unwrap();
            assert!(exp_se3(&back).max_abs_diff(&g) < 1e-9);
            assert!(back.max_abs_diff(&xi) < 1e-9);
        }
    }

    #[test]
    fn compose_axioms() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..200 {
            let g = exp_se3(&Twist::new(
                random_vec(&mut rng, 2.0),
                random_vec(&mut rng, 2.0),
            ));
            assert!(compose(&g, &RigidTransform::identity()).max_abs_diff(&g) < 1e-15);
            assert!(compose(&g, &g.inverse()).max_abs_diff(&RigidTransform::identity()) < 1e-12);

            let h = exp_se3(&Twist::new(
                random_vec(&mut rng, 2.0),
                random_vec(&mut rng, 2.0),
            ));
            let k = exp_se3(&Twist::new(
                random_vec(&mut rng, 2.0),
                random_vec(&mut rng, 2.0),
            ));
            let left = compose(&compose(&g, &h), &k);
            let right = compose(&g, &compose(&h, &k));
            let oracle = g.to_matrix() * h.to_matrix() * k.to_matrix();
            assert!(left.max_abs_diff(&right) < 1e-12);
            assert!((left.to_matrix() - oracle).abs().max() < 1e-12);
        }
    }

    #[test]
    fn compose_reprojects_drifted_rotation() {
        let skewed = RigidTransform::new(Mat3::identity() * (1.0 + 1e-9), Vec3::zeros());
        let out = compose(&skewed, &RigidTransform::identity());
        assert!(out.orthonormality_error() < 1e-14);
    }

    #[test]
    fn apply_point_examples() {
        let p = Vec3::new(0.3, -1.0, 2.0);
        assert_eq!(apply_point(&RigidTransform::identity(), &p), p);
        let g = exp_se3(&Twist::new(Vec3::new(0.0, 0.0, PI / 2.0), Vec3::zeros()));
        let q = apply_point(&g, &Vec3::new(1.0, 0.0, 0.0));
        assert!((q - Vec3::new(0.0, 1.0, 0.0)).norm() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let g = exp_se3(&Twist::new(
                random_vec(&mut rng, 2.0),
                random_vec(&mut rng, 2.0),
            ));
            let p = random_vec(&mut rng, 3.0);
            let h = g.to_matrix() * nalgebra::Vector4::new(p.x, p.y, p.z, 1.0);
            assert!((apply_point(&g, &p) - h.xyz()).abs().max() < 1e-15 * 16.0);
        }
    }

    #[test]
    fn translation_residual_examples() {
        let pts = [Vec3::new(1.0, 0.0, 0.0), Vec3::new(-1.0, 0.0, 0.0)];
        assert_eq!(translation_residual(&pts, 0.0).unwrap(), 0.0);
        assert_eq!(translation_residual(&pts[..1], 1.2).unwrap(), 0.0);
        let r = translation_residual(&pts, PI / 2.0).unwrap();
        assert!((r - 4.0).abs() < 1e-12);
        assert_eq!(translation_residual(&[], 1.0), Err(LieError::EmptyInput));
    }

    #[test]
    fn translation_residual_matches_search() {
        // Grid search over t′ followed by coordinate refinement.
        let pts = [
            Vec3::new(0.4, 0.1, 0.0),
            Vec3::new(-0.7, 0.9, 0.3),
            Vec3::new(0.2, -0.5, -0.4),
        ];
        let theta = 0.8;
        let rz = rot_z(theta);
        let t = Vec3::new(0.1, -0.3, 0.2);
        let cost = |tp: &Vec3| -> f64 {
            pts.iter()
                .map(|p| (rz * p + t - (p + tp)).norm_squared())
                .sum()
        };
        let mut best = Vec3::zeros();
        let mut step = 0.5;
        while step > 1e-9 {
            let mut improved = true;
            while improved {
                improved = false;
                for axis in 0..3 {
                    for sign in [-1.0, 1.0] {
                        let mut cand = best;
                        cand[axis] += sign * step;
                        if cost(&cand) < cost(&best) {
                            best = cand;
                            improved = true;
                        }
                    }
                }
            }
            step *= 0.5;
        }
        let closed = translation_residual(&pts, theta).unwrap();
        assert!((cost(&best) - closed).abs() < 1e-12);
    }
}
