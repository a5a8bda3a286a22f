//! Rotation and angle arithmetic shared by the estimator, losses and simulator.
//!
//! # Conventions
//!
//! - Head pose is `(alpha, beta, gamma)` = (yaw, pitch, roll) in radians.
//! - `R = Rz(gamma) * Rx(beta) * Ry(alpha)` maps head coordinates to camera
//!   coordinates, so a camera-space gaze `g` becomes `R^T g` in the head frame.
//! - With this ordering the third row of `R` is
//!   `(-sin(alpha) cos(beta), sin(beta), cos(alpha) cos(beta))`, which does not
//!   depend on roll. Both the head angle and the rig constant only read that row.

use std::f64::consts::PI;
use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

/// Clamp margin for `arccos` arguments.
pub const ACOS_EPS: f64 = 1e-7;

/// Tolerance used when validating rotation matrices and unit vectors.
pub const ORTHO_TOL: f64 = 1e-9;

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    // rem_euclid maps -pi to pi already; keep the half-open interval.
    if w <= -PI {
        w += 2.0 * PI;
    }
    w
}

/// `arccos` with the argument clamped to `[-1 + ACOS_EPS, 1 - ACOS_EPS]`.
pub fn clamped_acos(c: f64) -> f64 {
    c.clamp(-1.0 + ACOS_EPS, 1.0 - ACOS_EPS).acos()
}

/// Derivative of [`clamped_acos`] with respect to its argument (zero in the
/// clamped region).
pub fn clamped_acos_grad(c: f64) -> f64 {
    if c <= -1.0 + ACOS_EPS || c >= 1.0 - ACOS_EPS {
        0.0
    } else {
        -1.0 / (1.0 - c * c).sqrt()
    }
}

/// Plain 3-vector.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec3(pub [f64; 3]);

impl Vec3 {
    pub const ZERO: Vec3 = Vec3([0.0; 3]);
    pub const X: Vec3 = Vec3([1.0, 0.0, 0.0]);
    pub const Y: Vec3 = Vec3([0.0, 1.0, 0.0]);
    pub const Z: Vec3 = Vec3([0.0, 0.0, 1.0]);

    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3([x, y, z])
    }

    pub fn dot(&self, o: &Vec3) -> f64 {
        self.0[0] * o.0[0] + self.0[1] * o.0[1] + self.0[2] * o.0[2]
    }

    pub fn cross(&self, o: &Vec3) -> Vec3 {
        let [a0, a1, a2] = self.0;
        let [b0, b1, b2] = o.0;
        Vec3([a1 * b2 - a2 * b1, a2 * b0 - a0 * b2, a0 * b1 - a1 * b0])
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn scale(&self, s: f64) -> Vec3 {
        Vec3([self.0[0] * s, self.0[1] * s, self.0[2] * s])
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// Normalizes the vector, or returns `None` when its norm is below `min_norm`.
    pub fn try_normalize(&self, min_norm: f64) -> Option<UnitVec3> {
        let n = self.norm();
        if n < min_norm || !n.is_finite() {
            None
        } else {
            Some(UnitVec3(self.scale(1.0 / n)))
        }
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3([self.0[0] + o.0[0], self.0[1] + o.0[1], self.0[2] + o.0[2]])
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3([self.0[0] - o.0[0], self.0[1] - o.0[1], self.0[2] - o.0[2]])
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        self.scale(-1.0)
    }
}

/// Unit-norm 3-vector (gaze direction).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UnitVec3(Vec3);

impl UnitVec3 {
    pub const Z: UnitVec3 = UnitVec3(Vec3::Z);

    /// Normalizes `v`. Returns `None` for (near-)zero or non-finite input.
    pub fn new(v: Vec3) -> Option<Self> {
        v.try_normalize(1e-12)
    }

    /// Wraps a vector the caller knows to be unit length.
    pub fn new_unchecked(v: Vec3) -> Self {
        UnitVec3(v)
    }

    pub fn vec(&self) -> Vec3 {
        self.0
    }

    pub fn as_array(&self) -> [f64; 3] {
        self.0 .0
    }

    pub fn dot(&self, o: &UnitVec3) -> f64 {
        self.0.dot(&o.0)
    }
}

/// Head pose as yaw/pitch/roll in radians.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EulerPose {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl EulerPose {
    pub fn new(alpha: f64, beta: f64, gamma: f64) -> Self {
        EulerPose { alpha, beta, gamma }
    }

    /// Same pose with every angle wrapped into `(-pi, pi]`.
    pub fn wrapped(&self) -> Self {
        EulerPose::new(
            wrap_angle(self.alpha),
            wrap_angle(self.beta),
            wrap_angle(self.gamma),
        )
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.alpha, self.beta, self.gamma]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        EulerPose::new(a[0], a[1], a[2])
    }

    pub fn without_roll(&self) -> Self {
        EulerPose::new(self.alpha, self.beta, 0.0)
    }
}

/// Row-major 3x3 matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mat3(pub [[f64; 3]; 3]);

impl Mat3 {
    pub const IDENTITY: Mat3 = Mat3([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);

    pub fn from_rows(r0: Vec3, r1: Vec3, r2: Vec3) -> Mat3 {
        Mat3([r0.0, r1.0, r2.0])
    }

    pub fn row(&self, i: usize) -> Vec3 {
        Vec3(self.0[i])
    }

    pub fn col(&self, j: usize) -> Vec3 {
        Vec3([self.0[0][j], self.0[1][j], self.0[2][j]])
    }

    pub fn transpose(&self) -> Mat3 {
        let m = &self.0;
        Mat3([
            [m[0][0], m[1][0], m[2][0]],
            [m[0][1], m[1][1], m[2][1]],
            [m[0][2], m[1][2], m[2][2]],
        ])
    }

    pub fn mul_vec(&self, v: &Vec3) -> Vec3 {
        Vec3([self.row(0).dot(v), self.row(1).dot(v), self.row(2).dot(v)])
    }

    /// `self^T * v` without materializing the transpose.
    pub fn tr_mul_vec(&self, v: &Vec3) -> Vec3 {
        let m = &self.0;
        Vec3([
            m[0][0] * v.0[0] + m[1][0] * v.0[1] + m[2][0] * v.0[2],
            m[0][1] * v.0[0] + m[1][1] * v.0[1] + m[2][1] * v.0[2],
            m[0][2] * v.0[0] + m[1][2] * v.0[1] + m[2][2] * v.0[2],
        ])
    }

    pub fn det(&self) -> f64 {
        self.row(0).dot(&self.row(1).cross(&self.row(2)))
    }

    /// Largest absolute entry of `M^T M - I`.
    pub fn orthonormality_error(&self) -> f64 {
        let p = self.transpose() * *self;
        let mut worst = 0.0_f64;
        for i in 0..3 {
            for j in 0..3 {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((p.0[i][j] - target).abs());
            }
        }
        worst
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, o: &Mat3) -> f64 {
        self.0
            .iter()
            .flatten()
            .zip(o.0.iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn to_flat(&self) -> [f64; 9] {
        let m = &self.0;
        [
            m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1], m[2][2],
        ]
    }

    pub fn from_flat(f: [f64; 9]) -> Mat3 {
        Mat3([[f[0], f[1], f[2]], [f[3], f[4], f[5]], [f[6], f[7], f[8]]])
    }
}

impl Mul for Mat3 {
    type Output = Mat3;
    fn mul(self, o: Mat3) -> Mat3 {
        let mut out = [[0.0; 3]; 3];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = self.0[i][0] * o.0[0][j] + self.0[i][1] * o.0[1][j] + self.0[i][2] * o.0[2][j];
            }
        }
        Mat3(out)
    }
}

/// A matrix known to be a proper rotation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Mat3", into = "Mat3")]
pub struct Rotation(Mat3);

/// Returned when a matrix fails the rotation invariants.
#[derive(Debug, Clone, Copy, PartialEq, thiserror::Error)]
#[error("matrix is not a proper rotation (orthonormality error {ortho:e}, det {det})")]
pub struct NotARotation {
    pub ortho: f64,
    pub det: f64,
}

impl TryFrom<Mat3> for Rotation {
    type Error = NotARotation;

    fn try_from(m: Mat3) -> Result<Self, Self::Error> {
        let ortho = m.orthonormality_error();
        let det = m.det();
        if m.is_finite() && ortho < ORTHO_TOL && (det - 1.0).abs() < ORTHO_TOL {
            Ok(Rotation(m))
        } else {
            Err(NotARotation { ortho, det })
        }
    }
}

impl From<Rotation> for Mat3 {
    fn from(r: Rotation) -> Mat3 {
        r.0
    }
}

impl Rotation {
    pub const IDENTITY: Rotation = Rotation(Mat3::IDENTITY);

    pub fn matrix(&self) -> &Mat3 {
        &self.0
    }

    pub fn transpose(&self) -> Rotation {
        Rotation(self.0.transpose())
    }

    pub fn compose(&self, o: &Rotation) -> Rotation {
        Rotation(self.0 * o.0)
    }

    pub fn apply(&self, v: &Vec3) -> Vec3 {
        self.0.mul_vec(v)
    }

    pub fn apply_unit(&self, v: &UnitVec3) -> UnitVec3 {
        UnitVec3(self.0.mul_vec(&v.vec()))
    }

    /// Rotation about the x axis.
    pub fn about_x(t: f64) -> Rotation {
        let (s, c) = t.sin_cos();
        Rotation(Mat3([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]]))
    }

    /// Rotation about the y axis.
    pub fn about_y(t: f64) -> Rotation {
        let (s, c) = t.sin_cos();
        Rotation(Mat3([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]))
    }

    /// Rotation about the z axis.
    pub fn about_z(t: f64) -> Rotation {
        let (s, c) = t.sin_cos();
        Rotation(Mat3([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]))
    }

    /// Rotation by `angle` about an arbitrary axis (Rodrigues).
    pub fn about_axis(axis: &UnitVec3, angle: f64) -> Rotation {
        let [x, y, z] = axis.as_array();
        let (s, c) = angle.sin_cos();
        let t = 1.0 - c;
        Rotation(Mat3([
            [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
            [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
            [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
        ]))
    }

    /// Angle of the relative rotation `self^T * o`.
    pub fn angle_to(&self, o: &Rotation) -> f64 {
        let rel = self.0.transpose() * o.0;
        let tr = rel.0[0][0] + rel.0[1][1] + rel.0[2][2];
        ((tr - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
    }
}

/// `Rz(gamma) * Rx(beta) * Ry(alpha)`.
pub fn rotation_from_euler(p: &EulerPose) -> Rotation {
    let rz = Rotation::about_z(p.gamma);
    let rx = Rotation::about_x(p.beta);
    let ry = Rotation::about_y(p.alpha);
    Rotation(rz.0 * rx.0 * ry.0)
}

/// Partial derivatives of [`rotation_from_euler`] with respect to
/// `alpha`, `beta` and `gamma`, in that order.
pub fn rotation_euler_partials(p: &EulerPose) -> [Mat3; 3] {
    let (sa, ca) = p.alpha.sin_cos();
    let (sb, cb) = p.beta.sin_cos();
    let (sg, cg) = p.gamma.sin_cos();
    let rz = Mat3([[cg, -sg, 0.0], [sg, cg, 0.0], [0.0, 0.0, 1.0]]);
    let rx = Mat3([[1.0, 0.0, 0.0], [0.0, cb, -sb], [0.0, sb, cb]]);
    let ry = Mat3([[ca, 0.0, sa], [0.0, 1.0, 0.0], [-sa, 0.0, ca]]);
    let drz = Mat3([[-sg, -cg, 0.0], [cg, -sg, 0.0], [0.0, 0.0, 0.0]]);
    let drx = Mat3([[0.0, 0.0, 0.0], [0.0, -sb, -cb], [0.0, cb, -sb]]);
    let dry = Mat3([[-sa, 0.0, ca], [0.0, 0.0, 0.0], [-ca, 0.0, -sa]]);
    [rz * rx * dry, rz * drx * ry, drz * rx * ry]
}

/// Inverse of [`rotation_from_euler`]. Returns `None` at gimbal lock
/// (`|cos(beta)| < 1e-9`).
pub fn euler_from_rotation(r: &Rotation) -> Option<EulerPose> {
    let m = &r.0 .0;
    let sb = m[2][1].clamp(-1.0, 1.0);
    let beta = sb.asin();
    if beta.cos().abs() < 1e-9 {
        return None;
    }
    let alpha = (-m[2][0]).atan2(m[2][2]);
    let gamma = (-m[0][1]).atan2(m[1][1]);
    Some(EulerPose::new(alpha, beta, gamma))
}

/// Angle between two unit vectors, exact at 0 and pi. Not used for gradients;
/// the losses go through [`clamped_acos`].
pub fn angle_between(a: &UnitVec3, b: &UnitVec3) -> f64 {
    a.vec().cross(&b.vec()).norm().atan2(a.dot(b))
}

/// Angle between the head z axis and the camera z axis. Roll has no effect.
pub fn head_angle(p: &EulerPose) -> f64 {
    let (sa, ca) = p.alpha.sin_cos();
    let (sb, cb) = p.beta.sin_cos();
    // |e3 x R e3| and e3 . R e3, neither involves roll
    (sa * sa + ca * ca * sb * sb).sqrt().atan2(ca * cb)
}

/// Element (3,3) of `R(p1) * R(p2)^T`, expanded in closed form.
pub fn rig_constant(p1: &EulerPose, p2: &EulerPose) -> f64 {
    let (sa1, ca1) = p1.alpha.sin_cos();
    let (sb1, cb1) = p1.beta.sin_cos();
    let (sa2, ca2) = p2.alpha.sin_cos();
    let (sb2, cb2) = p2.beta.sin_cos();
    sb1 * sb2 + sa1 * sa2 * cb1 * cb2 + ca1 * ca2 * cb1 * cb2
}

/// Maps a camera-space vector into the head frame: `R^T g`.
pub fn to_head_cs(r: &Rotation, g: &UnitVec3) -> UnitVec3 {
    UnitVec3(r.0.tr_mul_vec(&g.vec()))
}

/// Rotational part of the image-normalization warp for one view. Maps
/// original camera coordinates to normalized camera coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NormalizationTransform {
    pub w: Rotation,
}

impl NormalizationTransform {
    pub const IDENTITY: NormalizationTransform = NormalizationTransform {
        w: Rotation::IDENTITY,
    };

    pub fn new(w: Rotation) -> Self {
        NormalizationTransform { w }
    }
}

/// Undoes the normalization on a head rotation: `W^-1 R = W^T R`.
pub fn denormalize(w: &NormalizationTransform, r: &Rotation) -> Rotation {
    w.w.transpose().compose(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pose(rng: &mut impl Rng) -> EulerPose {
        EulerPose::new(
            rng.random_range(-PI..PI),
            rng.random_range(-PI..PI),
            rng.random_range(-PI..PI),
        )
    }

    fn random_unit(rng: &mut impl Rng) -> UnitVec3 {
        loop {
            let v = Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            if let Some(u) = v.try_normalize(0.1) {
                return u;
            }
        }
    }

    #[test]
    fn zero_pose_is_identity() {
        let r = rotation_from_euler(&EulerPose::default());
        assert_eq!(r.matrix().max_abs_diff(&Mat3::IDENTITY), 0.0);
    }

    #[test]
    fn quarter_yaw_third_row() {
        let r = rotation_from_euler(&EulerPose::new(PI / 2.0, 0.0, 0.0));
        let row = r.matrix().row(2);
        assert!((row.0[0] + 1.0).abs() < 1e-15);
        assert!(row.0[1].abs() < 1e-15);
        assert!(row.0[2].abs() < 1e-15);
    }

    #[test]
    fn third_row_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let p = random_pose(&mut rng);
            let row = rotation_from_euler(&p).matrix().row(2);
            let expect = [
                -p.alpha.sin() * p.beta.cos(),
                p.beta.sin(),
                p.alpha.cos() * p.beta.cos(),
            ];
            for k in 0..3 {
                assert!((row.0[k] - expect[k]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn random_rotations_are_proper() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10_000 {
            let m = *rotation_from_euler(&random_pose(&mut rng)).matrix();
            assert!(m.orthonormality_error() < 1e-12);
            assert!((m.det() - 1.0).abs() < 1e-12);
            assert!(Rotation::try_from(m).is_ok());
        }
    }

    #[test]
    fn rejects_non_rotation() {
        let mut m = Mat3::IDENTITY;
        m.0[2][2] = -1.0;
        assert!(Rotation::try_from(m).is_err());
        m.0[2][2] = 1.01;
        assert!(Rotation::try_from(m).is_err());
    }

    #[test]
    fn angle_between_cases() {
        let x = UnitVec3::new(Vec3::X).unwrap();
        let y = UnitVec3::new(Vec3::Y).unwrap();
        let nx = UnitVec3::new(-Vec3::X).unwrap();
        assert_eq!(angle_between(&x, &x), 0.0);
        assert!((angle_between(&x, &y) - PI / 2.0).abs() < 1e-15);
        assert_eq!(angle_between(&x, &nx), PI);
    }

    #[test]
    fn angle_between_symmetric_and_triangle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..2000 {
            let a = random_unit(&mut rng);
            let b = random_unit(&mut rng);
            let c = random_unit(&mut rng);
            assert!((angle_between(&a, &b) - angle_between(&b, &a)).abs() < 1e-15);
            let ab = angle_between(&a, &b);
            let bc = angle_between(&b, &c);
            let ac = angle_between(&a, &c);
            assert!(ac <= ab + bc + 1e-9);
        }
    }

    #[test]
    fn head_angle_cases() {
        assert_eq!(head_angle(&EulerPose::new(0.0, 0.0, 1.3)), 0.0);
        assert!((head_angle(&EulerPose::new(PI / 2.0, 0.0, 0.0)) - PI / 2.0).abs() < 1e-12);
        assert!((head_angle(&EulerPose::new(0.5236, 0.0, 0.0)) - 0.5236).abs() < 1e-12);
    }

    #[test]
    fn head_angle_ignores_roll() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..1000 {
            let p = random_pose(&mut rng);
            let q = EulerPose::new(p.alpha, p.beta, rng.random_range(-PI..PI));
            assert_eq!(head_angle(&p), head_angle(&q));
            let closed = clamped_acos(p.alpha.cos() * p.beta.cos());
            assert!((head_angle(&p) - closed).abs() < 1e-12);
        }
    }

    #[test]
    fn rig_constant_cases() {
        let z = EulerPose::default();
        assert_eq!(rig_constant(&z, &z), 1.0);
        let q = EulerPose::new(PI / 2.0, 0.0, 0.0);
        assert!(rig_constant(&z, &q).abs() < 1e-15);
    }

    #[test]
    fn rig_constant_matches_matrix_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..10_000 {
            let p1 = random_pose(&mut rng);
            let p2 = random_pose(&mut rng);
            let m = *rotation_from_euler(&p1).matrix() * rotation_from_euler(&p2).matrix().transpose();
            assert!((rig_constant(&p1, &p2) - m.0[2][2]).abs() < 1e-12);
            assert!((rig_constant(&p1, &p2) - rig_constant(&p2, &p1)).abs() < 1e-15);
            assert!((rig_constant(&p1, &p1) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn to_head_cs_inverts_forward() {
        assert_eq!(to_head_cs(&Rotation::IDENTITY, &UnitVec3::Z), UnitVec3::Z);
        let r = rotation_from_euler(&EulerPose::new(PI / 2.0, 0.0, 0.0));
        let g = r.apply_unit(&UnitVec3::Z);
        let back = to_head_cs(&r, &g);
        assert!((back.vec() - Vec3::Z).norm() < 1e-15);
    }

    #[test]
    fn to_head_cs_preserves_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        for _ in 0..1000 {
            let r = rotation_from_euler(&random_pose(&mut rng));
            let g = random_unit(&mut rng);
            assert!((to_head_cs(&r, &g).vec().norm() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn denormalize_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let r = rotation_from_euler(&random_pose(&mut rng));
        let same = denormalize(&NormalizationTransform::IDENTITY, &r);
        assert_eq!(same.matrix().max_abs_diff(r.matrix()), 0.0);
        let id = denormalize(&NormalizationTransform::new(r), &r);
        assert!(id.matrix().max_abs_diff(&Mat3::IDENTITY) < 1e-15);
        for _ in 0..1000 {
            let w = NormalizationTransform::new(rotation_from_euler(&random_pose(&mut rng)));
            let r = rotation_from_euler(&random_pose(&mut rng));
            let back = w.w.compose(&denormalize(&w, &r));
            assert!(back.matrix().max_abs_diff(r.matrix()) < 1e-12);
        }
    }

    #[test]
    fn euler_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        for _ in 0..1000 {
            let p = EulerPose::new(
                rng.random_range(-PI..PI),
                rng.random_range(-1.5..1.5),
                rng.random_range(-PI..PI),
            );
            let back = euler_from_rotation(&rotation_from_euler(&p)).unwrap();
            assert!((wrap_angle(back.alpha - p.alpha)).abs() < 1e-9);
            assert!((back.beta - p.beta).abs() < 1e-9);
            assert!((wrap_angle(back.gamma - p.gamma)).abs() < 1e-9);
        }
        let lock = rotation_from_euler(&EulerPose::new(0.3, PI / 2.0, 0.1));
        assert!(euler_from_rotation(&lock).is_none());
    }

    #[test]
    fn partials_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let h = 1e-6;
        for _ in 0..200 {
            let p = random_pose(&mut rng);
            let d = rotation_euler_partials(&p);
            for k in 0..3 {
                let mut plus = p.as_array();
                let mut minus = p.as_array();
                plus[k] += h;
                minus[k] -= h;
                let rp = *rotation_from_euler(&EulerPose::from_array(plus)).matrix();
                let rm = *rotation_from_euler(&EulerPose::from_array(minus)).matrix();
                for i in 0..3 {
                    for j in 0..3 {
                        let fd = (rp.0[i][j] - rm.0[i][j]) / (2.0 * h);
                        assert!((fd - d[k].0[i][j]).abs() < 1e-8);
                    }
                }
            }
        }
    }

    #[test]
    fn wrap_angle_range() {
        assert_eq!(wrap_angle(PI), PI);
        assert_eq!(wrap_angle(-PI), PI);
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-15);
        assert!((wrap_angle(PI - 0.01 - (-PI + 0.01)) + 0.02).abs() < 1e-12);
    }
}
