//! Quaternion algebra and Euler conversion.
//!
//! Conventions used throughout the crate:
//! - components ordered `(w, x, y, z)`, scalar first;
//! - `q` and `-q` denote the same rotation, comparisons are sign-agnostic;
//! - Euler angles are intrinsic Z-Y-X, reported as `(yaw, pitch, roll)`;
//!   near gimbal lock roll is set to 0 and yaw absorbs the remainder.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum KinematicsError {
    #[error("quaternion is not unit-norm (norm {norm})")]
    NonUnitQuaternion { norm: f64 },
    #[error("invalid skeleton tree: {0}")]
    InvalidTree(String),
    #[error("pose has {got} joints, skeleton has {expected}")]
    JointCountMismatch { got: usize, expected: usize },
    #[error("{path}:{line}: {detail}")]
    ParseError { path: String, line: usize, detail: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub const UNIT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quaternion {
    pub const IDENTITY: Quaternion = Quaternion { w: 1.0, x: 0.0, y: 0.0, z: 0.0 };

    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Quaternion { w, x, y, z }
    }

    pub fn from_axis_angle(axis: [f64; 3], angle: f64) -> Self {
        let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
        assert!(n > 0.0, "axis must be nonzero");
        let half = angle / 2.0;
        let s = half.sin() / n;
        Quaternion { w: half.cos(), x: axis[0] * s, y: axis[1] * s, z: axis[2] * s }
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn normalize(&self) -> Self {
        let n = self.norm();
        assert!(n > 0.0, "cannot normalize the zero quaternion");
        Quaternion { w: self.w / n, x: self.x / n, y: self.y / n, z: self.z / n }
    }

    pub fn conjugate(&self) -> Self {
        Quaternion { w: self.w, x: -self.x, y: -self.y, z: -self.z }
    }

    pub fn dot(&self, other: &Quaternion) -> f64 {
        self.w * other.w + self.x * other.x + self.y * other.y + self.z * other.z
    }

    /// Hamilton product `self ⊗ other`.
    pub fn multiply(&self, other: &Quaternion) -> Quaternion {
        let (aw, ax, ay, az) = (self.w, self.x, self.y, self.z);
        let (bw, bx, by, bz) = (other.w, other.x, other.y, other.z);
        Quaternion {
            w: aw * bw - ax * bx - ay * by - az * bz,
            x: aw * bx + ax * bw + ay * bz - az * by,
            y: aw * by - ax * bz + ay * bw + az * bx,
            z: aw * bz + ax * by - ay * bx + az * bw,
        }
    }

    /// Rotate `v` by this quaternion, which must be unit within 1e-6.
    pub fn rotate_vector(&self, v: [f64; 3]) -> Result<[f64; 3], KinematicsError> {
        let n = self.norm();
        if (n - 1.0).abs() > UNIT_TOLERANCE {
            return Err(KinematicsError::NonUnitQuaternion { norm: n });
        }
        Ok(self.rotate_vector_unchecked(v))
    }

    /// Rotation without the unit check, for internal chains where unitness
    /// is maintained by construction.
    pub(crate) fn rotate_vector_unchecked(&self, v: [f64; 3]) -> [f64; 3] {
        // v + 2w (u x v) + 2 u x (u x v)
        let u = [self.x, self.y, self.z];
        let t = [
            2.0 * (u[1] * v[2] - u[2] * v[1]),
            2.0 * (u[2] * v[0] - u[0] * v[2]),
            2.0 * (u[0] * v[1] - u[1] * v[0]),
        ];
        [
            v[0] + self.w * t[0] + u[1] * t[2] - u[2] * t[1],
            v[1] + self.w * t[1] + u[2] * t[0] - u[0] * t[2],
            v[2] + self.w * t[2] + u[0] * t[1] - u[1] * t[0],
        ]
    }

    /// Intrinsic Z-Y-X decomposition as `(yaw, pitch, roll)` radians.
    pub fn to_euler(&self) -> [f64; 3] {
        let q = self.normalize();
        let (w, x, y, z) = (q.w, q.x, q.y, q.z);
        let sin_pitch = 2.0 * (w * y - x * z);
        if sin_pitch.abs() > 1.0 - 1e-7 {
            // Gimbal lock: pitch at +-pi/2, roll pinned to 0, yaw absorbs.
            let pitch = std::f64::consts::FRAC_PI_2.copysign(sin_pitch);
            let r01 = 2.0 * (x * y - w * z);
            let r02 = 2.0 * (x * z + w * y);
            let yaw = if sin_pitch > 0.0 { (-r01).atan2(r02) } else { (-r01).atan2(-r02) };
            [yaw, pitch, 0.0]
        } else {
            let yaw = (2.0 * (x * y + w * z)).atan2(1.0 - 2.0 * (y * y + z * z));
            let pitch = sin_pitch.asin();
            let roll = (2.0 * (y * z + w * x)).atan2(1.0 - 2.0 * (x * x + y * y));
            [yaw, pitch, roll]
        }
    }

    /// Compose from intrinsic Z-Y-X Euler angles `(yaw, pitch, roll)`.
    pub fn from_euler(yaw: f64, pitch: f64, roll: f64) -> Self {
        let qz = Quaternion::from_axis_angle([0.0, 0.0, 1.0], yaw);
        let qy = Quaternion::from_axis_angle([0.0, 1.0, 0.0], pitch);
        let qx = Quaternion::from_axis_angle([1.0, 0.0, 0.0], roll);
        qz.multiply(&qy).multiply(&qx)
    }

    /// True when `self` and `other` denote the same rotation within `tol`
    /// per component, ignoring the overall sign.
    pub fn same_rotation(&self, other: &Quaternion, tol: f64) -> bool {
        let s = if self.dot(other) >= 0.0 { 1.0 } else { -1.0 };
        (self.w - s * other.w).abs() <= tol
            && (self.x - s * other.x).abs() <= tol
            && (self.y - s * other.y).abs() <= tol
            && (self.z - s * other.z).abs() <= tol
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{substream, Stream};
    use rand::Rng;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn random_unit(rng: &mut impl Rng) -> Quaternion {
        loop {
            let q = Quaternion::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            if q.norm() > 1e-3 {
                return q.normalize();
            }
        }
    }

    #[test]
    fn identity_is_neutral() {
        let q = Quaternion::from_axis_angle([0.3, -0.4, 0.86], 1.234).normalize();
        let p = Quaternion::IDENTITY.multiply(&q);
        assert!(p.same_rotation(&q, 1e-15));
    }

    #[test]
    fn two_quarter_turns_make_a_half_turn() {
        let q90 = Quaternion::from_axis_angle([0.0, 0.0, 1.0], FRAC_PI_2);
        let q180 = q90.multiply(&q90);
        // 180 degrees about z is (0, 0, 0, 1)
        assert!(q180.same_rotation(&Quaternion::new(0.0, 0.0, 0.0, 1.0), 1e-12));
    }

    #[test]
    fn product_of_units_is_unit() {
        let mut rng = substream(3, Stream::Eval, 0);
        for _ in 0..200 {
            let (a, b) = (random_unit(&mut rng), random_unit(&mut rng));
            assert!((a.multiply(&b).norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rotate_identity_is_noop() {
        let v = Quaternion::IDENTITY.rotate_vector([1.0, 2.0, 3.0]).unwrap();
        assert_eq!(v, [1.0, 2.0, 3.0]);
    }

    #[test]
    fn rotate_quarter_turn_about_z() {
        let q = Quaternion::from_axis_angle([0.0, 0.0, 1.0], FRAC_PI_2);
        let v = q.rotate_vector([1.0, 0.0, 0.0]).unwrap();
        assert!(v[0].abs() < 1e-12 && (v[1] - 1.0).abs() < 1e-12 && v[2].abs() < 1e-12);
    }

    #[test]
    fn rotation_preserves_length() {
        let mut rng = substream(4, Stream::Eval, 0);
        for _ in 0..200 {
            let q = random_unit(&mut rng);
            let v = [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
            let r = q.rotate_vector(v).unwrap();
            let lv: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let lr: f64 = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((lv - lr).abs() < 1e-12);
        }
    }

    #[test]
    fn non_unit_rotation_is_rejected() {
        let q = Quaternion::new(2.0, 0.0, 0.0, 0.0);
        assert!(matches!(
            q.rotate_vector([1.0, 0.0, 0.0]),
            Err(KinematicsError::NonUnitQuaternion { .. })
        ));
    }

    /// Rotation-matrix oracle: rotate_vector must agree with R(q) v.
    #[test]
    fn matrix_oracle_agrees() {
        fn matrix(q: &Quaternion) -> [[f64; 3]; 3] {
            let (w, x, y, z) = (q.w, q.x, q.y, q.z);
            [
                [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
                [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
                [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
            ]
        }
        let mut rng = substream(5, Stream::Eval, 0);
        for _ in 0..300 {
            let q = random_unit(&mut rng);
            let v = [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
            let got = q.rotate_vector(v).unwrap();
            let m = matrix(&q);
            for i in 0..3 {
                let want = m[i][0] * v[0] + m[i][1] * v[1] + m[i][2] * v[2];
                assert!((got[i] - want).abs() < 1e-12, "component {i}: {got:?} vs matrix");
            }
        }
    }

    #[test]
    fn euler_identity_and_quarter_turn() {
        assert_eq!(Quaternion::IDENTITY.to_euler(), [0.0, 0.0, 0.0]);
        let q = Quaternion::from_axis_angle([0.0, 0.0, 1.0], FRAC_PI_2);
        let e = q.to_euler();
        assert!((e[0] - FRAC_PI_2).abs() < 1e-12 && e[1].abs() < 1e-12 && e[2].abs() < 1e-12);
    }

    #[test]
    fn euler_round_trip_away_from_lock() {
        let mut rng = substream(6, Stream::Eval, 0);
        let mut worst: f64 = 0.0;
        let mut n = 0;
        while n < 500 {
            let yaw = rng.gen_range(-PI..PI);
            let pitch = rng.gen_range(-FRAC_PI_2 + 1.1e-3..FRAC_PI_2 - 1.1e-3);
            let roll = rng.gen_range(-PI..PI);
            let q = Quaternion::from_euler(yaw, pitch, roll);
            let e = q.to_euler();
            worst = worst
                .max((e[0] - yaw).abs())
                .max((e[1] - pitch).abs())
                .max((e[2] - roll).abs());
            n += 1;
        }
        assert!(worst < 1e-9, "round-trip worst error {worst}");
    }

    #[test]
    fn gimbal_lock_convention() {
        // Straight-up pitch: roll must come back 0, rotation preserved.
        let q = Quaternion::from_euler(0.7, FRAC_PI_2, 0.4);
        let e = q.to_euler();
        assert_eq!(e[2], 0.0);
        let q2 = Quaternion::from_euler(e[0], e[1], e[2]);
        assert!(q.same_rotation(&q2, 1e-9), "{e:?}");
    }
}
