//! Rigid-body algebra on SE(3).
//!
//! Rotations are unit quaternions stored as `(w, x, y, z)` and always kept in
//! the canonical hemisphere (`w >= 0`, ties at `w == 0` broken by making the
//! first nonzero vector component positive). Tangent vectors are [`Twist`]s
//! ordered `[rotation | translation]`; every Jacobian and information matrix in
//! the crate uses that ordering.

use std::fmt;
use std::ops::Mul;

use nalgebra::{Matrix3, Matrix4, Matrix6, Quaternion, Vector3, Vector6};

use crate::error::{Error, Result};

/// Below this rotation angle (rad) the closed forms switch to Taylor expansions.
pub const SMALL_ANGLE: f64 = 1e-6;

/// Threshold for the higher-order coupling terms of the SE(3) Jacobian, whose
/// closed forms cancel catastrophically well above `SMALL_ANGLE`.
const JACOBIAN_SERIES_ANGLE: f64 = 1e-2;

#[derive(Clone, Copy, PartialEq)]
pub struct UnitQuaternion {
    w: f64,
    x: f64,
    y: f64,
    z: f64,
}

impl fmt::Debug for UnitQuaternion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "q({}, {}, {}, {})", self.w, self.x, self.y, self.z)
    }
}

impl Default for UnitQuaternion {
    fn default() -> Self {
        Self::identity()
    }
}

/// Normalizes `q` to unit length and maps it into the canonical hemisphere.
///
/// `q` and `-q` produce bit-identical results.
pub fn quat_normalize_hemisphere(q: &Quaternion<f64>) -> Result<UnitQuaternion> {
    UnitQuaternion::from_wxyz(q.w, q.i, q.j, q.k)
}

impl UnitQuaternion {
    pub const fn identity() -> Self {
        Self {
            w: 1.0,
            x: 0.0,
            y: 0.0,
            z: 0.0,
        }
    }

    /// Builds a canonical unit quaternion from raw components.
    pub fn from_wxyz(w: f64, x: f64, y: f64, z: f64) -> Result<Self> {
        let norm_sq = w * w + x * x + y * y + z * z;
        if !norm_sq.is_finite() || norm_sq == 0.0 {
            return Err(Error::invalid(format!(
                "quaternion ({w}, {x}, {y}, {z}) has no valid norm"
            )));
        }
        Ok(Self::canonical(w, x, y, z))
    }

    /// Sign flip happens before the division so that `q` and `-q` take exactly
    /// the same arithmetic path. Adding `0.0` clears negative zeros. Inputs
    /// already unit to within a few ulps are left undivided, which makes the
    /// map idempotent (text round-trips reproduce the same bits).
    fn canonical(w: f64, x: f64, y: f64, z: f64) -> Self {
        let flip = if w != 0.0 {
            w < 0.0
        } else if x != 0.0 {
            x < 0.0
        } else if y != 0.0 {
            y < 0.0
        } else {
            z < 0.0
        };
        let (w, x, y, z) = if flip { (-w, -x, -y, -z) } else { (w, x, y, z) };
        let norm_sq = w * w + x * x + y * y + z * z;
        let norm = if (norm_sq - 1.0).abs() <= 4.0 * f64::EPSILON {
            1.0
        } else {
            norm_sq.sqrt()
        };
        Self {
            w: w / norm + 0.0,
            x: x / norm + 0.0,
            y: y / norm + 0.0,
            z: z / norm + 0.0,
        }
    }

    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Self {
        let axis = axis.normalize();
        Self::exp(&(axis * angle))
    }

    /// SO(3) exponential of a rotation vector.
    pub fn exp(phi: &Vector3<f64>) -> Self {
        let theta = phi.norm();
        let half = 0.5 * theta;
        let s = if theta < SMALL_ANGLE {
            0.5 - theta * theta / 48.0
        } else {
            half.sin() / theta
        };
        Self::canonical(half.cos(), s * phi.x, s * phi.y, s * phi.z)
    }

    /// SO(3) logarithm; the returned angle lies in `[0, pi]`.
    pub fn log(&self) -> Vector3<f64> {
        let v = self.vector();
        let n = v.norm();
        let w = self.w;
        // canonical form guarantees w >= 0, so atan2 gives half-angles in [0, pi/2]
        let theta = 2.0 * n.atan2(w);
        let k = if theta < SMALL_ANGLE {
            2.0 / w * (1.0 - n * n / (3.0 * w * w))
        } else {
            theta / n
        };
        v * k
    }

    pub fn w(&self) -> f64 {
        self.w
    }
    pub fn x(&self) -> f64 {
        self.x
    }
    pub fn y(&self) -> f64 {
        self.y
    }
    pub fn z(&self) -> f64 {
        self.z
    }

    pub fn wxyz(&self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn vector(&self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }

    pub fn as_nalgebra(&self) -> Quaternion<f64> {
        Quaternion::new(self.w, self.x, self.y, self.z)
    }

    pub fn inverse(&self) -> Self {
        Self::canonical(self.w, -self.x, -self.y, -self.z)
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.w * other.w + self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn angle(&self) -> f64 {
        2.0 * self.vector().norm().atan2(self.w.abs())
    }

    pub fn rotate(&self, p: &Vector3<f64>) -> Vector3<f64> {
        let u = self.vector();
        let t = 2.0 * u.cross(p);
        p + self.w * t + u.cross(&t)
    }

    pub fn to_rotation_matrix(&self) -> Matrix3<f64> {
        let (w, x, y, z) = (self.w, self.x, self.y, self.z);
        Matrix3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        )
    }
}

impl Mul for UnitQuaternion {
    type Output = UnitQuaternion;

    fn mul(self, b: UnitQuaternion) -> UnitQuaternion {
        let a = self;
        UnitQuaternion::canonical(
            a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
        )
    }
}

/// Tangent vector of SE(3): `[rotation (rad) | translation (m)]`.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Twist(pub Vector6<f64>);

impl Twist {
    pub fn zero() -> Self {
        Twist(Vector6::zeros())
    }

    pub fn new(rotation: Vector3<f64>, translation: Vector3<f64>) -> Self {
        Twist(Vector6::new(
            rotation.x,
            rotation.y,
            rotation.z,
            translation.x,
            translation.y,
            translation.z,
        ))
    }

    pub fn from_slice(v: &[f64; 6]) -> Self {
        Twist(Vector6::from_column_slice(v))
    }

    pub fn rotation(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(3).into_owned()
    }

    pub fn norm(&self) -> f64 {
        self.0.norm()
    }

    pub fn as_vector(&self) -> &Vector6<f64> {
        &self.0
    }
}

impl From<Vector6<f64>> for Twist {
    fn from(v: Vector6<f64>) -> Self {
        Twist(v)
    }
}

/// Rigid transform mapping `p` to `R p + t`.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Pose3 {
    pub rotation: UnitQuaternion,
    pub translation: Vector3<f64>,
}

impl Pose3 {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self::new(UnitQuaternion::identity(), t)
    }

    pub fn from_rotation(q: UnitQuaternion) -> Self {
        Self::new(q, Vector3::zeros())
    }

    pub fn compose(&self, other: &Pose3) -> Pose3 {
        Pose3 {
            rotation: self.rotation * other.rotation,
            translation: self.rotation.rotate(&other.translation) + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose3 {
        let q = self.rotation.inverse();
        Pose3 {
            rotation: q,
            translation: -q.rotate(&self.translation),
        }
    }

    /// `self^-1 * other`.
    pub fn between(&self, other: &Pose3) -> Pose3 {
        self.inverse().compose(other)
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.rotate(p) + self.translation
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix()
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&self.rotation_matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Closed-form SE(3) exponential: Rodrigues rotation, left Jacobian on the
    /// translational part.
    pub fn exp(xi: &Twist) -> Pose3 {
        let phi = xi.rotation();
        let rho = xi.translation();
        Pose3 {
            rotation: UnitQuaternion::exp(&phi),
            translation: so3_left_jacobian(&phi) * rho,
        }
    }

    pub fn log(&self) -> Twist {
        let phi = self.rotation.log();
        let rho = so3_left_jacobian_inv_with(&phi, &self.rotation) * self.translation;
        Twist::new(phi, rho)
    }

    /// Adjoint in `[rotation | translation]` ordering:
    /// `exp(Ad_T xi) = T exp(xi) T^-1`.
    pub fn adjoint(&self) -> Matrix6<f64> {
        let r = self.rotation_matrix();
        let mut ad = Matrix6::zeros();
        ad.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        ad.fixed_view_mut::<3, 3>(3, 3).copy_from(&r);
        ad.fixed_view_mut::<3, 3>(3, 0)
            .copy_from(&(hat(&self.translation) * r));
        ad
    }

    /// Applies the left perturbation `exp(delta) * self`.
    pub fn retract(&self, delta: &Twist) -> Pose3 {
        Pose3::exp(delta).compose(self)
    }
}

impl Mul for Pose3 {
    type Output = Pose3;

    fn mul(self, rhs: Pose3) -> Pose3 {
        self.compose(&rhs)
    }
}

pub fn compose(a: &Pose3, b: &Pose3) -> Pose3 {
    a.compose(b)
}

pub fn inverse(p: &Pose3) -> Pose3 {
    p.inverse()
}

pub fn exp(xi: &Twist) -> Pose3 {
    Pose3::exp(xi)
}

pub fn log(p: &Pose3) -> Twist {
    p.log()
}

/// Object pose expressed in the camera frame: `camera^-1 * object`.
pub fn relative_object_pose(camera_in_world: &Pose3, object_in_world: &Pose3) -> Pose3 {
    camera_in_world.inverse().compose(object_in_world)
}

/// Geodesic angle between the two rotations, in `[0, pi]`.
pub fn rotation_angular_distance(a: &Pose3, b: &Pose3) -> f64 {
    (a.rotation.inverse() * b.rotation).angle()
}

/// `sqrt(|R_a - R_b|_F^2 + |t_a - t_b|^2)`.
pub fn chordal_distance(a: &Pose3, b: &Pose3) -> f64 {
    let dr = a.rotation_matrix() - b.rotation_matrix();
    let dt = a.translation - b.translation;
    (dr.norm_squared() + dt.norm_squared()).sqrt()
}

/// `|log(a^-1 b)|`, the metric used for pose-equality checks.
pub fn tangent_distance(a: &Pose3, b: &Pose3) -> f64 {
    a.between(b).log().norm()
}

pub fn hat(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// `J_l(phi) = I + (1 - cos t)/t^2 [phi] + (t - sin t)/t^3 [phi]^2`.
pub fn so3_left_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta_sq = phi.norm_squared();
    let theta = theta_sq.sqrt();
    let (a, b) = if theta < SMALL_ANGLE {
        (0.5 - theta_sq / 24.0, 1.0 / 6.0 - theta_sq / 120.0)
    } else {
        (
            (1.0 - theta.cos()) / theta_sq,
            (theta - theta.sin()) / (theta_sq * theta),
        )
    };
    let k = hat(phi);
    Matrix3::identity() + k * a + k * k * b
}

pub fn so3_left_jacobian_inv(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let half = 0.5 * theta;
    so3_left_jacobian_inv_cot(phi, half.cos() / half.sin())
}

/// `J_l^-1 = I - [phi]/2 + (1/t^2 - cot(t/2)/(2t)) [phi]^2`, with `cot(t/2)`
/// read off the quaternion so that `t = pi` needs no special case.
fn so3_left_jacobian_inv_with(phi: &Vector3<f64>, q: &UnitQuaternion) -> Matrix3<f64> {
    so3_left_jacobian_inv_cot(phi, q.w() / q.vector().norm())
}

fn so3_left_jacobian_inv_cot(phi: &Vector3<f64>, cot_half: f64) -> Matrix3<f64> {
    let theta_sq = phi.norm_squared();
    let theta = theta_sq.sqrt();
    let c = if theta < SMALL_ANGLE {
        1.0 / 12.0 + theta_sq / 720.0
    } else {
        1.0 / theta_sq - cot_half / (2.0 * theta)
    };
    let k = hat(phi);
    Matrix3::identity() - k * 0.5 + k * k * c
}

/// Coupling block `Q(rho, phi)` of the SE(3) left Jacobian.
fn se3_coupling(phi: &Vector3<f64>, rho: &Vector3<f64>) -> Matrix3<f64> {
    let t2 = phi.norm_squared();
    let t = t2.sqrt();
    let (c1, c2, c3) = if t < JACOBIAN_SERIES_ANGLE {
        let t4 = t2 * t2;
        (
            1.0 / 6.0 - t2 / 120.0 + t4 / 5040.0,
            1.0 / 24.0 - t2 / 720.0 + t4 / 40320.0,
            1.0 / 120.0 - t2 / 2520.0 + t4 / 120960.0,
        )
    } else {
        let (s, c) = t.sin_cos();
        (
            (t - s) / (t2 * t),
            (t2 + 2.0 * c - 2.0) / (2.0 * t2 * t2),
            (2.0 * t - 3.0 * s + t * c) / (2.0 * t2 * t2 * t),
        )
    };
    let p = hat(phi);
    let r = hat(rho);
    let pr = p * r;
    let rp = r * p;
    let prp = pr * p;
    r * 0.5 + (pr + rp + prp) * c1 + (p * pr + rp * p - prp * 3.0) * c2 + (prp * p + p * prp) * c3
}

/// Inverse of the SE(3) left Jacobian in `[rotation | translation]` ordering.
pub fn se3_left_jacobian_inv(xi: &Twist) -> Matrix6<f64> {
    let phi = xi.rotation();
    let rho = xi.translation();
    let j_inv = so3_left_jacobian_inv(&phi);
    let q = se3_coupling(&phi, &rho);
    let mut out = Matrix6::zeros();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&j_inv);
    out.fixed_view_mut::<3, 3>(3, 3).copy_from(&j_inv);
    out.fixed_view_mut::<3, 3>(3, 0)
        .copy_from(&(-j_inv * q * j_inv));
    out
}

/// `J_r^-1(xi) = J_l^-1(-xi)`: derivative of `log(exp(xi) exp(d))` at `d = 0`.
pub fn se3_right_jacobian_inv(xi: &Twist) -> Matrix6<f64> {
    se3_left_jacobian_inv(&Twist(-xi.0))
}
