//! Rotation algebra, the pinhole camera, rigid transforms and pose errors.
//!
//! Quaternions are stored and serialized in `(w, x, y, z)` order. Camera
//! frames follow the usual computer-vision convention: `+z` looks forward,
//! `+x` right and `+y` down.

use std::ops::Mul;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

const MIN_QUAT_NORM: f64 = 1e-12;

/// A (not necessarily unit) quaternion `w + xi + yj + zk`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl From<[f64; 4]> for Quaternion {
    fn from(a: [f64; 4]) -> Self {
        Quaternion::new(a[0], a[1], a[2], a[3])
    }
}

impl From<Quaternion> for [f64; 4] {
    fn from(q: Quaternion) -> Self {
        q.to_array()
    }
}

impl Quaternion {
    pub const IDENTITY: Quaternion = Quaternion {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub const fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Quaternion { w, x, y, z }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn dot(&self, o: &Quaternion) -> f64 {
        self.w * o.w + self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    /// Unit quaternion in the same direction; rejects (near-)zero input.
    pub fn normalized(&self) -> Result<Quaternion> {
        let n = self.norm();
        if !n.is_finite() || n <= MIN_QUAT_NORM {
            return Err(Error::invalid(format!(
                "quaternion {:?} cannot be normalized (norm {n})",
                self.to_array()
            )));
        }
        Ok(Quaternion::new(self.w / n, self.x / n, self.y / n, self.z / n))
    }

    pub fn conjugate(&self) -> Quaternion {
        Quaternion::new(self.w, -self.x, -self.y, -self.z)
    }

    pub fn neg(&self) -> Quaternion {
        Quaternion::new(-self.w, -self.x, -self.y, -self.z)
    }

    /// Rotation of `angle` radians about `axis` (normalized internally).
    pub fn from_axis_angle(axis: &Vec3, angle: f64) -> Result<Quaternion> {
        let n = axis.norm();
        if n <= MIN_QUAT_NORM {
            return Err(Error::invalid("rotation axis has zero length"));
        }
        let (s, c) = (0.5 * angle).sin_cos();
        let a = axis / n;
        Ok(Quaternion::new(c, s * a.x, s * a.y, s * a.z))
    }

    /// Shortest-arc rotation taking unit vector `from` onto unit vector `to`.
    pub fn rotation_between(from: &Vec3, to: &Vec3) -> Result<Quaternion> {
        let (fnorm, tnorm) = (from.norm(), to.norm());
        if fnorm <= MIN_QUAT_NORM || tnorm <= MIN_QUAT_NORM {
            return Err(Error::invalid("rotation_between needs non-zero vectors"));
        }
        let f = from / fnorm;
        let t = to / tnorm;
        let c = f.dot(&t);
        if c < -1.0 + 1e-12 {
            // Antiparallel: rotate half a turn about any axis orthogonal to `f`.
            let helper = if f.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
            let axis = f.cross(&helper).normalize();
            return Ok(Quaternion::new(0.0, axis.x, axis.y, axis.z));
        }
        let axis = f.cross(&t);
        Quaternion::new(1.0 + c, axis.x, axis.y, axis.z).normalized()
    }

    /// Quaternion of an orthonormal, right-handed rotation matrix.
    pub fn from_rotation_matrix(m: &Mat3) -> Quaternion {
        let trace = m[(0, 0)] + m[(1, 1)] + m[(2, 2)];
        let q = if trace > 0.0 {
            let s = (trace + 1.0).sqrt() * 2.0;
            Quaternion::new(
                0.25 * s,
                (m[(2, 1)] - m[(1, 2)]) / s,
                (m[(0, 2)] - m[(2, 0)]) / s,
                (m[(1, 0)] - m[(0, 1)]) / s,
            )
        } else if m[(0, 0)] > m[(1, 1)] && m[(0, 0)] > m[(2, 2)] {
            let s = (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt() * 2.0;
            Quaternion::new(
                (m[(2, 1)] - m[(1, 2)]) / s,
                0.25 * s,
                (m[(0, 1)] + m[(1, 0)]) / s,
                (m[(0, 2)] + m[(2, 0)]) / s,
            )
        } else if m[(1, 1)] > m[(2, 2)] {
            let s = (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt() * 2.0;
            Quaternion::new(
                (m[(0, 2)] - m[(2, 0)]) / s,
                (m[(0, 1)] + m[(1, 0)]) / s,
                0.25 * s,
                (m[(1, 2)] + m[(2, 1)]) / s,
            )
        } else {
            let s = (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt() * 2.0;
            Quaternion::new(
                (m[(1, 0)] - m[(0, 1)]) / s,
                (m[(0, 2)] + m[(2, 0)]) / s,
                (m[(1, 2)] + m[(2, 1)]) / s,
                0.25 * s,
            )
        };
        let n = q.norm();
        Quaternion::new(q.w / n, q.x / n, q.y / n, q.z / n)
    }

    /// Rotation matrix of an already-unit quaternion.
    pub(crate) fn unit_to_matrix(&self) -> Mat3 {
        let Quaternion { w, x, y, z } = *self;
        Mat3::new(
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

impl Mul for Quaternion {
    type Output = Quaternion;

    /// Hamilton product; `a * b` applies `b` first.
    fn mul(self, o: Quaternion) -> Quaternion {
        Quaternion::new(
            self.w * o.w - self.x * o.x - self.y * o.y - self.z * o.z,
            self.w * o.x + self.x * o.w + self.y * o.z - self.z * o.y,
            self.w * o.y - self.x * o.z + self.y * o.w + self.z * o.x,
            self.w * o.z + self.x * o.y - self.y * o.x + self.z * o.w,
        )
    }
}

/// Partial derivatives of the rotation matrix with respect to the raw
/// (unnormalized) quaternion components `(w, x, y, z)`, including the
/// normalization step.
pub(crate) fn rotation_jacobian(q: &Quaternion) -> Result<[Mat3; 4]> {
    let norm = q.norm();
    let u = q.normalized()?;
    let Quaternion { w, x, y, z } = u;
    // d R / d(unit components)
    let dw = Mat3::new(0.0, -z, y, z, 0.0, -x, -y, x, 0.0) * 2.0;
    let dx = Mat3::new(0.0, y, z, y, -2.0 * x, -w, z, w, -2.0 * x) * 2.0;
    let dy = Mat3::new(-2.0 * y, x, w, x, 0.0, z, -w, z, -2.0 * y) * 2.0;
    let dz = Mat3::new(-2.0 * z, -w, x, w, -2.0 * z, y, x, y, 0.0) * 2.0;
    let unit = [dw, dx, dy, dz];
    let comps = u.to_array();
    // Chain through q -> q / |q|: d u_i / d q_j = (delta_ij - u_i u_j) / |q|.
    let mut out = [Mat3::zeros(); 4];
    for (j, o) in out.iter_mut().enumerate() {
        for (i, d) in unit.iter().enumerate() {
            let delta = if i == j { 1.0 } else { 0.0 };
            *o += d * ((delta - comps[i] * comps[j]) / norm);
        }
    }
    Ok(out)
}

/// Pinhole intrinsics. Pixel `(u, v)` addresses continuous image
/// coordinates, so the centre of pixel `(i, j)` is `(i + 0.5, j + 0.5)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = CameraIntrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    /// Intrinsics with the principal point at the image centre.
    pub fn centered(f: f64, width: usize, height: usize) -> Result<Self> {
        Self::new(f, f, width as f64 / 2.0, height as f64 / 2.0, width, height)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0 && self.fx.is_finite() && self.fy.is_finite()) {
            return Err(Error::invalid("focal lengths must be positive and finite"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("image dimensions must be positive"));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64 && self.cy >= 0.0 && self.cy < self.height as f64) {
            return Err(Error::invalid(format!(
                "principal point ({}, {}) outside the {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        if self.width % 16 != 0 || self.height % 16 != 0 {
            return Err(Error::invalid(format!(
                "image size {}x{} is not divisible by 16",
                self.width, self.height
            )));
        }
        Ok(())
    }

    /// `K^-1 (u, v, 1)`: the camera-frame ray with unit z.
    pub fn ray(&self, u: f64, v: f64) -> Vec3 {
        Vec3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    /// Ray through the centre of pixel `(col, row)`.
    pub fn pixel_ray(&self, col: usize, row: usize) -> Vec3 {
        self.ray(col as f64 + 0.5, row as f64 + 0.5)
    }

    /// Projects a camera-frame point; `None` if it is not in front of the camera.
    pub fn project(&self, p: &Vec3) -> Option<(f64, f64)> {
        if p.z <= 0.0 {
            return None;
        }
        Some((self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy))
    }
}

/// Proper rigid motion `p -> R p + t`. Poses in this crate are
/// camera-to-reference transforms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: Quaternion,
    pub translation: Vec3,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl RigidTransform {
    pub const IDENTITY: RigidTransform = RigidTransform {
        rotation: Quaternion::IDENTITY,
        translation: Vector3::new(0.0, 0.0, 0.0),
    };

    /// Normalizes the rotation; fails on a zero quaternion.
    pub fn new(rotation: Quaternion, translation: Vec3) -> Result<Self> {
        Ok(RigidTransform {
            rotation: rotation.normalized()?,
            translation,
        })
    }

    pub fn from_translation(t: Vec3) -> Self {
        RigidTransform {
            rotation: Quaternion::IDENTITY,
            translation: t,
        }
    }

    pub fn rotation_matrix(&self) -> Mat3 {
        self.rotation.unit_to_matrix()
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation_matrix() * p + self.translation
    }

    pub fn inverse(&self) -> RigidTransform {
        let inv_rot = self.rotation.conjugate();
        let r_inv = inv_rot.unit_to_matrix();
        RigidTransform {
            rotation: inv_rot,
            translation: -(r_inv * self.translation),
        }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        let rot = self.rotation * other.rotation;
        let n = rot.norm();
        RigidTransform {
            rotation: Quaternion::new(rot.w / n, rot.x / n, rot.y / n, rot.z / n),
            translation: self.apply(&other.translation),
        }
    }
}

/// One calibrated camera: intrinsics plus its camera-to-reference pose.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct View {
    pub intrinsics: CameraIntrinsics,
    pub pose: RigidTransform,
}

pub fn quat_to_rotation(q: &Quaternion) -> Result<Mat3> {
    Ok(q.normalized()?.unit_to_matrix())
}

/// Plane normal of an oriented primitive: the rotated `+z` axis.
pub fn normal_from_quat(q: &Quaternion) -> Result<Vec3> {
    Ok(quat_to_rotation(q)?.column(2).into_owned())
}

pub fn backproject(k: &CameraIntrinsics, u: f64, v: f64, depth: f64) -> Result<Vec3> {
    if !(depth > 0.0) {
        return Err(Error::invalid(format!("back-projection depth must be positive, got {depth}")));
    }
    Ok(Vec3::new((u - k.cx) * depth / k.fx, (v - k.cy) * depth / k.fy, depth))
}

pub fn apply_transform(t: &RigidTransform, p: &Vec3) -> Vec3 {
    t.apply(p)
}

/// Geodesic angle between two rotations, in degrees.
pub fn rotation_error_deg(a: &Quaternion, b: &Quaternion) -> Result<f64> {
    let a = a.normalized()?;
    let b = b.normalized()?;
    let c = a.dot(&b).abs().clamp(-1.0, 1.0);
    Ok((2.0 * c.acos()).to_degrees())
}

pub fn translation_error_m(a: &Vec3, b: &Vec3) -> f64 {
    (a - b).norm()
}

/// Unsigned angle between two directions in degrees.
pub fn angle_between_deg(a: &Vec3, b: &Vec3) -> f64 {
    let denom = a.norm() * b.norm();
    if denom == 0.0 {
        return 0.0;
    }
    (a.dot(b) / denom).clamp(-1.0, 1.0).acos().to_degrees()
}

/// Angle between two plane normals, ignoring orientation sign.
pub fn plane_angle_deg(a: &Vec3, b: &Vec3) -> f64 {
    let denom = a.norm() * b.norm();
    if denom == 0.0 {
        return 0.0;
    }
    (a.dot(b).abs() / denom).clamp(0.0, 1.0).acos().to_degrees()
}
