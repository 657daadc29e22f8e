//! Rigid transforms stored as position + unit quaternion.

use nalgebra::{Matrix4, Quaternion, Rotation3, Unit, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

/// A rigid transform. The orientation is kept canonical (`w >= 0`) and
/// renormalized after every operation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub position: Vector3<f64>,
    pub orientation: UnitQuaternion<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

fn canonical(q: UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    let q = UnitQuaternion::new_normalize(q.into_inner());
    if q.w < 0.0 {
        UnitQuaternion::new_unchecked(-q.into_inner())
    } else {
        q
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            position: Vector3::zeros(),
            orientation: UnitQuaternion::identity(),
        }
    }

    pub fn new(position: Vector3<f64>, orientation: UnitQuaternion<f64>) -> Self {
        Self {
            position,
            orientation: canonical(orientation),
        }
    }

    pub fn from_translation(x: f64, y: f64, z: f64) -> Self {
        Self::new(Vector3::new(x, y, z), UnitQuaternion::identity())
    }

    pub fn from_axis_angle(axis: &Unit<Vector3<f64>>, angle: f64) -> Self {
        Self::new(Vector3::zeros(), UnitQuaternion::from_axis_angle(axis, angle))
    }

    /// Builds a pose from scalar-first quaternion components; the quaternion is normalized.
    pub fn from_wxyz(position: Vector3<f64>, w: f64, x: f64, y: f64, z: f64) -> Option<Self> {
        let q = Quaternion::new(w, x, y, z);
        let n = q.norm();
        if !n.is_finite() || n < 1e-12 {
            return None;
        }
        Some(Self::new(position, UnitQuaternion::new_normalize(q)))
    }

    /// Fixed-axis roll/pitch/yaw in radians (R = Rz(yaw) Ry(pitch) Rx(roll)).
    pub fn from_xyz_rpy(xyz: [f64; 3], rpy: [f64; 3]) -> Self {
        Self::new(Vector3::from(xyz), UnitQuaternion::from_euler_angles(rpy[0], rpy[1], rpy[2]))
    }

    pub fn rpy(&self) -> [f64; 3] {
        let (r, p, y) = self.orientation.euler_angles();
        [r, p, y]
    }

    /// `self ∘ other`: applies `other` first, expressed in the frame of `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose::new(
            self.position + self.orientation * other.position,
            self.orientation * other.orientation,
        )
    }

    pub fn inverse(&self) -> Pose {
        let inv = self.orientation.inverse();
        Pose::new(-(inv * self.position), inv)
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.position + self.orientation * p
    }

    pub fn rotation_matrix(&self) -> Rotation3<f64> {
        self.orientation.to_rotation_matrix()
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(self.rotation_matrix().matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.position);
        m
    }

    /// Euclidean distance between the two origins.
    pub fn position_distance(&self, other: &Pose) -> f64 {
        (self.position - other.position).norm()
    }

    /// Angle of the relative rotation, in `[0, π]`.
    pub fn rotation_distance(&self, other: &Pose) -> f64 {
        self.orientation.angle_to(&other.orientation)
    }

    /// Rotation vector (axis · angle) taking `self`'s orientation onto `target`'s,
    /// expressed in the base frame.
    pub fn rotation_error_to(&self, target: &Pose) -> Vector3<f64> {
        (target.orientation * self.orientation.inverse()).scaled_axis()
    }

    pub fn is_finite(&self) -> bool {
        self.position.iter().all(|v| v.is_finite()) && self.orientation.coords.iter().all(|v| v.is_finite())
    }
}

/// File representation of a pose: meters and degrees.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseSpec {
    pub xyz: [f64; 3],
    #[serde(default)]
    pub rpy_deg: [f64; 3],
}

impl From<PoseSpec> for Pose {
    fn from(s: PoseSpec) -> Self {
        Pose::from_xyz_rpy(s.xyz, s.rpy_deg.map(f64::to_radians))
    }
}

impl From<Pose> for PoseSpec {
    fn from(p: Pose) -> Self {
        PoseSpec {
            xyz: p.position.into(),
            rpy_deg: p.rpy().map(f64::to_degrees),
        }
    }
}
