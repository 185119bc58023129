//! Rigid and similarity transforms.

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::cloud::Point3;

/// `p -> rotation * p + translation`, rotation orthogonal with det +1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_rotation(rotation: Matrix3<f64>) -> Self {
        Self {
            rotation,
            translation: Vector3::zeros(),
        }
    }

    pub fn apply(&self, p: &Point3) -> Point3 {
        self.rotation * p + self.translation
    }

    /// `self` after `first`: x -> self(first(x)).
    pub fn compose(&self, first: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * first.rotation,
            translation: self.rotation * first.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }
}

/// `p -> translation + scale * rotation * p`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    pub rotation: Matrix3<f64>,
    pub scale: f64,
    pub translation: Vector3<f64>,
}

impl Default for Similarity {
    fn default() -> Self {
        Self::identity()
    }
}

impl Similarity {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            scale: 1.0,
            translation: Vector3::zeros(),
        }
    }

    pub fn apply(&self, p: &Point3) -> Point3 {
        self.translation + self.rotation * p * self.scale
    }

    /// `self` after `first`.
    pub fn compose(&self, first: &Similarity) -> Similarity {
        Similarity {
            rotation: self.rotation * first.rotation,
            scale: self.scale * first.scale,
            translation: self.translation + self.rotation * first.translation * self.scale,
        }
    }

    pub fn inverse(&self) -> Similarity {
        let rt = self.rotation.transpose();
        Similarity {
            rotation: rt,
            scale: 1.0 / self.scale,
            translation: -(rt * self.translation) / self.scale,
        }
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&(self.rotation * self.scale));
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Splits a 4x4 matrix whose upper block is `scale * rotation`.
    pub fn from_matrix(m: &Matrix4<f64>) -> Similarity {
        let block: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into();
        let scale = block.determinant().cbrt();
        Similarity {
            rotation: block / scale,
            scale,
            translation: m.fixed_view::<3, 1>(0, 3).into(),
        }
    }

    pub fn row_major(&self) -> [f64; 16] {
        let m = self.to_matrix();
        let mut out = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                out[r * 4 + c] = m[(r, c)];
            }
        }
        out
    }
}

/// Euler angles in radians, applied as `Rz(z) * Ry(y) * Rx(x)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EulerZyx {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl EulerZyx {
    pub fn matrix(&self) -> Matrix3<f64> {
        rot_z(self.z) * rot_y(self.y) * rot_x(self.x)
    }
}

pub fn rot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

pub fn rot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

pub fn rot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Geodesic angle (radians) between two rotations.
pub fn rotation_angle_between(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let r = a.transpose() * b;
    ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
}

/// Largest deviation of `r` from orthogonality with det +1.
pub fn rotation_defect(r: &Matrix3<f64>) -> f64 {
    let ortho = (r * r.transpose() - Matrix3::identity()).abs().max();
    ortho.max((r.determinant() - 1.0).abs())
}
