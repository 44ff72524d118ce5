//! Pinhole cameras in the OpenCV convention: +x right, +y down, +z forward.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{normalize_quaternion, quaternion_norm, rotation_matrix};

pub const DEFAULT_NEAR: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// World-to-camera rotation as a unit `wxyz` quaternion.
    pub rotation: [f64; 4],
    /// World-to-camera translation.
    pub translation: [f64; 3],
    pub width: u32,
    pub height: u32,
    #[serde(default = "default_near")]
    pub near: f64,
}

fn default_near() -> f64 {
    DEFAULT_NEAR
}

impl Camera {
    /// A camera at `eye` looking at `target`. `up` is the world up direction.
    pub fn look_at(
        eye: [f64; 3],
        target: [f64; 3],
        up: [f64; 3],
        focal: f64,
        width: u32,
        height: u32,
    ) -> Result<Self> {
        let eye = Vector3::from(eye);
        let forward = Vector3::from(target) - eye;
        if forward.norm() == 0.0 {
            return Err(Error::Argument("eye and target coincide".into()));
        }
        let z = forward.normalize();
        let x = z.cross(&Vector3::from(up));
        if x.norm() < 1e-12 {
            return Err(Error::Argument("up direction is parallel to the view direction".into()));
        }
        let x = x.normalize();
        let y = z.cross(&x);
        let r = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(r));
        let rotation = normalize_quaternion([q.w, q.i, q.j, q.k]);
        let rm = rotation_matrix(rotation);
        let t = -(rm * eye);
        Ok(Self {
            fx: focal,
            fy: focal,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
            rotation,
            translation: [t.x, t.y, t.z],
            width,
            height,
            near: DEFAULT_NEAR,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Argument(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if self.width < 1 || self.height < 1 {
            return Err(Error::Argument("image size must be at least 1x1".into()));
        }
        let r = self.rotation_matrix();
        let err = (r * r.transpose() - Matrix3::identity())
            .abs()
            .max()
            .max((quaternion_norm(self.rotation) - 1.0).abs());
        if !(err <= 1e-8) {
            return Err(Error::Argument(format!(
                "camera rotation is not orthonormal (error {err:e})"
            )));
        }
        if !(self.near > 0.0) {
            return Err(Error::Argument("near plane must be positive".into()));
        }
        Ok(())
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        rotation_matrix(self.rotation)
    }

    pub fn world_to_camera(&self, p: [f64; 3]) -> Vector3<f64> {
        self.rotation_matrix() * Vector3::from(p) + Vector3::from(self.translation)
    }

    /// Camera center in world coordinates, `-R^T t`.
    pub fn center(&self) -> [f64; 3] {
        let c = -(self.rotation_matrix().transpose() * Vector3::from(self.translation));
        [c.x, c.y, c.z]
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }
}

/// Mean of camera centers.
pub fn mean_center(cameras: &[Camera]) -> Option<[f64; 3]> {
    if cameras.is_empty() {
        return None;
    }
    let mut acc = [0.0; 3];
    for c in cameras {
        let p = c.center();
        for k in 0..3 {
            acc[k] += p[k];
        }
    }
    let n = cameras.len() as f64;
    Some([acc[0] / n, acc[1] / n, acc[2] / n])
}
