use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pinhole camera. `rotation` maps camera axes (x right, y down, z forward)
/// to world axes, and `translation` is the camera centre in world units.
/// Intrinsics are in pixels; pixel `(u, v)` has its centre at `(u + 0.5, v + 0.5)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "PoseRecord", try_from = "PoseRecord")]
pub struct CameraPose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

/// On-disk form used by `poses.json`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PoseRecord {
    /// Row-major 3×3.
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl From<CameraPose> for PoseRecord {
    fn from(p: CameraPose) -> Self {
        let mut rotation = [0.0; 9];
        for r in 0..3 {
            for c in 0..3 {
                rotation[r * 3 + c] = p.rotation[(r, c)];
            }
        }
        PoseRecord {
            rotation,
            translation: [p.translation.x, p.translation.y, p.translation.z],
            fx: p.fx,
            fy: p.fy,
            cx: p.cx,
            cy: p.cy,
        }
    }
}

impl TryFrom<PoseRecord> for CameraPose {
    type Error = Error;

    fn try_from(r: PoseRecord) -> Result<Self> {
        let pose = CameraPose {
            rotation: Matrix3::from_row_slice(&r.rotation),
            translation: Vector3::from_column_slice(&r.translation),
            fx: r.fx,
            fy: r.fy,
            cx: r.cx,
            cy: r.cy,
        };
        pose.validate()?;
        Ok(pose)
    }
}

pub const ORTHONORMAL_TOL: f64 = 1e-6;

impl CameraPose {
    /// Camera at `eye` looking at `target`, with `up` giving the world's up direction.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        focal: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let forward = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::config("look_at: eye equals target"))?;
        let right = forward
            .cross(&up)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::config("look_at: up is parallel to the view direction"))?;
        let down = forward.cross(&right);
        let pose = CameraPose {
            rotation: Matrix3::from_columns(&[right, down, forward]),
            translation: eye,
            fx: focal,
            fy: focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
        };
        pose.validate()?;
        Ok(pose)
    }

    pub fn orthonormality_error(&self) -> f64 {
        (self.rotation.transpose() * self.rotation - Matrix3::identity()).norm()
    }

    pub fn validate(&self) -> Result<()> {
        let err = self.orthonormality_error();
        if !(err < ORTHONORMAL_TOL) {
            return Err(Error::config(format!(
                "camera rotation not orthonormal (|RᵀR − I| = {err:e})"
            )));
        }
        let det = self.rotation.determinant();
        if (det - 1.0).abs() > 1e-5 {
            return Err(Error::config(format!("camera rotation determinant {det}")));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::config("focal lengths must be positive"));
        }
        if !self.translation.iter().all(|v| v.is_finite()) {
            return Err(Error::config("camera centre not finite"));
        }
        Ok(())
    }

    /// Same camera with intrinsics rescaled for an image `scale` times larger.
    pub fn scaled(&self, scale: f64) -> Self {
        CameraPose {
            fx: self.fx * scale,
            fy: self.fy * scale,
            cx: self.cx * scale,
            cy: self.cy * scale,
            ..self.clone()
        }
    }

    /// World-space ray through continuous pixel coordinate `(u, v)`.
    pub fn ray(&self, u: f64, v: f64) -> ([f32; 3], [f32; 3]) {
        let d_cam = Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0);
        let d = (self.rotation * d_cam).normalize();
        let o = self.translation;
        (
            [o.x as f32, o.y as f32, o.z as f32],
            [d.x as f32, d.y as f32, d.z as f32],
        )
    }

    /// Ray through the centre of pixel `(x, y)`.
    pub fn pixel_ray(&self, x: usize, y: usize) -> ([f32; 3], [f32; 3]) {
        self.ray(x as f64 + 0.5, y as f64 + 0.5)
    }

    /// Projects a world point to `(u, v, depth)`; `None` behind the camera.
    pub fn project(&self, p: &Vector3<f64>) -> Option<(f64, f64, f64)> {
        let c = self.rotation.transpose() * (p - self.translation);
        if c.z <= 1e-9 {
            return None;
        }
        Some((
            self.fx * c.x / c.z + self.cx,
            self.fy * c.y / c.z + self.cy,
            c.z,
        ))
    }

    pub fn forward(&self) -> Vector3<f64> {
        self.rotation.column(2).into_owned()
    }

    /// Azimuth of the camera centre around the world `+y` axis, in `[0, 2π)`.
    pub fn azimuth(&self) -> f64 {
        let a = self.translation.x.atan2(self.translation.z);
        a.rem_euclid(std::f64::consts::TAU)
    }

    /// Index of the azimuth sector (out of `buckets`) containing the camera.
    pub fn azimuth_bucket(&self, buckets: usize) -> usize {
        let b = (self.azimuth() / std::f64::consts::TAU * buckets as f64).floor() as usize;
        b.min(buckets - 1)
    }
}
