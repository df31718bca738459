use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

/// Pinhole camera with a world-to-camera rigid transform `x_cam = R x + t`.
///
/// Camera space is x right, y down, z forward. Pixel `(col, row)` is sampled at
/// the integer coordinate `(col, row)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Camera {
    pub fn new(
        width: usize,
        height: usize,
        focal: (f64, f64),
        principal: (f64, f64),
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
    ) -> Result<Self> {
        let cam = Self {
            width,
            height,
            fx: focal.0,
            fy: focal.1,
            cx: principal.0,
            cy: principal.1,
            rotation,
            translation,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at `eye` looking at `target`, with world `up` mapped towards −y.
    pub fn look_at(
        width: usize,
        height: usize,
        focal: f64,
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
    ) -> Result<Self> {
        let forward = target - eye;
        if forward.norm() < 1e-12 {
            return Err(Error::InvalidInput("camera eye coincides with its target".into()));
        }
        let forward = forward.normalize();
        let right = forward.cross(&up);
        if right.norm() < 1e-9 {
            return Err(Error::InvalidInput("camera up vector is parallel to the view direction".into()));
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * eye);
        Self::new(
            width,
            height,
            (focal, focal),
            ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0),
            rotation,
            translation,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidInput("camera image size must be positive".into()));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidInput("focal lengths must be positive".into()));
        }
        let gram = self.rotation.transpose() * self.rotation - Matrix3::identity();
        if gram.amax() > 1e-9 {
            return Err(Error::InvalidInput("camera rotation is not orthonormal".into()));
        }
        Ok(())
    }

    /// World-space camera center `x_c = −Rᵀ t`.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn to_camera(&self, world: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * world + self.translation
    }

    /// Same intrinsics with the world shifted by `offset` (camera moves along).
    pub fn translated(&self, offset: &Vector3<f64>) -> Camera {
        let mut cam = self.clone();
        cam.translation = self.translation - self.rotation * offset;
        cam
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn look_at_places_target_on_axis() {
        let cam = Camera::look_at(
            32,
            24,
            30.0,
            Vector3::new(0.0, 0.0, -4.0),
            Vector3::zeros(),
            Vector3::new(0.0, -1.0, 0.0),
        )
        .unwrap();
        let c = cam.to_camera(&Vector3::zeros());
        assert!(c.x.abs() < 1e-12 && c.y.abs() < 1e-12);
        assert!((c.z - 4.0).abs() < 1e-12);
        assert!((cam.center() - Vector3::new(0.0, 0.0, -4.0)).norm() < 1e-12);
    }

    #[test]
    fn invalid_cameras_are_rejected() {
        let r = Matrix3::identity();
        let t = Vector3::zeros();
        assert!(Camera::new(0, 4, (1.0, 1.0), (0.0, 0.0), r, t).is_err());
        assert!(Camera::new(4, 4, (0.0, 1.0), (0.0, 0.0), r, t).is_err());
        assert!(Camera::new(4, 4, (1.0, 1.0), (0.0, 0.0), r * 2.0, t).is_err());
        assert!(Camera::look_at(4, 4, 1.0, Vector3::zeros(), Vector3::zeros(), Vector3::y()).is_err());
    }
}
