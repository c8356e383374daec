//! Pinhole camera with a rigid world-to-camera pose.
//!
//! Pixel centers sit at integer coordinates: pixel `(col, row)` is the
//! image point `(u, v) = (col, row)`. Camera space is x right, y down,
//! z forward.

use nalgebra::{Matrix3, Point3, Rotation3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Rigid transform `x -> rotation * x + translation`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    #[inline]
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`.
    pub fn compose(&self, other: &RigidTransform) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub world_to_camera: RigidTransform,
}

const ORTHONORMAL_TOL: f64 = 1e-6;

impl Camera {
    pub fn new(
        intrinsics: Intrinsics,
        width: usize,
        height: usize,
        world_to_camera: RigidTransform,
    ) -> Result<Self> {
        let cam = Self {
            fx: intrinsics.fx,
            fy: intrinsics.fy,
            cx: intrinsics.cx,
            cy: intrinsics.cy,
            width,
            height,
            world_to_camera,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at the world origin looking down +z with the principal point
    /// at the image center and focal length `focal` on both axes.
    pub fn centered(width: usize, height: usize, focal: f64) -> Result<Self> {
        Self::new(
            Intrinsics {
                fx: focal,
                fy: focal,
                cx: (width as f64 - 1.0) / 2.0,
                cy: (height as f64 - 1.0) / 2.0,
            },
            width,
            height,
            RigidTransform::identity(),
        )
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0 && self.fx.is_finite() && self.fy.is_finite()) {
            return Err(invalid(format!(
                "focal lengths must be positive, got ({}, {})",
                self.fx, self.fy
            )));
        }
        if !(self.cx.is_finite() && self.cy.is_finite()) {
            return Err(invalid("principal point must be finite"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(invalid(format!(
                "image size must be at least 1x1, got {}x{}",
                self.width, self.height
            )));
        }
        let r = &self.world_to_camera.rotation;
        let err = (r.transpose() * r - Matrix3::identity()).abs().max();
        if !(err <= ORTHONORMAL_TOL) {
            return Err(invalid(format!("rotation is not orthonormal (error {err:e})")));
        }
        if !self.world_to_camera.translation.iter().all(|v| v.is_finite()) {
            return Err(invalid("translation must be finite"));
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> Intrinsics {
        Intrinsics {
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
        }
    }

    pub fn same_intrinsics(&self, other: &Camera) -> bool {
        self.intrinsics() == other.intrinsics()
            && self.width == other.width
            && self.height == other.height
    }

    pub fn with_pose(&self, world_to_camera: RigidTransform) -> Self {
        Self {
            world_to_camera,
            ..*self
        }
    }

    #[inline]
    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.world_to_camera.rotation
    }

    #[inline]
    pub fn to_camera(&self, world: &Vector3<f64>) -> Vector3<f64> {
        self.world_to_camera.apply(world)
    }

    #[inline]
    pub fn to_world(&self, cam: &Vector3<f64>) -> Vector3<f64> {
        self.world_to_camera.rotation.transpose() * (cam - self.world_to_camera.translation)
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Point3<f64> {
        Point3::from(self.to_world(&Vector3::zeros()))
    }

    /// Perspective projection of a camera-space point.
    #[inline]
    pub fn project_camera(&self, p: &Vector3<f64>) -> Vector2<f64> {
        Vector2::new(
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
        )
    }

    /// Projection of a world-space point; `None` behind the camera.
    pub fn project_world(&self, world: &Vector3<f64>) -> Option<(Vector2<f64>, f64)> {
        let p = self.to_camera(world);
        (p.z > 0.0).then(|| (self.project_camera(&p), p.z))
    }

    /// Un-normalized ray `((u - cx)/fx, (v - cy)/fy, 1)`.
    #[inline]
    pub fn ray(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    /// Camera-space point at depth `depth` along pixel `(u, v)`; no
    /// validation of the depth.
    #[inline]
    pub fn unproject_unchecked(&self, u: f64, v: f64, depth: f64) -> Vector3<f64> {
        self.ray(u, v) * depth
    }

    /// Camera-space point at depth `depth` along pixel `(u, v)`.
    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> Result<Vector3<f64>> {
        if !(depth > 0.0) || !depth.is_finite() {
            return Err(invalid(format!("depth must be positive and finite, got {depth}")));
        }
        Ok(self.unproject_unchecked(u, v, depth))
    }

    /// Orbits the camera about `pivot` (given in this camera's frame) by
    /// `yaw` about the camera's vertical axis and `pitch` about its
    /// horizontal axis. The pivot keeps its camera-space coordinates, so it
    /// reprojects to the same pixel.
    pub fn orbit(&self, pivot: &Vector3<f64>, yaw: f64, pitch: f64) -> Self {
        let o = orbit_rotation(yaw, pitch);
        let ot = o.transpose();
        // x1 = O^T (x0 - p) + p
        let relative = RigidTransform {
            rotation: ot,
            translation: pivot - ot * pivot,
        };
        self.with_pose(relative.compose(&self.world_to_camera))
    }
}

/// `Ry(yaw) * Rx(pitch)`.
pub fn orbit_rotation(yaw: f64, pitch: f64) -> Matrix3<f64> {
    let ry = Rotation3::from_axis_angle(&Vector3::y_axis(), yaw);
    let rx = Rotation3::from_axis_angle(&Vector3::x_axis(), pitch);
    (ry * rx).into_inner()
}

/// Inverse of [`orbit_rotation`]; `None` if the rotation has a roll
/// component.
pub fn orbit_angles(o: &Matrix3<f64>) -> Option<(f64, f64)> {
    if o[(1, 0)].abs() > 1e-9 {
        return None;
    }
    let pitch = (-o[(1, 2)]).atan2(o[(1, 1)]);
    let yaw = (-o[(2, 0)]).atan2(o[(0, 0)]);
    Some((yaw, pitch))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn cam() -> Camera {
        Camera::new(
            Intrinsics {
                fx: 50.0,
                fy: 55.0,
                cx: 31.5,
                cy: 30.0,
            },
            64,
            60,
            RigidTransform::identity(),
        )
        .unwrap()
    }

    #[test]
    fn rejects_invalid_cameras() {
        let good = cam();
        assert!(Camera { fx: 0.0, ..good }.validate().is_err());
        assert!(Camera { width: 0, ..good }.validate().is_err());
        let mut skew = good;
        skew.world_to_camera.rotation[(0, 1)] = 0.1;
        assert!(skew.validate().is_err());
    }

    #[test]
    fn orbit_keeps_pivot_on_its_pixel() {
        let c = cam();
        let pivot = c.unproject(c.cx, c.cy, 3.0).unwrap();
        let moved = c.orbit(&pivot, 0.3, -0.1);
        moved.validate().unwrap();
        let (px, _) = moved.project_world(&c.to_world(&pivot)).unwrap();
        assert_relative_eq!(px.x, c.cx, epsilon = 1e-9);
        assert_relative_eq!(px.y, c.cy, epsilon = 1e-9);
    }

    #[test]
    fn orbit_angles_round_trip() {
        let o = orbit_rotation(0.4, -0.2);
        let (yaw, pitch) = orbit_angles(&o).unwrap();
        assert_relative_eq!(yaw, 0.4, epsilon = 1e-12);
        assert_relative_eq!(pitch, -0.2, epsilon = 1e-12);
    }

    #[test]
    fn rigid_inverse_composes_to_identity() {
        let t = RigidTransform {
            rotation: orbit_rotation(0.2, 0.5),
            translation: Vector3::new(1.0, -2.0, 0.5),
        };
        let id = t.compose(&t.inverse());
        assert_relative_eq!(id.rotation, Matrix3::identity(), epsilon = 1e-12);
        assert_relative_eq!(id.translation, Vector3::zeros(), epsilon = 1e-12);
    }
}
