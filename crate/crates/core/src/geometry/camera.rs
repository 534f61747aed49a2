use nalgebra::{Matrix3, Matrix4, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec3;

pub const DEFAULT_NEAR: f64 = 0.01;
pub const DEFAULT_FAR: f64 = 10.0;

/// Pinhole intrinsics shared by every view of a run. NDC spans `[-1,1]` in
/// x and y (y up) and `[0,1]` in z from the near to the far plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub fov_y: f64,
    pub resolution: usize,
    pub near: f64,
    pub far: f64,
}

impl Projection {
    pub fn focal(&self) -> f64 {
        1.0 / (self.fov_y.to_radians() * 0.5).tan()
    }

    /// Camera space (looking down -Z) to clip space.
    pub fn matrix(&self) -> Matrix4<f64> {
        let f = self.focal();
        let (n, fa) = (self.near, self.far);
        let a = -fa / (fa - n);
        let b = -fa * n / (fa - n);
        Matrix4::new(
            f, 0.0, 0.0, 0.0, //
            0.0, f, 0.0, 0.0, //
            0.0, 0.0, a, b, //
            0.0, 0.0, -1.0, 0.0,
        )
    }

    /// Closed-form inverse of [`Projection::matrix`].
    pub fn inverse_matrix(&self) -> Matrix4<f64> {
        let f = self.focal();
        let (n, fa) = (self.near, self.far);
        let a = -fa / (fa - n);
        let b = -fa * n / (fa - n);
        Matrix4::new(
            1.0 / f,
            0.0,
            0.0,
            0.0,
            0.0,
            1.0 / f,
            0.0,
            0.0,
            0.0,
            0.0,
            0.0,
            -1.0,
            0.0,
            0.0,
            1.0 / b,
            a / b,
        )
    }

    pub fn z_ndc(&self, depth: f64) -> f64 {
        self.far * (depth - self.near) / (depth * (self.far - self.near))
    }

    pub fn depth_from_z_ndc(&self, z: f64) -> f64 {
        self.far * self.near / (self.far - z * (self.far - self.near))
    }

    /// NDC of the center of pixel `(row, col)`.
    pub fn pixel_center_ndc(&self, row: usize, col: usize) -> (f64, f64) {
        let r = self.resolution as f64;
        (
            (2.0 * col as f64 + 1.0) / r - 1.0,
            1.0 - (2.0 * row as f64 + 1.0) / r,
        )
    }

    /// Continuous pixel coordinates `(u, v)` = `(col, row)` of an NDC point,
    /// with pixel centers at integers.
    pub fn ndc_to_pixel(&self, x: f64, y: f64) -> (f64, f64) {
        let r = self.resolution as f64;
        ((x + 1.0) * 0.5 * r - 0.5, (1.0 - y) * 0.5 * r - 0.5)
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution == 0 {
            return Err(Error::InvalidCamera("resolution must be positive".into()));
        }
        if !(self.fov_y > 0.0 && self.fov_y < 180.0) {
            return Err(Error::InvalidCamera(format!(
                "fov_y {} outside (0, 180)",
                self.fov_y
            )));
        }
        if !(self.near > 0.0 && self.far > self.near) {
            return Err(Error::InvalidCamera(format!(
                "near/far {}/{} invalid",
                self.near, self.far
            )));
        }
        Ok(())
    }
}

/// Camera on a sphere around the origin, looking at the origin. Angles are
/// in degrees; azimuth 0 / elevation 0 sits on +Z looking down -Z and
/// azimuth 90 sits on +X.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub azimuth: f64,
    pub elevation: f64,
    pub radius: f64,
    pub fov_y: f64,
    pub resolution: usize,
    #[serde(default = "default_near")]
    pub near: f64,
    #[serde(default = "default_far")]
    pub far: f64,
}

fn default_near() -> f64 {
    DEFAULT_NEAR
}

fn default_far() -> f64 {
    DEFAULT_FAR
}

/// Unit-radius camera with default clip planes.
pub fn camera_on_sphere(
    azimuth: f64,
    elevation: f64,
    fov_y: f64,
    resolution: usize,
) -> Result<Camera> {
    Camera::new(azimuth, elevation, 1.0, fov_y, resolution)
}

impl Camera {
    pub fn new(
        azimuth: f64,
        elevation: f64,
        radius: f64,
        fov_y: f64,
        resolution: usize,
    ) -> Result<Camera> {
        if !(-90.0..=90.0).contains(&elevation) {
            return Err(Error::InvalidCamera(format!(
                "elevation {elevation} outside [-90, 90]"
            )));
        }
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(Error::InvalidCamera(format!(
                "radius {radius} must be positive"
            )));
        }
        if !azimuth.is_finite() {
            return Err(Error::InvalidCamera("azimuth must be finite".into()));
        }
        let cam = Camera {
            azimuth: azimuth.rem_euclid(360.0),
            elevation,
            radius,
            fov_y,
            resolution,
            near: DEFAULT_NEAR,
            far: DEFAULT_FAR,
        };
        cam.projection().validate()?;
        Ok(cam)
    }

    pub fn with_clip(mut self, near: f64, far: f64) -> Result<Camera> {
        self.near = near;
        self.far = far;
        self.projection().validate()?;
        Ok(self)
    }

    pub fn projection(&self) -> Projection {
        Projection {
            fov_y: self.fov_y,
            resolution: self.resolution,
            near: self.near,
            far: self.far,
        }
    }

    pub fn position(&self) -> Vec3 {
        let (az, el) = (self.azimuth.to_radians(), self.elevation.to_radians());
        self.radius * Vec3::new(el.cos() * az.sin(), el.sin(), el.cos() * az.cos())
    }

    /// Orthonormal `(right, up, forward)` frame; `forward` points at the origin.
    pub fn basis(&self) -> (Vec3, Vec3, Vec3) {
        let forward = -self.position().normalize();
        let world_up = if forward.cross(&Vec3::y()).norm() < 1e-9 {
            // Looking straight up or down: roll so that azimuth 0 keeps -Z as up.
            let az = self.azimuth.to_radians();
            -Vec3::new(az.sin(), 0.0, az.cos()) * self.elevation.signum()
        } else {
            Vec3::y()
        };
        let right = forward.cross(&world_up).normalize();
        let up = right.cross(&forward);
        (right, up, forward)
    }

    /// World to camera transform (camera looks down its -Z axis).
    pub fn view_matrix(&self) -> Matrix4<f64> {
        let (r, u, f) = self.basis();
        let rot = Matrix3::from_rows(&[r.transpose(), u.transpose(), (-f).transpose()]);
        let t = -(rot * self.position());
        let mut m = rot.to_homogeneous();
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        m
    }

    /// Camera to world transform, the closed-form inverse of the view matrix.
    pub fn camera_to_world(&self) -> Matrix4<f64> {
        let (r, u, f) = self.basis();
        let rot = Matrix3::from_columns(&[r, u, -f]);
        let mut m = rot.to_homogeneous();
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.position());
        m
    }

    /// World to clip space.
    pub fn world_to_clip(&self) -> Matrix4<f64> {
        self.projection().matrix() * self.view_matrix()
    }

    /// Distance of `p` along the optical axis.
    pub fn depth_of(&self, p: &Vec3) -> f64 {
        let (_, _, f) = self.basis();
        f.dot(&(p - self.position()))
    }

    /// NDC of a world point together with its view-space depth; `None` when
    /// the point is behind the camera.
    pub fn project(&self, p: &Vec3) -> Option<(Vec3, f64)> {
        let clip = self.world_to_clip() * Vector4::new(p.x, p.y, p.z, 1.0);
        if clip.w <= 0.0 {
            return None;
        }
        Some((
            Vec3::new(clip.x / clip.w, clip.y / clip.w, clip.z / clip.w),
            clip.w,
        ))
    }

    /// World point at NDC `(x, y)` and view-space depth.
    pub fn unproject(&self, x: f64, y: f64, depth: f64) -> Vec3 {
        let (r, u, f) = self.basis();
        let focal = self.projection().focal();
        self.position() + r * (x * depth / focal) + u * (y * depth / focal) + f * depth
    }

    /// Unit ray direction from the camera through NDC `(x, y)`.
    pub fn ray_direction(&self, x: f64, y: f64) -> Vec3 {
        (self.unproject(x, y, 1.0) - self.position()).normalize()
    }
}
