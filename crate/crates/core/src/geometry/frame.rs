use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Mesh, Vec3};

/// Orientation of an asset plus the centering/scaling applied to fit it in
/// the unit sphere.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneFrame {
    pub up: Vec3,
    pub front: Vec3,
    pub center_offset: Vec3,
    pub scale: f64,
}

impl Default for SceneFrame {
    fn default() -> Self {
        SceneFrame {
            up: Vec3::y(),
            front: -Vec3::z(),
            center_offset: Vec3::zeros(),
            scale: 1.0,
        }
    }
}

impl SceneFrame {
    /// Orthonormalizes `front` against `up`.
    pub fn new(up: Vec3, front: Vec3) -> Result<Self> {
        let up_n = up.norm();
        if !(up_n > 1e-12) {
            return Err(Error::Config("up vector is zero".into()));
        }
        let up = up / up_n;
        let front = front - up * up.dot(&front);
        let fn_ = front.norm();
        if !(fn_ > 1e-9) {
            return Err(Error::Config("front vector is parallel to up".into()));
        }
        Ok(SceneFrame {
            up,
            front: front / fn_,
            ..Default::default()
        })
    }

    /// Rotation taking `up` to +Y and `front` to -Z.
    pub fn rotation(&self) -> Matrix3<f64> {
        let back = -self.front;
        let x = self.up.cross(&back);
        Matrix3::from_rows(&[x.transpose(), self.up.transpose(), back.transpose()])
    }

    /// Maps an input-space point into the normalized scene.
    pub fn apply(&self, p: &Vec3) -> Vec3 {
        (self.rotation() * p + self.center_offset) * self.scale
    }
}

/// Rotates, centers (bounding box) and scales `mesh` so that its farthest
/// vertex lies on the unit sphere.
pub fn normalize(mesh: &Mesh, frame: &SceneFrame) -> Result<Mesh> {
    normalize_with_frame(mesh, frame).map(|(m, _)| m)
}

/// As [`normalize`], also returning the fitted frame.
pub fn normalize_with_frame(mesh: &Mesh, frame: &SceneFrame) -> Result<(Mesh, SceneFrame)> {
    if mesh.is_empty() {
        return Err(Error::EmptyMesh);
    }
    let frame = SceneFrame::new(frame.up, frame.front)?;
    let rot = frame.rotation();
    let rotated: Vec<Vec3> = mesh.vertices.iter().map(|v| rot * v).collect();
    let (lo, hi) = rotated
        .iter()
        .fold((rotated[0], rotated[0]), |(lo, hi), v| {
            (lo.inf(v), hi.sup(v))
        });
    let center = (lo + hi) * 0.5;
    let radius = rotated
        .iter()
        .map(|v| (v - center).norm())
        .fold(0.0f64, f64::max);
    if !(radius > 1e-12) {
        return Err(Error::Degenerate("geometry has zero extent".into()));
    }
    let scale = 1.0 / radius;
    let vertices = rotated.iter().map(|v| (v - center) * scale).collect();
    let normals = mesh
        .normals
        .as_ref()
        .map(|ns| ns.iter().map(|n| (rot * n).normalize()).collect());
    let out = Mesh::new(vertices, mesh.faces.clone(), normals, mesh.colors.clone())?;
    Ok((
        out,
        SceneFrame {
            center_offset: -center,
            scale,
            ..frame
        },
    ))
}
