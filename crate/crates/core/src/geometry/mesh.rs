use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::grid::Rgb;

/// Indexed triangle surface with optional per-vertex normals and colors.
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[usize; 3]>,
    pub normals: Option<Vec<Vec3>>,
    pub colors: Option<Vec<Rgb>>,
}

impl Mesh {
    /// Builds a mesh and checks its invariants.
    pub fn new(
        vertices: Vec<Vec3>,
        faces: Vec<[usize; 3]>,
        normals: Option<Vec<Vec3>>,
        colors: Option<Vec<Rgb>>,
    ) -> Result<Self> {
        let mesh = Mesh {
            vertices,
            faces,
            normals,
            colors,
        };
        mesh.validate()?;
        Ok(mesh)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len();
        for f in &self.faces {
            for &i in f {
                if i >= n {
                    return Err(Error::IndexOutOfRange { index: i, count: n });
                }
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(Error::InvalidMesh(format!("degenerate face {f:?}")));
            }
        }
        if let Some(normals) = &self.normals {
            if normals.len() != n {
                return Err(Error::InvalidMesh(format!(
                    "{} normals for {n} vertices",
                    normals.len()
                )));
            }
            if let Some(bad) = normals.iter().position(|v| (v.norm() - 1.0).abs() > 1e-6) {
                return Err(Error::InvalidMesh(format!(
                    "normal {bad} is not unit length"
                )));
            }
        }
        if let Some(colors) = &self.colors {
            if colors.len() != n {
                return Err(Error::InvalidMesh(format!(
                    "{} colors for {n} vertices",
                    colors.len()
                )));
            }
            if colors.iter().flatten().any(|c| !(0.0..=1.0).contains(c)) {
                return Err(Error::InvalidMesh("vertex color outside [0,1]".into()));
            }
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn corners(&self, face: usize) -> [Vec3; 3] {
        let [a, b, c] = self.faces[face];
        [self.vertices[a], self.vertices[b], self.vertices[c]]
    }

    /// Unnormalized geometric normal (twice the area vector).
    pub fn face_cross(&self, face: usize) -> Vec3 {
        let [a, b, c] = self.corners(face);
        (b - a).cross(&(c - a))
    }

    pub fn face_normal(&self, face: usize) -> Vec3 {
        let n = self.face_cross(face);
        let len = n.norm();
        if len > 0.0 {
            n / len
        } else {
            Vec3::zeros()
        }
    }

    pub fn face_area(&self, face: usize) -> f64 {
        0.5 * self.face_cross(face).norm()
    }

    pub fn total_area(&self) -> f64 {
        (0..self.faces.len()).map(|f| self.face_area(f)).sum()
    }

    /// Axis-aligned bounds `(min, max)`; `None` for an empty mesh.
    pub fn bounds(&self) -> Option<(Vec3, Vec3)> {
        let first = *self.vertices.first()?;
        Some(
            self.vertices
                .iter()
                .fold((first, first), |(lo, hi), v| (lo.inf(v), hi.sup(v))),
        )
    }

    /// Area-weighted vertex normals from face geometry.
    pub fn compute_vertex_normals(&self) -> Vec<Vec3> {
        let mut acc = vec![Vec3::zeros(); self.vertices.len()];
        for (fi, f) in self.faces.iter().enumerate() {
            let n = self.face_cross(fi);
            for &v in f {
                acc[v] += n;
            }
        }
        acc.into_iter()
            .map(|n| {
                let len = n.norm();
                if len > 0.0 {
                    n / len
                } else {
                    Vec3::y()
                }
            })
            .collect()
    }

    pub fn with_colors(mut self, colors: Vec<Rgb>) -> Result<Self> {
        self.colors = Some(colors);
        self.validate()?;
        Ok(self)
    }
}
