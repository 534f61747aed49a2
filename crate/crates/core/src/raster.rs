//! Software Z-buffer rasterization.
//!
//! Triangles are clipped against the near plane in camera space and scan
//! converted over pixel centers with a top-left fill rule, so meshes that
//! share edges rasterize without cracks or double coverage. Attributes are
//! interpolated perspective-correctly. Rows are processed in parallel bands;
//! every pixel visits triangles in mesh order, so the output does not depend
//! on the band layout.

use nalgebra::Vector4;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Camera, Mesh, Vec3};
use crate::grid::{DepthMap, Grid, Image, PositionMap, Rgb, VisibilityMap};

const BAND_ROWS: usize = 16;
pub const NO_FACE: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Culling {
    #[default]
    Backface,
    None,
}

/// Visible fragment per pixel: depth, face and perspective-correct
/// barycentric coordinates with respect to that face.
#[derive(Debug, Clone)]
pub struct Fragments {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<f64>,
    pub face: Vec<u32>,
    pub bary: Vec<[f64; 3]>,
}

impl Fragments {
    pub fn is_foreground(&self, idx: usize) -> bool {
        self.face[idx] != NO_FACE
    }

    pub fn position(&self, mesh: &Mesh, idx: usize) -> Option<Vec3> {
        let f = self.face[idx];
        if f == NO_FACE {
            return None;
        }
        let [a, b, c] = mesh.faces[f as usize];
        let w = self.bary[idx];
        Some(mesh.vertices[a] * w[0] + mesh.vertices[b] * w[1] + mesh.vertices[c] * w[2])
    }
}

#[derive(Clone, Copy)]
struct ScreenVertex {
    x: f64,
    y: f64,
    inv_depth: f64,
    /// Barycentric coordinates with respect to the source face.
    bary: [f64; 3],
}

struct ScreenTri {
    face: u32,
    v: [ScreenVertex; 3],
    area2: f64,
    rows: (usize, usize),
    cols: (usize, usize),
}

/// Clips a camera-space triangle against `depth >= near`; returns a convex
/// polygon of (camera-space point, barycentric) pairs.
fn clip_near(cs: [Vec3; 3], near: f64) -> Vec<(Vec3, [f64; 3])> {
    let bary = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    let depth = |p: &Vec3| -p.z;
    let mut out = Vec::with_capacity(4);
    for i in 0..3 {
        let j = (i + 1) % 3;
        let (pi, pj) = (cs[i], cs[j]);
        let (di, dj) = (depth(&pi), depth(&pj));
        if di >= near {
            out.push((pi, bary[i]));
        }
        if (di >= near) != (dj >= near) {
            let t = (near - di) / (dj - di);
            let mut b = [0.0; 3];
            for k in 0..3 {
                b[k] = bary[i][k] + t * (bary[j][k] - bary[i][k]);
            }
            out.push((pi + (pj - pi) * t, b));
        }
    }
    out
}

fn setup(mesh: &Mesh, cam: &Camera, culling: Culling) -> Vec<ScreenTri> {
    let view = cam.view_matrix();
    let proj = cam.projection();
    let focal = proj.focal();
    let res = proj.resolution as f64;
    let cam_space: Vec<Vec3> = mesh
        .vertices
        .iter()
        .map(|v| (view * Vector4::new(v.x, v.y, v.z, 1.0)).xyz())
        .collect();
    mesh.faces
        .par_iter()
        .enumerate()
        .flat_map_iter(|(fi, &[a, b, c])| {
            let cs = [cam_space[a], cam_space[b], cam_space[c]];
            let normal = (cs[1] - cs[0]).cross(&(cs[2] - cs[0]));
            let facing = normal.dot(&cs[0]) < 0.0;
            let mut tris = Vec::new();
            if culling == Culling::Backface && !facing {
                return tris.into_iter();
            }
            let poly = clip_near(cs, proj.near);
            if poly.len() < 3 {
                return tris.into_iter();
            }
            let sv: Vec<ScreenVertex> = poly
                .iter()
                .map(|(p, bary)| {
                    let d = -p.z;
                    ScreenVertex {
                        x: (focal * p.x / d + 1.0) * 0.5 * res,
                        y: (focal * p.y / d + 1.0) * 0.5 * res,
                        inv_depth: 1.0 / d,
                        bary: *bary,
                    }
                })
                .collect();
            for k in 1..sv.len() - 1 {
                let mut v = [sv[0], sv[k], sv[k + 1]];
                let mut area2 =
                    (v[1].x - v[0].x) * (v[2].y - v[0].y) - (v[1].y - v[0].y) * (v[2].x - v[0].x);
                if area2 == 0.0 || !area2.is_finite() {
                    continue;
                }
                if area2 < 0.0 {
                    v.swap(1, 2);
                    area2 = -area2;
                }
                let (xmin, xmax) = (
                    v[0].x.min(v[1].x).min(v[2].x),
                    v[0].x.max(v[1].x).max(v[2].x),
                );
                let (ymin, ymax) = (
                    v[0].y.min(v[1].y).min(v[2].y),
                    v[0].y.max(v[1].y).max(v[2].y),
                );
                // Pixel col j covers center x = j + 0.5; row i has center y = res - i - 0.5.
                let col_lo = (xmin - 0.5).ceil().max(0.0);
                let col_hi = (xmax - 0.5).floor().min(res - 1.0);
                let row_lo = (res - ymax - 0.5).ceil().max(0.0);
                let row_hi = (res - ymin - 0.5).floor().min(res - 1.0);
                if col_lo > col_hi || row_lo > row_hi {
                    continue;
                }
                tris.push(ScreenTri {
                    face: fi as u32,
                    v,
                    area2,
                    rows: (row_lo as usize, row_hi as usize),
                    cols: (col_lo as usize, col_hi as usize),
                });
            }
            tris.into_iter()
        })
        .collect()
}

#[inline]
fn edge(a: &ScreenVertex, b: &ScreenVertex, px: f64, py: f64) -> f64 {
    (b.x - a.x) * (py - a.y) - (b.y - a.y) * (px - a.x)
}

#[inline]
fn top_left(a: &ScreenVertex, b: &ScreenVertex) -> bool {
    (a.y == b.y && b.x < a.x) || b.y < a.y
}

/// Rasterizes `mesh` from `cam`, keeping the nearest fragment per pixel.
pub fn rasterize(mesh: &Mesh, cam: &Camera, culling: Culling) -> Fragments {
    let res = cam.resolution;
    let far = cam.far;
    let tris = setup(mesh, cam, culling);
    let mut depth = vec![f64::INFINITY; res * res];
    let mut face = vec![NO_FACE; res * res];
    let mut bary = vec![[0.0; 3]; res * res];
    depth
        .par_chunks_mut(BAND_ROWS * res)
        .zip(face.par_chunks_mut(BAND_ROWS * res))
        .zip(bary.par_chunks_mut(BAND_ROWS * res))
        .enumerate()
        .for_each(|(band, ((depth, face), bary))| {
            let r0 = band * BAND_ROWS;
            let r1 = (r0 + BAND_ROWS).min(res) - 1;
            for t in &tris {
                if t.rows.1 < r0 || t.rows.0 > r1 {
                    continue;
                }
                let [a, b, c] = &t.v;
                let tl = [top_left(b, c), top_left(c, a), top_left(a, b)];
                for row in t.rows.0.max(r0)..=t.rows.1.min(r1) {
                    let py = res as f64 - row as f64 - 0.5;
                    for col in t.cols.0..=t.cols.1 {
                        let px = col as f64 + 0.5;
                        let e = [edge(b, c, px, py), edge(c, a, px, py), edge(a, b, px, py)];
                        if (0..3).any(|k| e[k] < 0.0 || (e[k] == 0.0 && !tl[k])) {
                            continue;
                        }
                        let l = [e[0] / t.area2, e[1] / t.area2, e[2] / t.area2];
                        let w = [l[0] * a.inv_depth, l[1] * b.inv_depth, l[2] * c.inv_depth];
                        let inv = w[0] + w[1] + w[2];
                        let d = 1.0 / inv;
                        if d > far {
                            continue;
                        }
                        let idx = (row - r0) * res + col;
                        if d < depth[idx] {
                            depth[idx] = d;
                            face[idx] = t.face;
                            let mut fb = [0.0; 3];
                            for (k, v) in [a, b, c].iter().enumerate() {
                                let s = w[k] / inv;
                                for m in 0..3 {
                                    fb[m] += s * v.bary[m];
                                }
                            }
                            bary[idx] = fb;
                        }
                    }
                }
            }
        });
    Fragments {
        width: res,
        height: res,
        depth,
        face,
        bary,
    }
}

pub fn depth_from(frags: &Fragments) -> DepthMap {
    Grid {
        width: frags.width,
        height: frags.height,
        data: frags.depth.clone(),
    }
}

pub fn render_depth(mesh: &Mesh, cam: &Camera, culling: Culling) -> DepthMap {
    depth_from(&rasterize(mesh, cam, culling))
}

pub fn position_from(frags: &Fragments, mesh: &Mesh) -> PositionMap {
    Grid {
        width: frags.width,
        height: frags.height,
        data: (0..frags.face.len())
            .map(|i| frags.position(mesh, i))
            .collect(),
    }
}

pub fn render_position(mesh: &Mesh, cam: &Camera) -> PositionMap {
    position_from(&rasterize(mesh, cam, Culling::Backface), mesh)
}

#[inline]
fn facing_score(normal: &Vec3, p: &Vec3, eye: &Vec3) -> f64 {
    let dir = (p - eye).normalize();
    (-normal.dot(&dir)).clamp(0.0, 1.0)
}

/// Visibility from interpolated vertex normals (renormalized per fragment).
pub fn visibility_from(frags: &Fragments, mesh: &Mesh, cam: &Camera) -> Result<VisibilityMap> {
    let normals = mesh
        .normals
        .as_ref()
        .ok_or(Error::MissingAttribute("vertex normals"))?;
    let eye = cam.position();
    let data = (0..frags.face.len())
        .into_par_iter()
        .map(|i| {
            let Some(p) = frags.position(mesh, i) else {
                return 0.0;
            };
            let [a, b, c] = mesh.faces[frags.face[i] as usize];
            let w = frags.bary[i];
            let n = normals[a] * w[0] + normals[b] * w[1] + normals[c] * w[2];
            let len = n.norm();
            if len == 0.0 {
                return 0.0;
            }
            facing_score(&(n / len), &p, &eye)
        })
        .collect();
    Ok(Grid {
        width: frags.width,
        height: frags.height,
        data,
    })
}

/// Visibility from flat face normals, for meshes without vertex normals.
pub fn facet_visibility_from(frags: &Fragments, mesh: &Mesh, cam: &Camera) -> VisibilityMap {
    let eye = cam.position();
    let data = (0..frags.face.len())
        .into_par_iter()
        .map(|i| match frags.position(mesh, i) {
            Some(p) => facing_score(&mesh.face_normal(frags.face[i] as usize), &p, &eye),
            None => 0.0,
        })
        .collect();
    Grid {
        width: frags.width,
        height: frags.height,
        data,
    }
}

/// Per-pixel `clamp(-n . d, 0, 1)` with `d` the unit ray from the camera to
/// the fragment. Requires vertex normals.
pub fn render_visibility(mesh: &Mesh, cam: &Camera) -> Result<VisibilityMap> {
    visibility_from(&rasterize(mesh, cam, Culling::Backface), mesh, cam)
}

pub fn color_from(frags: &Fragments, mesh: &Mesh, background: Rgb) -> Result<Image> {
    let colors = mesh
        .colors
        .as_ref()
        .ok_or(Error::MissingAttribute("vertex colors"))?;
    let data = (0..frags.face.len())
        .into_par_iter()
        .map(|i| {
            let f = frags.face[i];
            if f == NO_FACE {
                return background;
            }
            let [a, b, c] = mesh.faces[f as usize];
            let w = frags.bary[i];
            let mut out = [0.0f32; 3];
            for k in 0..3 {
                out[k] = (colors[a][k] as f64 * w[0]
                    + colors[b][k] as f64 * w[1]
                    + colors[c][k] as f64 * w[2]) as f32;
            }
            out
        })
        .collect();
    Ok(Grid {
        width: frags.width,
        height: frags.height,
        data,
    })
}

/// Barycentric vertex-color rendering on a black background.
pub fn render_color(mesh: &Mesh, cam: &Camera) -> Result<Image> {
    color_from(&rasterize(mesh, cam, Culling::Backface), mesh, [0.0; 3])
}

/// Depth, visibility and positions of one view, from a single rasterization.
#[derive(Debug, Clone)]
pub struct ViewMaps {
    pub depth: DepthMap,
    pub visibility: VisibilityMap,
    pub position: PositionMap,
}

/// Renders all per-view maps. Visibility uses vertex normals when the mesh
/// has them and flat face normals otherwise.
pub fn render_maps(mesh: &Mesh, cam: &Camera, culling: Culling) -> ViewMaps {
    let frags = rasterize(mesh, cam, culling);
    let visibility = match visibility_from(&frags, mesh, cam) {
        Ok(v) => v,
        Err(_) => facet_visibility_from(&frags, mesh, cam),
    };
    ViewMaps {
        depth: depth_from(&frags),
        position: position_from(&frags, mesh),
        visibility,
    }
}
