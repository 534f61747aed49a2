//! View-invariant surface color field fused from painted views, plus a
//! dataset adapter for external radiance-field tools.
//!
//! Surface samples are projected into every painted view; a sample takes
//! the weighted mean of the views that see it unoccluded, weighted by how
//! frontally each view sees the sample.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Camera, Mesh, Vec3};
use crate::grid::{
    bilinear_taps, decode_depth, decode_unit16, depth_range, encode_depth, encode_unit16,
    load_gray16_png, load_rgb_png, save_gray16_png, save_rgb_png, write_atomic, DepthSampler, Grid,
    Image, Rgb,
};
use crate::raster::{rasterize, Culling};
use crate::remap::{PaintedView, ViewStatus};
use crate::spatial::KdTree;

/// Largest distance from a sample to the surface point of a tap used for
/// its color, in pixel footprints at the sample's depth.
const REACH_PIXELS: f64 = 2.0;

/// Lookup weights fall off with squared distance on this fraction of the
/// squared distance to the k-th neighbour.
const LOOKUP_FALLOFF: f64 = 0.1;

/// 200k samples on a unit sphere.
pub const DEFAULT_DENSITY: f64 = 200_000.0 / (4.0 * std::f64::consts::PI);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionParams {
    /// Depth agreement needed to accept a view, scene units.
    pub tolerance: f64,
    /// Exponent on the facing score.
    pub exponent: f64,
    /// Neighbours used when rendering the field.
    pub k: usize,
}

impl Default for FusionParams {
    fn default() -> Self {
        FusionParams {
            tolerance: 5e-3,
            exponent: 2.0,
            k: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfaceSample {
    pub position: Vec3,
    pub normal: Vec3,
    pub face: usize,
    pub color: Rgb,
    pub confidence: f64,
}

#[derive(Debug, Clone)]
pub struct SurfaceColorField {
    pub samples: Vec<SurfaceSample>,
    pub colored: bool,
    tree: KdTree,
}

impl SurfaceColorField {
    pub fn from_samples(samples: Vec<SurfaceSample>, colored: bool) -> Self {
        let tree = KdTree::new(samples.iter().map(|s| s.position).collect());
        SurfaceColorField {
            samples,
            colored,
            tree,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    fn require_colored(&self) -> Result<()> {
        if self.colored && !self.samples.is_empty() {
            Ok(())
        } else {
            Err(Error::Fusion("color field has not been fused yet".into()))
        }
    }

    /// Confidence-weighted mean over the `k` nearest samples; uniform when
    /// all of them have zero confidence. Also returns the nearest squared
    /// distance.
    pub fn lookup(&self, p: &Vec3, k: usize) -> Result<(Rgb, f64)> {
        self.require_colored()?;
        let near = self.tree.nearest(p, k.max(1));
        let scale2 = (LOOKUP_FALLOFF * near.last().map_or(0.0, |n| n.1)).max(f64::MIN_POSITIVE);
        let weight = |i: usize, d2: f64| self.samples[i].confidence / (1.0 + d2 / scale2);
        let wsum: f64 = near.iter().map(|&(i, d2)| weight(i, d2)).sum();
        let mut acc = [0.0f64; 3];
        for &(i, d2) in &near {
            let s = &self.samples[i];
            let w = if wsum > 0.0 {
                weight(i, d2) / wsum
            } else {
                1.0 / near.len() as f64
            };
            for c in 0..3 {
                acc[c] += w * s.color[c] as f64;
            }
        }
        Ok((acc.map(|v| v.clamp(0.0, 1.0) as f32), near[0].1))
    }

    /// Writes the samples as a binary point PLY with colors and confidence.
    pub fn save_ply(&self, path: &Path) -> Result<()> {
        let mut out = format!(
            "ply\nformat binary_little_endian 1.0\nelement vertex {}\n\
             property double x\nproperty double y\nproperty double z\n\
             property float nx\nproperty float ny\nproperty float nz\n\
             property uchar red\nproperty uchar green\nproperty uchar blue\n\
             property float confidence\nend_header\n",
            self.samples.len()
        )
        .into_bytes();
        for s in &self.samples {
            for v in s.position.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
            for v in s.normal.iter() {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
            out.extend(s.color.iter().map(|c| crate::grid::quantize_u8(*c)));
            out.extend_from_slice(&(s.confidence as f32).to_le_bytes());
        }
        write_atomic(path, &out)
    }

    /// Reads a file written by [`Self::save_ply`]. Colors come back
    /// quantized to 8 bits; face indices are not stored.
    pub fn load_ply(path: &Path) -> Result<SurfaceColorField> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |m: &str| Error::parse(path, m.to_string());
        let end = b"end_header\n";
        let split = bytes
            .windows(end.len())
            .position(|w| w == end)
            .ok_or_else(|| bad("missing end_header"))?
            + end.len();
        let header = std::str::from_utf8(&bytes[..split]).map_err(|_| bad("header is not text"))?;
        let expected = "property double x\nproperty double y\nproperty double z\n\
             property float nx\nproperty float ny\nproperty float nz\n\
             property uchar red\nproperty uchar green\nproperty uchar blue\n\
             property float confidence\nend_header\n";
        if !header.starts_with("ply\nformat binary_little_endian 1.0\n")
            || !header.ends_with(expected)
        {
            return Err(bad("not a color field file"));
        }
        let n: usize = header
            .lines()
            .find_map(|l| l.strip_prefix("element vertex "))
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| bad("missing vertex count"))?;
        const STRIDE: usize = 24 + 12 + 3 + 4;
        let body = &bytes[split..];
        if body.len() != n * STRIDE {
            return Err(bad(&format!(
                "expected {} body bytes, found {}",
                n * STRIDE,
                body.len()
            )));
        }
        let f64_at = |r: &[u8], o: usize| f64::from_le_bytes(r[o..o + 8].try_into().unwrap());
        let f32_at =
            |r: &[u8], o: usize| f32::from_le_bytes(r[o..o + 4].try_into().unwrap()) as f64;
        let samples = body
            .chunks_exact(STRIDE)
            .map(|r| SurfaceSample {
                position: Vec3::new(f64_at(r, 0), f64_at(r, 8), f64_at(r, 16)),
                normal: Vec3::new(f32_at(r, 24), f32_at(r, 28), f32_at(r, 32)),
                face: usize::MAX,
                color: [r[36], r[37], r[38]].map(|c| c as f32 / 255.0),
                confidence: f32_at(r, 39),
            })
            .collect();
        Ok(SurfaceColorField::from_samples(samples, true))
    }
}

/// Area-weighted uniform samples, `round(density * area)` of them.
pub fn sample_surface(mesh: &Mesh, density: f64, seed: u64) -> Result<SurfaceColorField> {
    if !(density > 0.0) {
        return Err(Error::Config(format!(
            "sample density {density} must be positive"
        )));
    }
    let areas: Vec<f64> = (0..mesh.faces.len()).map(|f| mesh.face_area(f)).collect();
    let total: f64 = areas.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Degenerate("mesh has zero surface area".into()));
    }
    let n = (density * total).round() as usize;
    let mut cdf = Vec::with_capacity(areas.len());
    let mut acc = 0.0;
    for a in &areas {
        acc += a;
        cdf.push(acc);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let x = rng.random::<f64>() * total;
        let mut face = cdf.partition_point(|&c| c <= x).min(areas.len() - 1);
        while areas[face] == 0.0 {
            face = (face + 1) % areas.len();
        }
        let (r1, r2): (f64, f64) = (rng.random(), rng.random());
        let s = r1.sqrt();
        let b = [1.0 - s, s * (1.0 - r2), s * r2];
        let [i, j, k] = mesh.faces[face];
        let v = &mesh.vertices;
        let position = v[i] * b[0] + v[j] * b[1] + v[k] * b[2];
        let normal = match &mesh.normals {
            Some(nm) => {
                let n = nm[i] * b[0] + nm[j] * b[1] + nm[k] * b[2];
                if n.norm() > 1e-12 {
                    n.normalize()
                } else {
                    mesh.face_normal(face)
                }
            }
            None => mesh.face_normal(face),
        };
        samples.push(SurfaceSample {
            position,
            normal,
            face,
            color: [0.0; 3],
            confidence: 0.0,
        });
    }
    Ok(SurfaceColorField::from_samples(samples, false))
}

/// One accepted observation of a sample: facing weight and the bilinear
/// color over the taps whose surface points lie near the sample.
fn observe(
    s: &SurfaceSample,
    view: &PaintedView,
    sampler: &DepthSampler<'_>,
    params: &FusionParams,
) -> Option<(f64, [f64; 3])> {
    let cam = &view.camera;
    let (ndc, depth) = cam.project(&s.position)?;
    let res = cam.resolution as f64;
    let limit = 1.0 - 1.0 / res;
    if ndc.x.abs() > limit || ndc.y.abs() > limit {
        return None;
    }
    let dir = (s.position - cam.position()).normalize();
    let facing = (-s.normal.dot(&dir)).clamp(0.0, 1.0);
    let w = facing.powf(params.exponent);
    if w <= 0.0 {
        return None;
    }
    let proj = cam.projection();
    let (u, v) = proj.ndc_to_pixel(ndc.x, ndc.y);
    sampler.agreeing_taps(u, v, depth, params.tolerance, true)?;

    // Taps whose surface point is farther than this would extrapolate
    // color across a grazing footprint.
    let reach = REACH_PIXELS * depth * 2.0 / (proj.focal() * res) + params.tolerance;
    let width = view.depth.width;
    let mut taps = Vec::with_capacity(4);
    for (i, b) in bilinear_taps(width, view.depth.height, u, v) {
        let d = view.depth.data[i];
        if b <= 0.0 || !d.is_finite() {
            continue;
        }
        let (x, y) = proj.pixel_center_ndc(i / width, i % width);
        let point = cam.unproject(x, y, d);
        if (point - s.position).norm() <= reach {
            taps.push((i, b));
        }
    }
    let total: f64 = taps.iter().map(|t| t.1).sum();
    if total <= 0.0 {
        return None;
    }
    let mut acc = [0.0f64; 3];
    for (i, tap) in taps {
        let p = view.color.data[i];
        for c in 0..3 {
            acc[c] += tap / total * p[c] as f64;
        }
    }
    Some((w, acc))
}

/// Colors every sample from the views. Results do not depend on view order.
pub fn fuse_views(
    field: &SurfaceColorField,
    views: &[PaintedView],
    params: &FusionParams,
) -> Result<SurfaceColorField> {
    if views.is_empty() {
        return Err(Error::Fusion("no views to fuse".into()));
    }
    let res = views[0].camera.resolution;
    if let Some(v) = views.iter().find(|v| {
        v.camera.resolution != res
            || (v.color.width, v.color.height) != (res, res)
            || (v.depth.width, v.depth.height) != (res, res)
    }) {
        return Err(Error::DimensionMismatch(format!(
            "view at azimuth {} does not match resolution {res}",
            v.camera.azimuth
        )));
    }
    let samplers: Vec<DepthSampler<'_>> = views
        .iter()
        .map(|v| DepthSampler::new(&v.depth, &v.camera.projection()))
        .collect();
    let mut samples: Vec<SurfaceSample> = field
        .samples
        .par_iter()
        .map(|s| {
            let mut obs: Vec<(f64, [f64; 3])> = views
                .iter()
                .zip(&samplers)
                .filter_map(|(v, ds)| observe(s, v, ds, params))
                .collect();
            // canonical summation order
            obs.sort_by(|a, b| {
                a.0.total_cmp(&b.0)
                    .then(a.1[0].total_cmp(&b.1[0]))
                    .then(a.1[1].total_cmp(&b.1[1]))
                    .then(a.1[2].total_cmp(&b.1[2]))
            });
            let wsum: f64 = obs.iter().map(|o| o.0).sum();
            let mut out = *s;
            out.confidence = wsum;
            out.color = [0.0; 3];
            if wsum > 0.0 {
                let mut acc = [0.0f64; 3];
                for (w, c) in &obs {
                    for k in 0..3 {
                        acc[k] += w * c[k];
                    }
                }
                out.color = acc.map(|a| (a / wsum).clamp(0.0, 1.0) as f32);
            }
            out
        })
        .collect();

    let seen: Vec<usize> = (0..samples.len())
        .filter(|&i| samples[i].confidence > 0.0)
        .collect();
    if seen.is_empty() {
        return Err(Error::Fusion(
            "no surface sample is visible in any view".into(),
        ));
    }
    if seen.len() < samples.len() {
        let tree = KdTree::new(seen.iter().map(|&i| samples[i].position).collect());
        let fills: Vec<(usize, Rgb)> = (0..samples.len())
            .into_par_iter()
            .filter(|&i| samples[i].confidence == 0.0)
            .map(|i| {
                let (j, _) = tree
                    .nearest_one(&samples[i].position)
                    .expect("non-empty tree");
                (i, samples[seen[j]].color)
            })
            .collect();
        for (i, c) in fills {
            samples[i].color = c;
        }
    }
    Ok(SurfaceColorField {
        samples,
        colored: true,
        tree: field.tree.clone(),
    })
}

/// Renders the field through the mesh; background is black.
pub fn render_fused(
    field: &SurfaceColorField,
    mesh: &Mesh,
    cam: &Camera,
    k: usize,
) -> Result<Image> {
    field.require_colored()?;
    let frags = rasterize(mesh, cam, Culling::Backface);
    let data = (0..frags.depth.len())
        .into_par_iter()
        .map(|i| match frags.position(mesh, i) {
            Some(p) => field.lookup(&p, k).map(|(c, _)| c),
            None => Ok([0.0; 3]),
        })
        .collect::<Result<Vec<_>>>()?;
    Grid::from_vec(frags.width, frags.height, data)
}

/// Which component reconciles the painted views.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ConsistencyKind {
    Builtin,
    /// Command template run on an exported dataset; `{dir}` is replaced by
    /// the dataset directory and renders are expected under `renders/`.
    External(String),
}

impl fmt::Display for ConsistencyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConsistencyKind::Builtin => f.write_str("builtin"),
            ConsistencyKind::External(cmd) => write!(f, "external:{cmd}"),
        }
    }
}

impl FromStr for ConsistencyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "builtin" {
            return Ok(ConsistencyKind::Builtin);
        }
        let cmd = s
            .strip_prefix("external-nerf:")
            .or_else(|| s.strip_prefix("external:"))
            .ok_or_else(|| Error::Config(format!("unknown consistency mode '{s}'")))?;
        if !cmd.contains("{dir}") {
            return Err(Error::Config(
                "external consistency command must contain {dir}".into(),
            ));
        }
        Ok(ConsistencyKind::External(cmd.to_string()))
    }
}

impl Serialize for ConsistencyKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ConsistencyKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?
            .parse()
            .map_err(serde::de::Error::custom)
    }
}

pub const TRANSFORMS_FILE: &str = "transforms.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetFrame {
    pub file_path: String,
    pub depth_path: String,
    pub visibility_path: String,
    /// Camera-to-world, row-major, camera looking down its local -Z.
    pub transform_matrix: [[f64; 4]; 4],
    pub fov_y: f64,
    pub azimuth: f64,
    pub elevation: f64,
    pub radius: f64,
    pub near: f64,
    pub far: f64,
    pub resolution: usize,
    pub depth_min: f64,
    pub depth_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    /// External tools must fit a view-independent color.
    pub view_dependent: bool,
    pub frames: Vec<DatasetFrame>,
}

fn frame_name(i: usize) -> String {
    format!("view_{i:03}.png")
}

/// Writes `images/`, `depth/` and `visibility/` PNGs plus `transforms.json`.
pub fn export_nerf_dataset(views: &[PaintedView], dir: &Path) -> Result<DatasetManifest> {
    if views.is_empty() {
        return Err(Error::Fusion("no views to export".into()));
    }
    for sub in ["images", "depth", "visibility"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut frames = Vec::with_capacity(views.len());
    for (i, v) in views.iter().enumerate() {
        let name = frame_name(i);
        let (lo, hi) = depth_range(&v.depth);
        save_rgb_png(&v.color, &dir.join("images").join(&name))?;
        save_gray16_png(
            &encode_depth(&v.depth, lo, hi),
            &dir.join("depth").join(&name),
        )?;
        save_gray16_png(
            &encode_unit16(&v.visibility),
            &dir.join("visibility").join(&name),
        )?;
        let m = v.camera.camera_to_world();
        let c = &v.camera;
        frames.push(DatasetFrame {
            file_path: format!("images/{name}"),
            depth_path: format!("depth/{name}"),
            visibility_path: format!("visibility/{name}"),
            transform_matrix: std::array::from_fn(|r| std::array::from_fn(|k| m[(r, k)])),
            fov_y: c.fov_y,
            azimuth: c.azimuth,
            elevation: c.elevation,
            radius: c.radius,
            near: c.near,
            far: c.far,
            resolution: c.resolution,
            depth_min: lo,
            depth_max: hi,
        });
    }
    let manifest = DatasetManifest {
        view_dependent: false,
        frames,
    };
    let path = dir.join(TRANSFORMS_FILE);
    let bytes =
        serde_json::to_vec_pretty(&manifest).map_err(|e| Error::parse(&path, e.to_string()))?;
    write_atomic(&path, &bytes)?;
    Ok(manifest)
}

fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(TRANSFORMS_FILE);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))
}

fn check_square(img_w: usize, img_h: usize, res: usize, what: &Path) -> Result<()> {
    if (img_w, img_h) == (res, res) {
        Ok(())
    } else {
        Err(Error::Schema(format!(
            "{} is {img_w}x{img_h}, expected {res}x{res}",
            what.display()
        )))
    }
}

/// Reads back an exported dataset.
pub fn import_nerf_dataset(dir: &Path) -> Result<Vec<PaintedView>> {
    let manifest = read_manifest(dir)?;
    manifest
        .frames
        .iter()
        .map(|f| {
            let camera = Camera::new(f.azimuth, f.elevation, f.radius, f.fov_y, f.resolution)?
                .with_clip(f.near, f.far)?;
            let color = load_rgb_png(&dir.join(&f.file_path))?;
            check_square(
                color.width,
                color.height,
                f.resolution,
                &dir.join(&f.file_path),
            )?;
            let depth = decode_depth(
                &load_gray16_png(&dir.join(&f.depth_path))?,
                f.depth_min,
                f.depth_max,
            );
            let visibility = decode_unit16(&load_gray16_png(&dir.join(&f.visibility_path))?);
            Ok(PaintedView {
                camera,
                color,
                depth,
                visibility,
                status: ViewStatus::Painted,
            })
        })
        .collect()
}

/// Replaces each view's colors by `renders/view_XXX.png` from an external
/// tool.
pub fn import_nerf_renders(dir: &Path, views: &[PaintedView]) -> Result<Vec<PaintedView>> {
    views
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let path = dir.join("renders").join(frame_name(i));
            if !path.exists() {
                return Err(Error::MissingView(i));
            }
            let color = load_rgb_png(&path)?;
            check_square(color.width, color.height, v.camera.resolution, &path)?;
            Ok(PaintedView {
                color,
                status: ViewStatus::Fused,
                ..v.clone()
            })
        })
        .collect()
}

/// Replaces each view's colors by renders of the field.
pub fn refresh_views(
    field: &SurfaceColorField,
    mesh: &Mesh,
    views: &mut [PaintedView],
    k: usize,
) -> Result<()> {
    for v in views.iter_mut() {
        v.color = render_fused(field, mesh, &v.camera, k)?;
        v.status = ViewStatus::Fused;
    }
    Ok(())
}

/// Logs a warning when samples are missing colors; used after fusion.
pub fn report_coverage(field: &SurfaceColorField) -> f64 {
    let seen = field.samples.iter().filter(|s| s.confidence > 0.0).count();
    let frac = seen as f64 / field.samples.len().max(1) as f64;
    if frac < 0.95 {
        warn!(
            "only {:.1}% of surface samples were seen by a view",
            100.0 * frac
        );
    }
    frac
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::primitives;
    use crate::protocol::ProceduralField;
    use crate::raster::render_maps;

    fn view(
        mesh: &Mesh,
        az: f64,
        res: usize,
        color: impl Fn(&Camera, &crate::grid::DepthMap) -> Image,
    ) -> PaintedView {
        let camera = Camera::new(az, 0.0, 2.5, 60.0, res).unwrap();
        let maps = render_maps(mesh, &camera, Culling::Backface);
        PaintedView {
            color: color(&camera, &maps.depth),
            camera,
            depth: maps.depth,
            visibility: maps.visibility,
            status: ViewStatus::Painted,
        }
    }

    #[test]
    fn sample_counts_and_membership() {
        let tri = Mesh::new(
            vec![
                Vec3::zeros(),
                Vec3::new(2.0, 0.0, 0.0),
                Vec3::new(0.0, 1.0, 0.0),
            ],
            vec![[0, 1, 2]],
            None,
            None,
        )
        .unwrap();
        let f = sample_surface(&tri, 1000.0, 1).unwrap();
        assert!((850..=1150).contains(&f.len()));
        for s in &f.samples {
            let p = s.position;
            assert!(p.x >= -1e-12 && p.y >= -1e-12 && p.x / 2.0 + p.y <= 1.0 + 1e-12 && p.z == 0.0);
        }
        let flat = Mesh::new(
            vec![Vec3::zeros(), Vec3::x(), Vec3::new(2.0, 0.0, 0.0)],
            vec![[0, 1, 2]],
            None,
            None,
        )
        .unwrap();
        assert!(sample_surface(&flat, 100.0, 1).is_err());
        let sphere = primitives::icosphere(1.0, 3);
        let n = sample_surface(&sphere, 5000.0, 2).unwrap().len() as f64;
        assert!((n / (5000.0 * sphere.total_area()) - 1.0).abs() < 0.05);
    }

    #[test]
    fn single_and_conflicting_views() {
        let mesh = primitives::icosphere(1.0, 3);
        let field = sample_surface(&mesh, 2000.0, 3).unwrap();
        let red = view(&mesh, 0.0, 96, |_, d| d.map(|_| [1.0, 0.0, 0.0]));
        let blue = PaintedView {
            color: red.color.map(|_| [0.0, 0.0, 1.0]),
            ..red.clone()
        };
        let one = fuse_views(&field, std::slice::from_ref(&red), &FusionParams::default()).unwrap();
        assert!(one.samples.iter().all(|s| s.color == [1.0, 0.0, 0.0]));
        let both = fuse_views(&field, &[red, blue], &FusionParams::default()).unwrap();
        for s in both.samples.iter().filter(|s| s.confidence > 0.0) {
            assert!(
                (s.color[0] - 0.5).abs() <= 1.0 / 255.0
                    && s.color[1] == 0.0
                    && (s.color[2] - 0.5).abs() <= 1.0 / 255.0
            );
        }
        assert!(fuse_views(&field, &[], &FusionParams::default()).is_err());
    }

    #[test]
    fn procedural_views_fuse_to_field() {
        let mesh = primitives::icosphere(1.0, 3);
        let pf = ProceduralField::new(5);
        let views: Vec<PaintedView> = (0..4)
            .map(|k| view(&mesh, 90.0 * k as f64, 384, |c, d| pf.render(c, d)))
            .collect();
        let field = sample_surface(&mesh, 3000.0, 4).unwrap();
        let fused = fuse_views(&field, &views, &FusionParams::default()).unwrap();
        // samples seen only at grazing angles are resolution limited
        for s in fused.samples.iter().filter(|s| s.confidence >= 0.01) {
            let want = pf.color(&s.position);
            for c in 0..3 {
                assert!(
                    (s.color[c] - want[c]).abs() <= 4.0 / 255.0,
                    "{s:?} {want:?}"
                );
            }
        }

        let mut rev = views.clone();
        rev.reverse();
        let other = fuse_views(&field, &rev, &FusionParams::default()).unwrap();
        assert_eq!(fused.samples, other.samples);
    }

    #[test]
    fn constant_field_renders_constant() {
        let mesh = primitives::cube(1.0);
        let field = sample_surface(&mesh, 500.0, 5).unwrap();
        let mut samples = field.samples.clone();
        for s in &mut samples {
            s.color = [0.25, 0.5, 0.75];
            s.confidence = 1.0;
        }
        let field = SurfaceColorField::from_samples(samples, true);
        let cam = Camera::new(30.0, 20.0, 2.5, 60.0, 64).unwrap();
        let img = render_fused(&field, &mesh, &cam, 4).unwrap();
        let depth = crate::raster::render_depth(&mesh, &cam, Culling::Backface);
        for (p, d) in img.data.iter().zip(&depth.data) {
            assert_eq!(
                *p,
                if d.is_finite() {
                    [0.25, 0.5, 0.75]
                } else {
                    [0.0; 3]
                }
            );
        }
        let bare = sample_surface(&mesh, 10.0, 5).unwrap();
        assert!(render_fused(&bare, &mesh, &cam, 4).is_err());

        let tmp = tempfile::tempdir().unwrap();
        let p = tmp.path().join("field.ply");
        field.save_ply(&p).unwrap();
        let back = SurfaceColorField::load_ply(&p).unwrap();
        assert_eq!(back.len(), field.len());
        assert_eq!(back.samples[3].position, field.samples[3].position);
        let again = render_fused(&back, &mesh, &cam, 4).unwrap();
        for (a, b) in again.data.iter().zip(&img.data) {
            assert!((0..3).all(|c| (a[c] - b[c]).abs() <= 0.5 / 255.0 + 1e-6));
        }
    }

    #[test]
    fn dataset_round_trip() {
        let mesh = primitives::icosphere(1.0, 2);
        let pf = ProceduralField::new(1);
        let views: Vec<PaintedView> = (0..9)
            .map(|k| view(&mesh, 40.0 * k as f64, 32, |c, d| pf.render(c, d)))
            .collect();
        let tmp = tempfile::tempdir().unwrap();
        let manifest = export_nerf_dataset(&views, tmp.path()).unwrap();
        assert_eq!(manifest.frames.len(), 9);
        for sub in ["images", "depth", "visibility"] {
            assert_eq!(std::fs::read_dir(tmp.path().join(sub)).unwrap().count(), 9);
        }
        let back = import_nerf_dataset(tmp.path()).unwrap();
        for (a, b) in views.iter().zip(&back) {
            assert_eq!(a.camera, b.camera);
            for (x, y) in a.color.data.iter().zip(&b.color.data) {
                for c in 0..3 {
                    assert!((x[c] - y[c]).abs() <= 0.5 / 255.0 + 1e-6);
                }
            }
            let (lo, hi) = depth_range(&a.depth);
            for (x, y) in a.depth.data.iter().zip(&b.depth.data) {
                assert!(x == y || (x - y).abs() <= (hi - lo) / 65535.0);
            }
        }

        let unit = Camera::new(0.0, 0.0, 1.0, 60.0, 8).unwrap();
        let t = unit.camera_to_world();
        assert!((t.fixed_view::<3, 1>(0, 3) - Vec3::new(0.0, 0.0, 1.0)).norm() < 1e-12);

        let renders = tmp.path().join("renders");
        std::fs::create_dir_all(&renders).unwrap();
        for i in 0..9 {
            std::fs::copy(
                tmp.path().join("images").join(frame_name(i)),
                renders.join(frame_name(i)),
            )
            .unwrap();
        }
        let imported = import_nerf_renders(tmp.path(), &views).unwrap();
        assert!(imported.iter().all(|v| v.status == ViewStatus::Fused));
        std::fs::remove_file(renders.join(frame_name(4))).unwrap();
        assert!(matches!(
            import_nerf_renders(tmp.path(), &views),
            Err(Error::MissingView(4))
        ));
        save_rgb_png(&Grid::filled(5, 5, [0.0; 3]), &renders.join(frame_name(4))).unwrap();
        assert!(matches!(
            import_nerf_renders(tmp.path(), &views),
            Err(Error::Schema(_))
        ));
    }

    #[test]
    fn consistency_kind_parsing() {
        assert_eq!(
            "builtin".parse::<ConsistencyKind>().unwrap(),
            ConsistencyKind::Builtin
        );
        assert_eq!(
            "external-nerf:fit {dir}"
                .parse::<ConsistencyKind>()
                .unwrap(),
            ConsistencyKind::External("fit {dir}".into())
        );
        assert!("external:fit".parse::<ConsistencyKind>().is_err());
    }
}
