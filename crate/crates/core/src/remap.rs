//! Occlusion-aware backward remapping of painted views into a novel view.
//!
//! For every foreground pixel of the novel view, its NDC position and
//! Z-buffer depth are pushed through the inverse relative transform into a
//! previous view. That yields where to sample the previous image (the
//! xy-map) and the depth the point should have there. Comparing that depth
//! with the previous depth map around the same place tells whether the
//! point was visible in the previous view; only the bilinear taps that
//! agree contribute color, so nothing bleeds across silhouettes.

use nalgebra::{Matrix4, Vector4};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Camera, Projection, Vec3};
use crate::grid::{
    sample_rgb, sample_scalar, DepthMap, DepthSampler, Grid, Image, Mask, VisibilityMap, Zone,
    ZoneMap,
};

/// Default depth agreement tolerance in scene units.
pub const DEFAULT_TOLERANCE: f64 = 5e-3;
/// Default visibility gain needed to refine a remapped pixel.
pub const DEFAULT_ZONE_THRESHOLD: f64 = 0.1;

/// Maps homogeneous NDC of one view to homogeneous NDC of another.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewTransform {
    pub matrix: Matrix4<f64>,
}

impl ViewTransform {
    pub fn identity() -> Self {
        ViewTransform {
            matrix: Matrix4::identity(),
        }
    }

    pub fn inverse(&self) -> Result<ViewTransform> {
        self.matrix
            .try_inverse()
            .map(|matrix| ViewTransform { matrix })
            .ok_or_else(|| Error::Degenerate("view transform is singular".into()))
    }

    /// `self` after `first`.
    pub fn compose(&self, first: &ViewTransform) -> ViewTransform {
        ViewTransform {
            matrix: self.matrix * first.matrix,
        }
    }

    /// Transforms an NDC point; `None` if it lands behind the target camera.
    pub fn apply(&self, ndc: &Vec3) -> Option<Vec3> {
        let h = self.matrix * Vector4::new(ndc.x, ndc.y, ndc.z, 1.0);
        (h.w > 0.0).then(|| Vec3::new(h.x / h.w, h.y / h.w, h.z / h.w))
    }
}

/// Relative NDC transform `K E K^-1` taking `from`'s NDC into `to`'s NDC,
/// where `K` is the shared projection and `E` the relative rigid motion
/// between the two camera poses.
pub fn relative_ndc_transform(from: &Camera, to: &Camera) -> Result<ViewTransform> {
    let proj = from.projection();
    if proj != to.projection() {
        return Err(Error::InvalidCamera(
            "cameras do not share a projection".into(),
        ));
    }
    proj.validate()?;
    let relative = to.view_matrix() * from.camera_to_world();
    Ok(ViewTransform {
        matrix: proj.matrix() * relative * proj.inverse_matrix(),
    })
}

/// Source location of a novel-view pixel inside a previous view.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct XyEntry {
    /// Previous-view NDC.
    pub x: f64,
    pub y: f64,
    /// View-space depth of the same surface point seen from the previous view.
    pub depth: f64,
}

/// Per novel pixel source coordinates; `None` for background or points
/// outside the previous frame.
pub type XyMap = Grid<Option<XyEntry>>;

/// Builds the xy-map of a novel view into a previous view. `novel_to_prev`
/// maps novel NDC to previous NDC. Sources within half a pixel of the
/// previous frame border are rejected so bilinear taps never leave the
/// image.
pub fn compute_xy_map(
    novel_depth: &DepthMap,
    novel_to_prev: &ViewTransform,
    proj: &Projection,
) -> XyMap {
    let res = proj.resolution;
    let limit = 1.0 - 1.0 / res as f64;
    let data = (0..novel_depth.data.len())
        .into_par_iter()
        .map(|i| {
            let d = novel_depth.data[i];
            if !d.is_finite() {
                return None;
            }
            let (row, col) = (i / novel_depth.width, i % novel_depth.width);
            let (x, y) = proj.pixel_center_ndc(row, col);
            let src = novel_to_prev.apply(&Vec3::new(x, y, proj.z_ndc(d)))?;
            if src.x.abs() > limit || src.y.abs() > limit || !(0.0..=1.0).contains(&src.z) {
                return None;
            }
            Some(XyEntry {
                x: src.x,
                y: src.y,
                depth: proj.depth_from_z_ndc(src.z),
            })
        })
        .collect();
    Grid {
        width: novel_depth.width,
        height: novel_depth.height,
        data,
    }
}

fn pixel_of(map_w: usize, map_h: usize, e: &XyEntry) -> (f64, f64) {
    (
        (e.x + 1.0) * 0.5 * map_w as f64 - 0.5,
        (1.0 - e.y) * 0.5 * map_h as f64 - 0.5,
    )
}

/// Bilinear backward remap of `prev` at the xy-map locations; invalid
/// pixels are black.
pub fn backward_remap(prev: &Image, xy: &XyMap) -> Image {
    xy.map(|e| match e {
        Some(e) => {
            let (u, v) = pixel_of(prev.width, prev.height, e);
            sample_rgb(prev, u, v)
        }
        None => [0.0; 3],
    })
}

/// Bilinear resampling of a scalar map (e.g. visibility); 0 where invalid.
pub fn resample_scalar(prev: &Grid<f64>, xy: &XyMap) -> Grid<f64> {
    xy.map(|e| match e {
        Some(e) => {
            let (u, v) = pixel_of(prev.width, prev.height, e);
            sample_scalar(prev, u, v)
        }
        None => 0.0,
    })
}

/// Smaller of the two one-sided position differences at a pixel, skipping
/// background neighbours.
fn robust_tangent(p: &Vec3, back: Option<Vec3>, fwd: Option<Vec3>) -> Option<Vec3> {
    match (back.map(|b| p - b), fwd.map(|f| f - p)) {
        (Some(a), Some(b)) => Some(if a.norm_squared() <= b.norm_squared() {
            a
        } else {
            b
        }),
        (a, b) => a.or(b),
    }
}

/// World position of every foreground pixel.
fn novel_points(novel: &Camera, depth: &DepthMap) -> Grid<Option<Vec3>> {
    let proj = novel.projection();
    depth.map_index(|i| {
        let d = depth.data[i];
        d.is_finite().then(|| {
            let (x, y) = proj.pixel_center_ndc(i / depth.width, i % depth.width);
            novel.unproject(x, y, d)
        })
    })
}

/// Cosine between each novel pixel's surface normal, estimated from the
/// depth map, and the direction towards `source`'s camera. Negative values
/// face away; background and isolated pixels are `NaN`.
pub fn source_facing(novel: &Camera, novel_depth: &DepthMap, source: &Camera) -> Grid<f64> {
    let (w, h) = (novel_depth.width, novel_depth.height);
    let pos = novel_points(novel, novel_depth).data;
    let (eye, src) = (novel.position(), source.position());
    novel_depth.map_index(|i| {
        let Some(p) = pos[i] else { return f64::NAN };
        let (r, c) = (i / w, i % w);
        let tx = robust_tangent(
            &p,
            (c > 0).then(|| pos[i - 1]).flatten(),
            (c + 1 < w).then(|| pos[i + 1]).flatten(),
        );
        let ty = robust_tangent(
            &p,
            (r > 0).then(|| pos[i - w]).flatten(),
            (r + 1 < h).then(|| pos[i + w]).flatten(),
        );
        let (Some(tx), Some(ty)) = (tx, ty) else {
            return f64::NAN;
        };
        let mut n = tx.cross(&ty);
        if n.norm_squared() == 0.0 {
            return f64::NAN;
        }
        if n.dot(&(eye - p)) < 0.0 {
            n = -n;
        }
        n.normalize().dot(&(src - p).normalize())
    })
}

/// Inpainting mask: a pixel is constrained (false) only when its source is
/// valid and the previous depth map agrees with the transformed depth
/// within `tol` (see [`DepthSampler::agreeing_taps`]). `facing` comes from
/// [`source_facing`] towards the previous camera.
pub fn occlusion_mask(
    prev_depth: &DepthMap,
    proj: &Projection,
    xy: &XyMap,
    facing: &Grid<f64>,
    tol: f64,
) -> Mask {
    let sampler = DepthSampler::new(prev_depth, proj);
    xy.map_index(|i| match &xy.data[i] {
        Some(e) => {
            let (u, v) = pixel_of(prev_depth.width, prev_depth.height, e);
            sampler
                .agreeing_taps(u, v, e.depth, tol, facing.data[i] > 0.0)
                .is_none()
        }
        None => true,
    })
}

/// Color, mask and visibility of one source view seen through an xy-map.
/// Color and visibility average only the taps that pass the depth test.
fn remap_source(
    prev: &PaintedView,
    xy: &XyMap,
    facing: &Grid<f64>,
    tol: f64,
) -> (Image, Mask, VisibilityMap) {
    let sampler = DepthSampler::new(&prev.depth, &prev.camera.projection());
    let (w, h) = (prev.depth.width, prev.depth.height);
    let per_pixel: Vec<Option<(crate::grid::Rgb, f64)>> =
        (xy.data.par_iter(), facing.data.par_iter())
            .into_par_iter()
            .map(|(e, f)| {
                let e = e.as_ref()?;
                let (u, v) = pixel_of(w, h, e);
                let taps = sampler.agreeing_taps(u, v, e.depth, tol, *f > 0.0)?;
                let mut rgb = [0.0f64; 3];
                let mut vis = 0.0;
                for (idx, wt) in taps {
                    if wt > 0.0 {
                        let p = prev.color.data[idx];
                        for c in 0..3 {
                            rgb[c] += wt * p[c] as f64;
                        }
                        vis += wt * prev.visibility.data[idx];
                    }
                }
                Some((rgb.map(|c| c as f32), vis))
            })
            .collect();
    (
        xy.map_index(|i| per_pixel[i].map_or([0.0; 3], |p| p.0)),
        xy.map_index(|i| per_pixel[i].is_none()),
        xy.map_index(|i| per_pixel[i].map_or(0.0, |p| p.1)),
    )
}

/// Zoning trimap. The mask takes precedence; otherwise a pixel is refined
/// when the novel view sees it at least `threshold` more frontally than the
/// previous view did.
pub fn zoning(
    vis_prev_resampled: &VisibilityMap,
    vis_novel: &VisibilityMap,
    mask: &Mask,
    threshold: f64,
) -> ZoneMap {
    Grid::from_fn(mask.width, mask.height, |r, c| {
        if *mask.get(r, c) {
            Zone::Generate
        } else if *vis_novel.get(r, c) > *vis_prev_resampled.get(r, c) + threshold {
            Zone::Refine
        } else {
            Zone::Keep
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RemapParams {
    pub tolerance: f64,
    pub zone_threshold: f64,
    pub zoning: bool,
}

impl Default for RemapParams {
    fn default() -> Self {
        RemapParams {
            tolerance: DEFAULT_TOLERANCE,
            zone_threshold: DEFAULT_ZONE_THRESHOLD,
            zoning: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ViewStatus {
    Painted,
    /// Replaced by a render of the fused color field.
    Fused,
}

/// A painted view with the maps needed to remap from it.
#[derive(Debug, Clone, PartialEq)]
pub struct PaintedView {
    pub camera: Camera,
    pub color: Image,
    pub depth: DepthMap,
    pub visibility: VisibilityMap,
    pub status: ViewStatus,
}

#[derive(Debug, Clone)]
pub struct RemapResult {
    pub image: Image,
    pub mask: Mask,
    pub zones: Option<ZoneMap>,
    /// Index into the source list of the view each pixel was taken from.
    pub source: Grid<Option<usize>>,
}

/// Remaps several previous views into the novel view. Each pixel takes its
/// color from the source that sees it unoccluded with the highest
/// visibility score (ties go to the lower index); the mask is set only where
/// no source sees the pixel.
pub fn remap_multi(
    sources: &[&PaintedView],
    novel: &Camera,
    novel_depth: &DepthMap,
    novel_visibility: &VisibilityMap,
    params: &RemapParams,
) -> Result<RemapResult> {
    if sources.is_empty() {
        return Err(Error::Config(
            "remapping needs at least one previous view".into(),
        ));
    }
    let proj = novel.projection();
    struct Candidate {
        image: Image,
        mask: Mask,
        vis: VisibilityMap,
    }
    let candidates = sources
        .iter()
        .map(|s| {
            let to_prev = relative_ndc_transform(novel, &s.camera)?;
            let xy = compute_xy_map(novel_depth, &to_prev, &proj);
            let facing = source_facing(novel, novel_depth, &s.camera);
            let (image, mask, vis) = remap_source(s, &xy, &facing, params.tolerance);
            Ok(Candidate { image, mask, vis })
        })
        .collect::<Result<Vec<_>>>()?;

    let n = novel_depth.data.len();
    let mut source = vec![None; n];
    for (i, slot) in source.iter_mut().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (k, c) in candidates.iter().enumerate() {
            if c.mask.data[i] {
                continue;
            }
            let score = c.vis.data[i];
            if best.is_none_or(|(_, s)| score > s) {
                best = Some((k, score));
            }
        }
        *slot = best.map(|b| b.0);
    }
    let (w, h) = (novel_depth.width, novel_depth.height);
    let image = Grid::from_vec(
        w,
        h,
        source
            .iter()
            .enumerate()
            .map(|(i, s)| s.map_or([0.0; 3], |k| candidates[k].image.data[i]))
            .collect(),
    )?;
    let mask = Grid::from_vec(w, h, source.iter().map(Option::is_none).collect())?;
    let zones = params.zoning.then(|| {
        let vis_prev = Grid {
            width: w,
            height: h,
            data: source
                .iter()
                .enumerate()
                .map(|(i, s)| s.map_or(0.0, |k| candidates[k].vis.data[i]))
                .collect(),
        };
        zoning(&vis_prev, novel_visibility, &mask, params.zone_threshold)
    });
    Ok(RemapResult {
        image,
        mask,
        zones,
        source: Grid::from_vec(w, h, source)?,
    })
}
