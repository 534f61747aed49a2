#![allow(dead_code)]

use rayon::prelude::*;

use repaint3d::geometry::{normalize, primitives, Camera, Mesh, SceneFrame, Vec3};
use repaint3d::grid::{bilinear_taps, quantize_u8, Image, Mask, Zone};
use repaint3d::protocol::ProceduralField;
use repaint3d::raster::{render_maps, Culling};
use repaint3d::remap::{
    compute_xy_map, relative_ndc_transform, remap_multi, PaintedView, RemapParams, RemapResult,
    ViewStatus,
};

pub const RADIUS: f64 = 2.5;
pub const FOV: f64 = 60.0;

pub fn cam(az: f64, res: usize) -> Camera {
    Camera::new(az, 0.0, RADIUS, FOV, res).unwrap()
}

/// Sphere, cube and the ~5k-triangle torus, each fitted to the unit sphere.
pub fn test_meshes() -> Vec<(&'static str, Mesh)> {
    let frame = SceneFrame::default();
    vec![
        (
            "sphere",
            normalize(&primitives::icosphere(1.0, 4), &frame).unwrap(),
        ),
        ("cube", normalize(&primitives::cube(1.0), &frame).unwrap()),
        (
            "torus",
            normalize(&primitives::occluder_torus(), &frame).unwrap(),
        ),
    ]
}

/// Large quad at z = 0 with a small quad 0.45 in front of it.
pub fn two_quad_scene() -> Mesh {
    let back = primitives::quad(0.7, 0.0);
    let front = primitives::quad(0.2, 0.45);
    let mut vertices = back.vertices.clone();
    vertices.extend(&front.vertices);
    let mut faces = back.faces.clone();
    faces.extend(front.faces.iter().map(|f| f.map(|i| i + 4)));
    let normals = vec![Vec3::z(); 8];
    Mesh::new(vertices, faces, Some(normals), None).unwrap()
}

pub fn quantize(img: &Image) -> Image {
    img.map(|p| p.map(|c| quantize_u8(c) as f32 / 255.0))
}

/// View painted with the procedural field and stored at 8 bits.
pub fn procedural_view(mesh: &Mesh, camera: Camera, field: &ProceduralField) -> PaintedView {
    let maps = render_maps(mesh, &camera, Culling::Backface);
    PaintedView {
        color: quantize(&field.render(&camera, &maps.depth)),
        camera,
        depth: maps.depth,
        visibility: maps.visibility,
        status: ViewStatus::Painted,
    }
}

pub fn remap_into(
    sources: &[&PaintedView],
    mesh: &Mesh,
    novel: &Camera,
    params: &RemapParams,
) -> (PaintedView, RemapResult) {
    let maps = render_maps(mesh, novel, Culling::Backface);
    let r = remap_multi(sources, novel, &maps.depth, &maps.visibility, params).unwrap();
    let view = PaintedView {
        camera: *novel,
        color: quantize(&r.image),
        depth: maps.depth,
        visibility: maps.visibility,
        status: ViewStatus::Painted,
    };
    (view, r)
}

/// Möller-Trumbore, two-sided.
pub fn ray_triangle(o: &Vec3, d: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> Option<f64> {
    let e1 = b - a;
    let e2 = c - a;
    let p = d.cross(&e2);
    let det = e1.dot(&p);
    if det.abs() < 1e-14 {
        return None;
    }
    let inv = 1.0 / det;
    let s = o - a;
    let u = s.dot(&p) * inv;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let q = s.cross(&e1);
    let v = d.dot(&q) * inv;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    let t = e2.dot(&q) * inv;
    (t > 1e-9).then_some(t)
}

pub fn first_hit(mesh: &Mesh, o: &Vec3, d: &Vec3) -> Option<f64> {
    mesh.faces
        .iter()
        .filter_map(|&[a, b, c]| {
            ray_triangle(
                o,
                d,
                &mesh.vertices[a],
                &mesh.vertices[b],
                &mesh.vertices[c],
            )
        })
        .min_by(f64::total_cmp)
}

/// Per-pixel ray-cast: `Some(occluded in prev)` for every novel pixel whose
/// primary ray hits the mesh.
pub fn raycast_occlusion(mesh: &Mesh, prev: &Camera, novel: &Camera) -> Vec<Option<bool>> {
    let proj = novel.projection();
    let res = novel.resolution;
    let eye = novel.position();
    let prev_eye = prev.position();
    (0..res * res)
        .into_par_iter()
        .map(|i| {
            let (x, y) = proj.pixel_center_ndc(i / res, i % res);
            let d = novel.ray_direction(x, y);
            let t = first_hit(mesh, &eye, &d)?;
            let p = eye + d * t;
            let inside = prev
                .project(&p)
                .is_some_and(|(n, _)| n.x.abs() <= 1.0 && n.y.abs() <= 1.0);
            if !inside {
                return Some(true);
            }
            let to = p - prev_eye;
            let dist = to.norm();
            let blocked = first_hit(mesh, &prev_eye, &(to / dist)).is_some_and(|s| s < dist - 1e-6);
            Some(blocked)
        })
        .collect()
}

/// Fraction of rasterized foreground pixels where the mask disagrees with
/// the ray-cast oracle (an oracle miss counts as disagreement), and the IoU
/// of the occluded sets.
pub fn mask_vs_oracle(mask: &Mask, depth: &[f64], oracle: &[Option<bool>]) -> (f64, f64) {
    let (mut fg, mut bad, mut inter, mut union) = (0usize, 0usize, 0usize, 0usize);
    for i in 0..depth.len() {
        if !depth[i].is_finite() {
            continue;
        }
        fg += 1;
        match oracle[i] {
            None => bad += 1,
            Some(o) => {
                let m = mask.data[i];
                bad += usize::from(m != o);
                inter += usize::from(m && o);
                union += usize::from(m || o);
            }
        }
    }
    (
        bad as f64 / fg as f64,
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        },
    )
}

/// Whether the bilinear footprint of `entry` in a view with depth map
/// `depth` lies entirely on foreground pixels, i.e. the remapped value was
/// interpolated rather than extrapolated past a silhouette.
pub fn interior(
    depth: &repaint3d::DepthMap,
    proj: &repaint3d::geometry::Projection,
    x: f64,
    y: f64,
) -> bool {
    let (u, v) = proj.ndc_to_pixel(x, y);
    bilinear_taps(depth.width, depth.height, u, v)
        .iter()
        .all(|&(k, w)| w == 0.0 || depth.data[k].is_finite())
}

pub struct RoundTrip {
    /// Max channel error (1/255 units) over co-visible pixels interpolated
    /// in both legs, and their count.
    pub interior_max: f64,
    pub interior_n: usize,
    /// Same over every pixel with mask 0 both ways.
    pub all_max: f64,
    pub all_n: usize,
    /// Same over pixels zoned keep in both legs.
    pub keep_max: f64,
    pub keep_n: usize,
    /// Pixels of the mask-0-both-ways set above 2/255.
    pub all_over: usize,
}

/// A→B→A on procedural images.
pub fn round_trip(mesh: &Mesh, az_a: f64, az_b: f64, res: usize) -> RoundTrip {
    let field = ProceduralField::new(11);
    let params = RemapParams::default();
    let a = procedural_view(mesh, cam(az_a, res), &field);
    let (b, ab) = remap_into(&[&a], mesh, &cam(az_b, res), &params);
    let (_, ba) = remap_into(&[&b], mesh, &a.camera, &params);
    let (zab, zba) = (ab.zones.as_ref().unwrap(), ba.zones.as_ref().unwrap());
    let back = quantize(&ba.image);
    let proj = a.camera.projection();
    let xy_ab = compute_xy_map(
        &b.depth,
        &relative_ndc_transform(&b.camera, &a.camera).unwrap(),
        &proj,
    );
    let xy_ba = compute_xy_map(
        &a.depth,
        &relative_ndc_transform(&a.camera, &b.camera).unwrap(),
        &proj,
    );
    let b_interior: Vec<bool> = xy_ab
        .data
        .iter()
        .map(|e| e.is_some_and(|e| interior(&a.depth, &proj, e.x, e.y)))
        .collect();
    let mut out = RoundTrip {
        interior_max: 0.0,
        interior_n: 0,
        all_max: 0.0,
        all_n: 0,
        keep_max: 0.0,
        keep_n: 0,
        all_over: 0,
    };
    for i in 0..a.depth.data.len() {
        if ba.mask.data[i] || !a.depth.data[i].is_finite() {
            continue;
        }
        let Some(e) = xy_ba.data[i] else { continue };
        let (u, v) = proj.ndc_to_pixel(e.x, e.y);
        let taps = bilinear_taps(res, res, u, v);
        let live = |&(k, w): &(usize, f64)| w > 0.0 && b.depth.data[k].is_finite();
        if taps
            .iter()
            .filter(|t| live(t))
            .any(|&(k, _)| ab.mask.data[k])
        {
            continue;
        }
        let err = (0..3)
            .map(|c| ((back.data[i][c] - a.color.data[i][c]).abs() * 255.0).round() as f64)
            .fold(0.0, f64::max);
        out.all_n += 1;
        out.all_max = out.all_max.max(err);
        out.all_over += usize::from(err > 2.0);
        if taps
            .iter()
            .all(|t| t.1 == 0.0 || (live(t) && b_interior[t.0]))
        {
            out.interior_n += 1;
            out.interior_max = out.interior_max.max(err);
        }
        if zba.data[i] == Zone::Keep
            && taps
                .iter()
                .filter(|t| live(t))
                .all(|&(k, _)| zab.data[k] == Zone::Keep)
        {
            out.keep_n += 1;
            out.keep_max = out.keep_max.max(err);
        }
    }
    out
}

/// Analytic facing score of the unit sphere point `p` seen from `eye`.
pub fn sphere_score(p: &Vec3, eye: &Vec3) -> f64 {
    let n = p.normalize();
    n.dot(&(eye - p).normalize()).max(0.0)
}

/// Ray / unit-sphere intersection.
pub fn hit_unit_sphere(o: &Vec3, d: &Vec3) -> Option<Vec3> {
    let b = o.dot(d);
    let c = o.norm_squared() - 1.0;
    let disc = b * b - c;
    (disc >= 0.0).then(|| o + d * (-b - disc.sqrt()))
}

pub fn ring_views(mesh: &Mesh, res: usize, field: &ProceduralField, n: usize) -> Vec<PaintedView> {
    (0..n)
        .map(|k| procedural_view(mesh, cam(360.0 * k as f64 / n as f64, res), field))
        .collect()
}

/// Largest per-channel difference in 8-bit levels over foreground pixels.
pub fn max_level_diff(a: &Image, b: &Image, depth: &repaint3d::DepthMap) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..depth.data.len() {
        if depth.data[i].is_finite() {
            for c in 0..3 {
                worst = worst
                    .max(((a.data[i][c] - b.data[i][c]).abs() as f64 * 255.0 * 1e4).round() / 1e4);
            }
        }
    }
    worst
}

pub struct FusionCheck {
    /// Re-fusing renders of the fused field vs the field, seen samples.
    pub idempotence: f64,
    /// Renders of the fused field vs consistent inputs.
    pub noop: f64,
    pub permutation_exact: bool,
}

pub fn fusion_check(mesh: &Mesh, res: usize, density: f64) -> FusionCheck {
    use repaint3d::fusion::{fuse_views, render_fused, sample_surface, FusionParams};
    let pf = ProceduralField::new(4);
    let params = FusionParams::default();
    let views = ring_views(mesh, res, &pf, 9);
    let samples = sample_surface(mesh, density, 1).unwrap();
    let fused = fuse_views(&samples, &views, &params).unwrap();

    let mut noop = 0.0f64;
    let mut rendered = views.clone();
    for v in rendered.iter_mut() {
        let img = render_fused(&fused, mesh, &v.camera, params.k).unwrap();
        noop = noop.max(max_level_diff(&img, &v.color, &v.depth));
        v.color = img;
    }
    let again = fuse_views(&samples, &rendered, &params).unwrap();
    let mut idempotence = 0.0f64;
    for (a, b) in fused.samples.iter().zip(&again.samples) {
        if a.confidence > 0.0 {
            for c in 0..3 {
                idempotence = idempotence.max((a.color[c] - b.color[c]).abs() as f64 * 255.0);
            }
        }
    }

    let mut permuted = views.clone();
    permuted.rotate_left(4);
    permuted.swap(0, 7);
    permuted.reverse();
    let other = fuse_views(&samples, &permuted, &params).unwrap();
    let permutation_exact = other.samples.iter().zip(&fused.samples).all(|(a, b)| {
        a.color.map(f32::to_bits) == b.color.map(f32::to_bits)
            && a.confidence.to_bits() == b.confidence.to_bits()
    });
    FusionCheck {
        idempotence,
        noop,
        permutation_exact,
    }
}

/// Full pipeline run on `mesh` written as OBJ into a fresh temp dir.
pub fn pipeline_run(
    mesh: &Mesh,
    cfg: &repaint3d::pipeline::PipelineConfig,
) -> (
    tempfile::TempDir,
    repaint3d::Result<repaint3d::pipeline::PipelineOutput>,
) {
    use repaint3d::geometry::io::{save_mesh, MeshFormat};
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("input.obj");
    save_mesh(mesh, &input, MeshFormat::Obj).unwrap();
    let out = tmp.path().join("out");
    let res = repaint3d::pipeline::run_pipeline_with(
        cfg,
        &input,
        &out,
        &mut "".as_bytes(),
        &mut Vec::new(),
    );
    (tmp, res)
}

/// PSNR of the final fused renders against the procedural ground truth,
/// pooled over every foreground pixel, and the worst single view.
pub fn pipeline_psnr(out: &repaint3d::pipeline::PipelineOutput, seed: u64) -> (f64, f64) {
    let truth = ProceduralField::new(seed);
    let (mut sse, mut n, mut worst) = (0.0f64, 0usize, f64::INFINITY);
    for (v, img) in out.views.iter().zip(&out.final_renders) {
        let gt = truth.render(&v.camera, &v.depth);
        let fg = |i: usize| v.depth.data[i].is_finite();
        worst = worst.min(repaint3d::grid::psnr(img, &gt, fg));
        for i in (0..gt.data.len()).filter(|&i| fg(i)) {
            for c in 0..3 {
                sse += ((img.data[i][c] - gt.data[i][c]) as f64).powi(2);
            }
            n += 3;
        }
    }
    (10.0 * (1.0 / (sse / n as f64)).log10(), worst)
}

/// Pinhole projection written out from the camera placement alone:
/// `(ndc_x, ndc_y, depth)`.
pub fn oracle_ndc(c: &Camera, p: &Vec3) -> (f64, f64, f64) {
    let (az, el) = (c.azimuth.to_radians(), c.elevation.to_radians());
    let eye = c.radius * Vec3::new(el.cos() * az.sin(), el.sin(), el.cos() * az.cos());
    let f = -eye.normalize();
    let r = f.cross(&Vec3::y()).normalize();
    let u = r.cross(&f);
    let d = p - eye;
    let depth = d.dot(&f);
    let t = (c.fov_y.to_radians() / 2.0).tan();
    (d.dot(&r) / (depth * t), d.dot(&u) / (depth * t), depth)
}

/// Mean absolute channel difference, in 8-bit levels, between the exported
/// colored mesh rendered with its vertex colors and the fused renders, over
/// pixels that are foreground in both.
pub fn export_rerender_error(
    out: &repaint3d::pipeline::PipelineOutput,
    dir: &std::path::Path,
) -> f64 {
    use repaint3d::geometry::{load_mesh, MeshFormat};
    use repaint3d::raster::{render_color, render_depth};
    let path = repaint3d::pipeline::colored_mesh_path(dir);
    let mut exported = load_mesh(&path, MeshFormat::Ply).unwrap();
    for v in exported.vertices.iter_mut() {
        *v = out.frame.apply(v);
    }
    let (mut sum, mut n) = (0.0f64, 0usize);
    for (v, fused) in out.views.iter().zip(&out.final_renders) {
        let img = render_color(&exported, &v.camera).unwrap();
        let depth = render_depth(&exported, &v.camera, Culling::Backface);
        for i in 0..img.data.len() {
            if v.depth.data[i].is_finite() && depth.data[i].is_finite() {
                for c in 0..3 {
                    sum += (img.data[i][c] - fused.data[i][c]).abs() as f64;
                }
                n += 3;
            }
        }
    }
    255.0 * sum / n as f64
}
