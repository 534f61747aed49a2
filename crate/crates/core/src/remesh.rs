//! Planar-region remeshing, vertex color transfer and colored export.
//!
//! Faces are grouped into planar patches. The interior of each patch is
//! re-triangulated with a near-uniform lattice under a constrained Delaunay
//! triangulation whose constraints are the patch boundary, so curved
//! regions and every original boundary vertex stay untouched.

use std::collections::{HashMap, VecDeque};
use std::path::Path;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use spade::{ConstrainedDelaunayTriangulation, Point2, Triangulation};

use crate::error::{Error, Result};
use crate::fusion::SurfaceColorField;
use crate::geometry::{save_mesh, Mesh, MeshFormat, Vec3};

pub const PLANAR_ANGLE_DEG: f64 = 1.0;
pub const DEFAULT_TARGET_EDGE: f64 = 0.01;
/// Lattice points closer than this many target lengths to the boundary are
/// dropped.
const BOUNDARY_CLEARANCE: f64 = 0.6;
/// Coplanarity tolerance relative to the mesh bounding-box diagonal.
const PLANE_TOLERANCE: f64 = 1e-7;

type EdgeKey = (usize, usize);

fn key(a: usize, b: usize) -> EdgeKey {
    (a.min(b), a.max(b))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanarPatch {
    pub faces: Vec<usize>,
    pub origin: Vec3,
    pub normal: Vec3,
    /// Directed boundary edges in face winding order.
    pub boundary: Vec<[usize; 2]>,
    /// An interior edge is shared by more than two faces.
    pub non_manifold: bool,
}

fn edge_faces(mesh: &Mesh) -> HashMap<EdgeKey, Vec<usize>> {
    let mut map: HashMap<EdgeKey, Vec<usize>> = HashMap::new();
    for (f, t) in mesh.faces.iter().enumerate() {
        for k in 0..3 {
            map.entry(key(t[k], t[(k + 1) % 3])).or_default().push(f);
        }
    }
    map
}

/// Groups faces by breadth-first growth from each unvisited seed: a
/// neighbour joins when its normal is within `angle_deg` of the seed normal
/// and its vertices lie on the seed plane.
pub fn planar_patches(mesh: &Mesh, angle_deg: f64) -> Vec<PlanarPatch> {
    let Some((lo, hi)) = mesh.bounds() else {
        return Vec::new();
    };
    let tol = PLANE_TOLERANCE * (hi - lo).norm();
    let cos_max = angle_deg.to_radians().cos();
    let edges = edge_faces(mesh);
    let normals: Vec<Option<Vec3>> = (0..mesh.faces.len())
        .map(|f| {
            let c = mesh.face_cross(f);
            (c.norm() > 0.0).then(|| c.normalize())
        })
        .collect();
    let mut visited = vec![false; mesh.faces.len()];
    let mut patches = Vec::new();
    for seed in 0..mesh.faces.len() {
        let Some(n0) = normals[seed] else { continue };
        if visited[seed] {
            continue;
        }
        visited[seed] = true;
        let origin = mesh.vertices[mesh.faces[seed][0]];
        let mut faces = vec![seed];
        let mut queue = VecDeque::from([seed]);
        while let Some(f) = queue.pop_front() {
            let t = mesh.faces[f];
            for k in 0..3 {
                for &g in &edges[&key(t[k], t[(k + 1) % 3])] {
                    if visited[g] {
                        continue;
                    }
                    let Some(ng) = normals[g] else { continue };
                    let on_plane = mesh.faces[g]
                        .iter()
                        .all(|&v| (mesh.vertices[v] - origin).dot(&n0).abs() <= tol);
                    if ng.dot(&n0) >= cos_max && on_plane {
                        visited[g] = true;
                        faces.push(g);
                        queue.push_back(g);
                    }
                }
            }
        }
        faces.sort_unstable();
        let mut count: HashMap<EdgeKey, usize> = HashMap::new();
        for &f in &faces {
            let t = mesh.faces[f];
            for k in 0..3 {
                *count.entry(key(t[k], t[(k + 1) % 3])).or_default() += 1;
            }
        }
        let mut boundary = Vec::new();
        let mut non_manifold = false;
        for &f in &faces {
            let t = mesh.faces[f];
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                let inside = count[&key(a, b)];
                if inside == 1 {
                    boundary.push([a, b]);
                }
                if inside >= 2 && edges[&key(a, b)].len() > 2 {
                    non_manifold = true;
                }
            }
        }
        patches.push(PlanarPatch {
            faces,
            origin,
            normal: n0,
            boundary,
            non_manifold,
        });
    }
    patches
}

struct Plane {
    origin: Vec3,
    e1: Vec3,
    e2: Vec3,
}

impl Plane {
    fn new(origin: Vec3, normal: Vec3) -> Self {
        let axis = if normal.x.abs() < 0.9 {
            Vec3::x()
        } else {
            Vec3::y()
        };
        let e1 = axis.cross(&normal).normalize();
        let e2 = normal.cross(&e1);
        Plane { origin, e1, e2 }
    }

    fn to_2d(&self, p: &Vec3) -> [f64; 2] {
        let d = p - self.origin;
        [d.dot(&self.e1), d.dot(&self.e2)]
    }

    fn to_3d(&self, q: [f64; 2]) -> Vec3 {
        self.origin + self.e1 * q[0] + self.e2 * q[1]
    }
}

fn cross2(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

fn in_triangle(p: [f64; 2], t: &[[f64; 2]; 3]) -> bool {
    let area = cross2(t[0], t[1], t[2]);
    if area == 0.0 {
        return false;
    }
    let eps = -1e-12 * area.abs();
    let s = area.signum();
    (0..3).all(|k| s * cross2(t[k], t[(k + 1) % 3], p) >= eps)
}

fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let ap = [p[0] - a[0], p[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if len2 > 0.0 {
        ((ap[0] * ab[0] + ap[1] * ab[1]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    ((ap[0] - t * ab[0]).powi(2) + (ap[1] - t * ab[1]).powi(2)).sqrt()
}

struct PatchMesh {
    faces: Vec<[usize; 3]>,
    new_vertices: Vec<Vec3>,
}

/// Triangulates one patch. `splits` holds the ids of the points inserted on
/// subdivided boundary edges (canonical low-to-high order) and `positions`
/// every vertex created so far; interior points get ids from `next_id`.
fn triangulate_patch(
    mesh: &Mesh,
    patch: &PlanarPatch,
    target: f64,
    splits: &HashMap<EdgeKey, Vec<usize>>,
    positions: &[Vec3],
    keep: &[bool],
    next_id: usize,
) -> Option<PatchMesh> {
    let plane = Plane::new(patch.origin, patch.normal);
    let tris2: Vec<[[f64; 2]; 3]> = patch
        .faces
        .iter()
        .map(|&f| mesh.faces[f].map(|v| plane.to_2d(&mesh.vertices[v])))
        .collect();

    let mut cdt: ConstrainedDelaunayTriangulation<Point2<f64>> =
        ConstrainedDelaunayTriangulation::new();
    let mut ids: Vec<usize> = Vec::new();
    let mut by_id: HashMap<usize, spade::handles::FixedVertexHandle> = HashMap::new();
    let mut insert =
        |cdt: &mut ConstrainedDelaunayTriangulation<Point2<f64>>, id: usize, q: [f64; 2]| {
            if let Some(h) = by_id.get(&id) {
                return Some(*h);
            }
            let h = cdt.insert(Point2::new(q[0], q[1])).ok()?;
            if h.index() == ids.len() {
                ids.push(id);
            } else if ids[h.index()] != id {
                return None;
            }
            by_id.insert(id, h);
            Some(h)
        };

    let mut chains = Vec::with_capacity(patch.boundary.len());
    for &[a, b] in &patch.boundary {
        let mut chain = vec![a];
        if let Some(mid) = splits.get(&key(a, b)) {
            if a < b {
                chain.extend(mid.iter().copied());
            } else {
                chain.extend(mid.iter().rev().copied());
            }
        }
        chain.push(b);
        chains.push(chain);
    }
    for chain in &chains {
        for &id in chain {
            insert(&mut cdt, id, plane.to_2d(&positions[id]))?;
        }
    }
    for &f in &patch.faces {
        for &v in &mesh.faces[f] {
            if keep[v] {
                insert(&mut cdt, v, plane.to_2d(&positions[v]))?;
            }
        }
    }

    let segments: Vec<([f64; 2], [f64; 2])> = patch
        .boundary
        .iter()
        .map(|&[a, b]| {
            (
                plane.to_2d(&mesh.vertices[a]),
                plane.to_2d(&mesh.vertices[b]),
            )
        })
        .collect();
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for t in &tris2 {
        for p in t {
            for k in 0..2 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
    }
    let row = target * 3f64.sqrt() / 2.0;
    let clearance = BOUNDARY_CLEARANCE * target;
    let mut new_vertices = Vec::new();
    let mut j = 0usize;
    loop {
        let v = lo[1] + j as f64 * row;
        if v > hi[1] {
            break;
        }
        let mut i = 0usize;
        loop {
            let u = lo[0] + (i as f64 + 0.5 * (j % 2) as f64) * target;
            if u > hi[0] {
                break;
            }
            let q = [u, v];
            if tris2.iter().any(|t| in_triangle(q, t))
                && segments
                    .iter()
                    .all(|(a, b)| segment_distance(q, *a, *b) >= clearance)
            {
                let id = next_id + new_vertices.len();
                insert(&mut cdt, id, q)?;
                new_vertices.push(plane.to_3d(q));
            }
            i += 1;
        }
        j += 1;
    }

    for chain in &chains {
        for w in chain.windows(2) {
            let (ha, hb) = (by_id[&w[0]], by_id[&w[1]]);
            if cdt.try_add_constraint(ha, hb).is_empty() {
                return None;
            }
        }
    }

    let point = |id: usize| -> [f64; 2] {
        if id >= next_id {
            plane.to_2d(&new_vertices[id - next_id])
        } else {
            plane.to_2d(&positions[id])
        }
    };
    let mut faces = Vec::new();
    for face in cdt.inner_faces() {
        let [a, b, c] = face.vertices().map(|v| ids[v.fix().index()]);
        let (pa, pb, pc) = (point(a), point(b), point(c));
        let centroid = [(pa[0] + pb[0] + pc[0]) / 3.0, (pa[1] + pb[1] + pc[1]) / 3.0];
        if !tris2.iter().any(|t| in_triangle(centroid, t)) {
            continue;
        }
        let area = cross2(pa, pb, pc);
        if area > 0.0 {
            faces.push([a, b, c]);
        } else if area < 0.0 {
            faces.push([a, c, b]);
        }
    }
    Some(PatchMesh {
        faces,
        new_vertices,
    })
}

fn patch_diameter(mesh: &Mesh, patch: &PlanarPatch) -> f64 {
    let (mut lo, mut hi) = (Vec3::repeat(f64::INFINITY), Vec3::repeat(f64::NEG_INFINITY));
    for &f in &patch.faces {
        for &v in &mesh.faces[f] {
            lo = lo.inf(&mesh.vertices[v]);
            hi = hi.sup(&mesh.vertices[v]);
        }
    }
    (hi - lo).norm()
}

/// Re-triangulates planar patches towards `target_edge`. Faces outside
/// planar patches, and all original boundary vertices, are copied through
/// bit-identically. Vertex colors are dropped.
pub fn remesh_planar(mesh: &Mesh, target_edge: f64) -> Result<Mesh> {
    if !(target_edge > 0.0 && target_edge.is_finite()) {
        return Err(Error::Config(format!(
            "target edge {target_edge} must be positive"
        )));
    }
    mesh.validate()?;
    let patches = planar_patches(mesh, PLANAR_ANGLE_DEG);
    let mut active: Vec<bool> = patches
        .iter()
        .map(|p| {
            if p.faces.len() < 2 {
                return false;
            }
            if p.non_manifold {
                warn!(
                    "skipping planar patch at face {}: non-manifold interior edge",
                    p.faces[0]
                );
                return false;
            }
            target_edge < patch_diameter(mesh, p)
        })
        .collect();
    let edges = edge_faces(mesh);
    let mut patch_of = vec![usize::MAX; mesh.faces.len()];
    for (i, p) in patches.iter().enumerate() {
        for &f in &p.faces {
            patch_of[f] = i;
        }
    }

    'attempt: loop {
        if !active.iter().any(|a| *a) {
            return Ok(mesh.clone());
        }
        let mut positions = mesh.vertices.clone();
        let mut splits: HashMap<EdgeKey, Vec<usize>> = HashMap::new();
        for (i, p) in patches.iter().enumerate() {
            if !active[i] {
                continue;
            }
            for &[a, b] in &p.boundary {
                let k = key(a, b);
                if splits.contains_key(&k) || !edges[&k].iter().all(|&f| active[patch_of[f]]) {
                    continue;
                }
                let (pa, pb) = (mesh.vertices[k.0], mesh.vertices[k.1]);
                let m = ((pb - pa).norm() / target_edge).ceil().max(1.0) as usize;
                let ids = (1..m)
                    .map(|s| {
                        positions.push(pa + (pb - pa) * (s as f64 / m as f64));
                        positions.len() - 1
                    })
                    .collect();
                splits.insert(k, ids);
            }
        }
        let mut keep = vec![false; mesh.vertices.len()];
        for (f, t) in mesh.faces.iter().enumerate() {
            if patch_of[f] == usize::MAX || !active[patch_of[f]] {
                for &v in t {
                    keep[v] = true;
                }
            }
        }
        for (i, p) in patches.iter().enumerate() {
            if active[i] {
                for e in &p.boundary {
                    keep[e[0]] = true;
                    keep[e[1]] = true;
                }
            }
        }

        let mut built: HashMap<usize, Vec<[usize; 3]>> = HashMap::new();
        for (i, p) in patches.iter().enumerate() {
            if !active[i] {
                continue;
            }
            match triangulate_patch(
                mesh,
                p,
                target_edge,
                &splits,
                &positions,
                &keep,
                positions.len(),
            ) {
                Some(pm) => {
                    positions.extend(pm.new_vertices);
                    built.insert(i, pm.faces);
                }
                None => {
                    warn!(
                        "skipping planar patch at face {}: triangulation failed",
                        p.faces[0]
                    );
                    active[i] = false;
                    continue 'attempt;
                }
            }
        }

        let mut faces = Vec::with_capacity(mesh.faces.len());
        for (f, t) in mesh.faces.iter().enumerate() {
            let p = patch_of[f];
            if p != usize::MAX && active[p] {
                if patches[p].faces[0] == f {
                    faces.extend_from_slice(&built[&p]);
                }
            } else {
                faces.push(*t);
            }
        }
        let patch_normal: Vec<Option<Vec3>> = {
            let mut n = vec![None; positions.len()];
            for (i, p) in patches.iter().enumerate() {
                if active[i] {
                    for t in &built[&i] {
                        for &v in t {
                            if v >= mesh.vertices.len() && n[v].is_none() {
                                n[v] = Some(p.normal);
                            }
                        }
                    }
                }
            }
            n
        };
        // a split vertex on a border edge may not have been touched above
        let normals = mesh.normals.as_ref().map(|ns| {
            (0..positions.len())
                .map(|v| {
                    if v < ns.len() {
                        ns[v]
                    } else {
                        patch_normal[v].unwrap_or(Vec3::z())
                    }
                })
                .collect::<Vec<_>>()
        });
        return compact(positions, faces, normals);
    }
}

fn compact(
    positions: Vec<Vec3>,
    faces: Vec<[usize; 3]>,
    normals: Option<Vec<Vec3>>,
) -> Result<Mesh> {
    let mut remap = vec![usize::MAX; positions.len()];
    let mut vertices = Vec::new();
    let mut kept = Vec::new();
    for t in &faces {
        for &v in t {
            if remap[v] == usize::MAX {
                remap[v] = vertices.len();
                vertices.push(positions[v]);
                kept.push(v);
            }
        }
    }
    // preserve the original relative order of surviving vertices
    let mut order: Vec<usize> = (0..kept.len()).collect();
    order.sort_by_key(|&i| kept[i]);
    let mut final_index = vec![0usize; kept.len()];
    for (new, &i) in order.iter().enumerate() {
        final_index[i] = new;
    }
    let vertices_sorted: Vec<Vec3> = order.iter().map(|&i| vertices[i]).collect();
    let faces = faces
        .iter()
        .map(|t| t.map(|v| final_index[remap[v]]))
        .collect();
    let normals = normals.map(|ns| order.iter().map(|&i| ns[kept[i]]).collect());
    Mesh::new(vertices_sorted, faces, normals, None)
}

/// Median edge length over the edges of the given faces.
pub fn median_edge_length(mesh: &Mesh, faces: impl IntoIterator<Item = usize>) -> Option<f64> {
    let mut seen = std::collections::HashSet::new();
    let mut lengths = Vec::new();
    for f in faces {
        let t = mesh.faces[f];
        for k in 0..3 {
            let e = key(t[k], t[(k + 1) % 3]);
            if seen.insert(e) {
                lengths.push((mesh.vertices[e.0] - mesh.vertices[e.1]).norm());
            }
        }
    }
    if lengths.is_empty() {
        return None;
    }
    lengths.sort_by(f64::total_cmp);
    Some(lengths[lengths.len() / 2])
}

/// Closest point on triangle `abc` to `p`.
pub fn closest_point_on_triangle(p: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> Vec3 {
    let (ab, ac, ap) = (b - a, c - a, p - a);
    let (d1, d2) = (ab.dot(&ap), ac.dot(&ap));
    if d1 <= 0.0 && d2 <= 0.0 {
        return *a;
    }
    let bp = p - b;
    let (d3, d4) = (ab.dot(&bp), ac.dot(&bp));
    if d3 >= 0.0 && d4 <= d3 {
        return *b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        return a + ab * (d1 / (d1 - d3));
    }
    let cp = p - c;
    let (d5, d6) = (ab.dot(&cp), ac.dot(&cp));
    if d6 >= 0.0 && d5 <= d6 {
        return *c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        return a + ac * (d2 / (d2 - d6));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && d4 - d3 >= 0.0 && d5 - d6 >= 0.0 {
        return b + (c - b) * ((d4 - d3) / ((d4 - d3) + (d5 - d6)));
    }
    let denom = 1.0 / (va + vb + vc);
    a + ab * (vb * denom) + ac * (vc * denom)
}

fn point_mesh_distance(p: &Vec3, mesh: &Mesh) -> f64 {
    mesh.faces
        .iter()
        .map(|t| {
            let [a, b, c] = t.map(|v| mesh.vertices[v]);
            (closest_point_on_triangle(p, &a, &b, &c) - p).norm()
        })
        .fold(f64::INFINITY, f64::min)
}

fn area_samples(mesh: &Mesh, n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec3> {
    let mut cdf = Vec::with_capacity(mesh.faces.len());
    let mut acc = 0.0;
    for f in 0..mesh.faces.len() {
        acc += mesh.face_area(f);
        cdf.push(acc);
    }
    (0..n)
        .map(|_| {
            let x = rng.random::<f64>() * acc;
            let f = cdf.partition_point(|&c| c <= x).min(cdf.len() - 1);
            let s = rng.random::<f64>().sqrt();
            let r2 = rng.random::<f64>();
            let [a, b, c] = mesh.corners(f);
            a * (1.0 - s) + b * (s * (1.0 - r2)) + c * (s * r2)
        })
        .collect()
}

/// Symmetric surface deviation: the largest distance from `n` area samples
/// of either mesh to the other mesh. Brute force; meant for small meshes.
pub fn surface_deviation(a: &Mesh, b: &Mesh, n: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sa = area_samples(a, n, &mut rng);
    let sb = area_samples(b, n, &mut rng);
    let ab = sa
        .par_iter()
        .map(|p| point_mesh_distance(p, b))
        .reduce(|| 0.0, f64::max);
    let ba = sb
        .par_iter()
        .map(|p| point_mesh_distance(p, a))
        .reduce(|| 0.0, f64::max);
    ab.max(ba)
}

/// Colors every vertex from the field; `to_field` maps mesh coordinates
/// into the field's frame. Vertices far from every sample keep the nearest
/// color and are reported in the log.
pub fn transfer_colors_mapped(
    mesh: &Mesh,
    field: &SurfaceColorField,
    k: usize,
    to_field: impl Fn(&Vec3) -> Vec3 + Sync,
) -> Result<Mesh> {
    if !field.colored || field.is_empty() {
        return Err(Error::Fusion("color field has not been fused yet".into()));
    }
    let spacing = sample_spacing(field);
    let looked: Vec<(crate::grid::Rgb, f64)> = mesh
        .vertices
        .par_iter()
        .map(|v| field.lookup(&to_field(v), k))
        .collect::<Result<_>>()?;
    let far: Vec<usize> = (0..looked.len())
        .filter(|&i| looked[i].1.sqrt() > 10.0 * spacing)
        .collect();
    if !far.is_empty() {
        warn!(
            "{} vertices are far from every color sample (first: {:?}); using nearest colors",
            far.len(),
            &far[..far.len().min(5)]
        );
    }
    let mut out = mesh.clone();
    out.colors = Some(looked.into_iter().map(|l| l.0).collect());
    Ok(out)
}

pub fn transfer_colors(mesh: &Mesh, field: &SurfaceColorField, k: usize) -> Result<Mesh> {
    transfer_colors_mapped(mesh, field, k, |p| *p)
}

/// Median nearest-neighbour distance over a deterministic subset.
fn sample_spacing(field: &SurfaceColorField) -> f64 {
    let step = (field.len() / 256).max(1);
    let tree = crate::spatial::KdTree::new(field.samples.iter().map(|s| s.position).collect());
    let mut d: Vec<f64> = (0..field.len())
        .step_by(step)
        .filter_map(|i| {
            tree.nearest(&field.samples[i].position, 2)
                .get(1)
                .map(|x| x.1.sqrt())
        })
        .collect();
    if d.is_empty() {
        return f64::INFINITY;
    }
    d.sort_by(f64::total_cmp);
    d[d.len() / 2]
}

/// Writes a mesh that carries per-vertex colors.
pub fn export_colored(mesh: &Mesh, path: &Path, format: MeshFormat) -> Result<()> {
    if mesh.colors.is_none() {
        return Err(Error::MissingAttribute("vertex colors"));
    }
    save_mesh(mesh, path, format)
}
