//! Point cloud to mesh: unsigned distance field minus a surface offset,
//! polygonized with marching cubes.
//!
//! The case table is derived at first use instead of being transcribed. For
//! every cube face the crossing edges are paired so that each run of inside
//! corners is cut off on its own (ambiguous faces separate the inside
//! corners). The rule depends only on the four corner signs of a face, so
//! neighbouring cells always agree and the output is watertight.

use std::collections::HashMap;
use std::sync::OnceLock;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{Mesh, Vec3};
use crate::spatial::KdTree;

pub const DEFAULT_GRID: usize = 64;

/// Ratio of the surface offset to the mean nearest-neighbour spacing.
const OFFSET_FACTOR: f64 = 2.5;

/// Cube corner `c` sits at `(c & 1, (c >> 1) & 1, (c >> 2) & 1)`.
fn corner(c: usize) -> [usize; 3] {
    [c & 1, (c >> 1) & 1, (c >> 2) & 1]
}

/// The 12 cube edges as corner pairs, `a < b`.
fn edges() -> &'static [(usize, usize); 12] {
    static EDGES: OnceLock<[(usize, usize); 12]> = OnceLock::new();
    EDGES.get_or_init(|| {
        let mut out = [(0, 0); 12];
        let mut k = 0;
        for a in 0..8 {
            for bit in [1, 2, 4] {
                if a & bit == 0 {
                    out[k] = (a, a | bit);
                    k += 1;
                }
            }
        }
        out
    })
}

fn edge_index(a: usize, b: usize) -> usize {
    let key = (a.min(b), a.max(b));
    edges().iter().position(|&e| e == key).expect("cube edge")
}

/// Face corner cycles, counter-clockwise seen from outside the cube.
fn faces() -> Vec<[usize; 4]> {
    let mut out = Vec::with_capacity(6);
    for axis in 0..3 {
        let (u, v) = (1 << ((axis + 1) % 3), 1 << ((axis + 2) % 3));
        for side in 0..2 {
            let base = side << axis;
            let mut cyc = [base, base | u, base | u | v, base | v];
            if side == 0 {
                cyc.reverse();
            }
            out.push(cyc);
        }
    }
    out
}

/// Triangles (as edge triples) for each of the 256 inside-corner masks.
fn case_table() -> &'static Vec<Vec<[usize; 3]>> {
    static TABLE: OnceLock<Vec<Vec<[usize; 3]>>> = OnceLock::new();
    TABLE.get_or_init(|| {
        let faces = faces();
        (0..256usize)
            .map(|mask| {
                let inside = |c: usize| mask >> c & 1 == 1;
                // Each crossing edge gets exactly one successor in the loop.
                let mut next: [Option<usize>; 12] = [None; 12];
                for cyc in &faces {
                    for s in 0..4 {
                        // Start of an inside run: outside corner followed by inside corner.
                        let (p, q) = (cyc[s], cyc[(s + 1) % 4]);
                        if inside(p) || !inside(q) {
                            continue;
                        }
                        let entry = edge_index(p, q);
                        let mut t = (s + 1) % 4;
                        while inside(cyc[(t + 1) % 4]) {
                            t = (t + 1) % 4;
                        }
                        let exit = edge_index(cyc[t], cyc[(t + 1) % 4]);
                        next[entry] = Some(exit);
                    }
                }
                let mut tris = Vec::new();
                let mut seen = [false; 12];
                for start in 0..12 {
                    if seen[start] || next[start].is_none() {
                        continue;
                    }
                    let mut cycle = vec![start];
                    seen[start] = true;
                    let mut cur = next[start].expect("loop");
                    while cur != start {
                        seen[cur] = true;
                        cycle.push(cur);
                        cur = next[cur].expect("closed loop");
                    }
                    for k in 1..cycle.len() - 1 {
                        tris.push([cycle[0], cycle[k], cycle[k + 1]]);
                    }
                }
                tris
            })
            .collect()
    })
}

/// Polygonizes the zero level set of a sampled scalar field on a regular
/// grid of `n^3` points (`n - 1` cells per axis). Negative values are
/// inside; triangles face toward positive values.
pub(crate) fn marching_cubes(values: &[f64], n: usize, origin: Vec3, cell: f64) -> Mesh {
    let at = |x: usize, y: usize, z: usize| (z * n + y) * n + x;
    let table = case_table();
    let mut vertex_of: HashMap<(usize, usize), usize> = HashMap::new();
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for z in 0..n - 1 {
        for y in 0..n - 1 {
            for x in 0..n - 1 {
                let gid = |c: usize| {
                    let [dx, dy, dz] = corner(c);
                    at(x + dx, y + dy, z + dz)
                };
                let mut mask = 0;
                for c in 0..8 {
                    if values[gid(c)] < 0.0 {
                        mask |= 1 << c;
                    }
                }
                if mask == 0 || mask == 255 {
                    continue;
                }
                for tri in &table[mask] {
                    let mut idx = [0usize; 3];
                    for (slot, &e) in tri.iter().enumerate() {
                        let (a, b) = edges()[e];
                        let (ga, gb) = (gid(a), gid(b));
                        idx[slot] = *vertex_of.entry((ga, gb)).or_insert_with(|| {
                            let (va, vb) = (values[ga], values[gb]);
                            let t = va / (va - vb);
                            let pa = corner(a).map(|c| c as f64);
                            let pb = corner(b).map(|c| c as f64);
                            let local = Vec3::new(
                                pa[0] + t * (pb[0] - pa[0]),
                                pa[1] + t * (pb[1] - pa[1]),
                                pa[2] + t * (pb[2] - pa[2]),
                            );
                            vertices.push(
                                origin + (Vec3::new(x as f64, y as f64, z as f64) + local) * cell,
                            );
                            vertices.len() - 1
                        });
                    }
                    if idx[0] != idx[1] && idx[1] != idx[2] && idx[0] != idx[2] {
                        faces.push(idx);
                    }
                }
            }
        }
    }
    Mesh {
        vertices,
        faces,
        normals: None,
        colors: None,
    }
}

/// Surface offset used by [`pointcloud_to_mesh`]: 2.5 times the mean
/// nearest-neighbour spacing.
pub fn surface_offset(points: &[Vec3]) -> f64 {
    let tree = KdTree::new(points.to_vec());
    let total: f64 = points
        .par_iter()
        .map(|p| tree.nearest(p, 2).get(1).map_or(0.0, |&(_, d2)| d2.sqrt()))
        .sum();
    OFFSET_FACTOR * total / points.len() as f64
}

/// Meshes a point cloud through an unsigned distance field offset by
/// [`surface_offset`]. `grid` is the number of cells along the longest
/// axis. The field carries no sign, so a closed sampled surface yields an
/// outer and an inner shell around the points.
pub fn pointcloud_to_mesh(points: &[Vec3], grid: usize) -> Result<Mesh> {
    if points.len() < 4 {
        return Err(Error::Degenerate(format!(
            "{} points, need at least 4",
            points.len()
        )));
    }
    if grid < 8 {
        return Err(Error::Config(format!("grid {grid} below minimum of 8")));
    }
    let (lo, hi) = points
        .iter()
        .fold((points[0], points[0]), |(lo, hi), p| (lo.inf(p), hi.sup(p)));
    let extent = hi - lo;
    if extent.max() <= 1e-12 {
        return Err(Error::Degenerate("point cloud has zero extent".into()));
    }
    if extent.min() <= 1e-9 * extent.max() {
        return Err(Error::Degenerate("point cloud is planar".into()));
    }
    let offset = surface_offset(points);
    if !(offset > 0.0) {
        return Err(Error::Degenerate("all points coincide".into()));
    }
    // Pad by the offset plus two cells on each side.
    let cell = (extent.max() + 2.0 * offset) / (grid - 4) as f64;
    if offset < 0.5 * cell {
        return Err(Error::Config(format!(
            "grid {grid} too coarse: cell {cell:.4} vs surface offset {offset:.4}"
        )));
    }
    let n = grid + 1;
    let center = (lo + hi) * 0.5;
    let origin = center - Vec3::repeat(cell * grid as f64 * 0.5);
    let tree = KdTree::new(points.to_vec());
    let values: Vec<f64> = (0..n * n * n)
        .into_par_iter()
        .map(|i| {
            let (x, y, z) = (i % n, (i / n) % n, i / (n * n));
            let p = origin + Vec3::new(x as f64, y as f64, z as f64) * cell;
            let (_, d2) = tree.nearest_one(&p).expect("non-empty tree");
            d2.sqrt() - offset
        })
        .collect();
    let mesh = marching_cubes(&values, n, origin, cell);
    if mesh.faces.is_empty() {
        return Err(Error::Degenerate("distance field has no surface".into()));
    }
    Ok(mesh)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, UnitSphere};
    use std::collections::HashMap as Map;

    fn edge_use(m: &Mesh) -> Map<(usize, usize), i32> {
        // +1 for a directed edge, -1 for its reverse; closed oriented meshes cancel.
        let mut map = Map::new();
        for f in &m.faces {
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                *map.entry((a.min(b), a.max(b))).or_insert(0) += if a < b { 1 } else { -1 };
            }
        }
        map
    }

    #[test]
    fn table_covers_all_cases_consistently() {
        let t = case_table();
        assert_eq!(t.len(), 256);
        assert!(t[0].is_empty() && t[255].is_empty());
        assert_eq!(t[1].len(), 1);
        // Complementary single corner: one triangle of opposite winding.
        assert_eq!(t[254].len(), 1);
        for tris in t {
            assert!(tris.len() <= 5);
        }
    }

    #[test]
    fn analytic_sphere_is_watertight_and_outward() {
        let n = 33;
        let cell = 2.4 / (n - 1) as f64;
        let origin = Vec3::repeat(-1.2);
        let mut values = Vec::with_capacity(n * n * n);
        for z in 0..n {
            for y in 0..n {
                for x in 0..n {
                    let p = origin + Vec3::new(x as f64, y as f64, z as f64) * cell;
                    values.push(p.norm() - 0.8);
                }
            }
        }
        let m = marching_cubes(&values, n, origin, cell);
        assert!(
            edge_use(&m).values().all(|&v| v == 0),
            "not closed/oriented"
        );
        let vol: f64 = m
            .faces
            .iter()
            .map(|&[a, b, c]| m.vertices[a].dot(&m.vertices[b].cross(&m.vertices[c])) / 6.0)
            .sum();
        let exact = 4.0 / 3.0 * std::f64::consts::PI * 0.8f64.powi(3);
        assert!((vol - exact).abs() / exact < 0.02, "{vol} vs {exact}");
        for v in &m.vertices {
            assert!((v.norm() - 0.8).abs() < 3f64.sqrt() * cell);
        }
    }

    #[test]
    fn sampled_sphere_radii() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<Vec3> = (0..10_000)
            .map(|_| {
                let [x, y, z]: [f64; 3] = UnitSphere.sample(&mut rng);
                Vec3::new(x, y, z) * 0.8
            })
            .collect();
        let m = pointcloud_to_mesh(&pts, DEFAULT_GRID).unwrap();
        let tol = 2.0 * 3f64.sqrt() / 64.0;
        for v in &m.vertices {
            assert!((v.norm() - 0.8).abs() <= tol, "radius {}", v.norm());
        }
        assert!(edge_use(&m).values().all(|&v| v == 0));
    }

    #[test]
    fn degenerate_clouds_fail() {
        assert!(pointcloud_to_mesh(&[], 64).is_err());
        let flat: Vec<Vec3> = (0..50)
            .map(|i| Vec3::new(i as f64, (i * 7 % 5) as f64, 0.0))
            .collect();
        assert!(pointcloud_to_mesh(&flat, 64).is_err());
        let pts: Vec<Vec3> = (0..100)
            .map(|i| Vec3::new((i % 5) as f64, (i / 5 % 5) as f64, (i / 25) as f64))
            .collect();
        assert!(pointcloud_to_mesh(&pts, 4).is_err());
    }
}
