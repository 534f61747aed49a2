//! Procedural test assets. All are outward-oriented (counter-clockwise seen
//! from outside) and carry unit vertex normals.

use std::collections::HashMap;
use std::f64::consts::PI;

use crate::geometry::{Mesh, Vec3};

fn oriented(vertices: Vec<Vec3>, normals: Vec<Vec3>, faces: Vec<[usize; 3]>) -> Mesh {
    let faces = faces
        .into_iter()
        .map(|[a, b, c]| {
            let cross = (vertices[b] - vertices[a]).cross(&(vertices[c] - vertices[a]));
            let hint = normals[a] + normals[b] + normals[c];
            if cross.dot(&hint) < 0.0 {
                [a, c, b]
            } else {
                [a, b, c]
            }
        })
        .collect();
    Mesh {
        vertices,
        faces,
        normals: Some(normals),
        colors: None,
    }
}

/// Square `[-half, half]^2` in the plane `z = z`, facing +Z.
pub fn quad(half: f64, z: f64) -> Mesh {
    let vertices = vec![
        Vec3::new(-half, -half, z),
        Vec3::new(half, -half, z),
        Vec3::new(half, half, z),
        Vec3::new(-half, half, z),
    ];
    Mesh {
        vertices,
        faces: vec![[0, 1, 2], [0, 2, 3]],
        normals: Some(vec![Vec3::z(); 4]),
        colors: None,
    }
}

/// Axis-aligned cube with the given side, centered at the origin. Each side
/// has its own four vertices so normals stay flat.
pub fn cube(side: f64) -> Mesh {
    let h = side * 0.5;
    let mut vertices = Vec::new();
    let mut normals = Vec::new();
    let mut faces = Vec::new();
    for axis in 0..3 {
        for sign in [1.0, -1.0] {
            let mut n = Vec3::zeros();
            n[axis] = sign;
            let mut u = Vec3::zeros();
            u[(axis + 1) % 3] = 1.0;
            let mut v = Vec3::zeros();
            v[(axis + 2) % 3] = 1.0;
            let mut quad = [
                n * h - u * h - v * h,
                n * h + u * h - v * h,
                n * h + u * h + v * h,
                n * h - u * h + v * h,
            ];
            if sign < 0.0 {
                quad.reverse();
            }
            let base = vertices.len();
            vertices.extend_from_slice(&quad);
            normals.extend_from_slice(&[n; 4]);
            faces.push([base, base + 1, base + 2]);
            faces.push([base, base + 2, base + 3]);
        }
    }
    Mesh {
        vertices,
        faces,
        normals: Some(normals),
        colors: None,
    }
}

/// Subdivided icosahedron on a sphere of `radius`; `20 * 4^level` faces.
pub fn icosphere(radius: f64, level: usize) -> Mesh {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut verts: Vec<Vec3> = [
        (-1.0, t, 0.0),
        (1.0, t, 0.0),
        (-1.0, -t, 0.0),
        (1.0, -t, 0.0),
        (0.0, -1.0, t),
        (0.0, 1.0, t),
        (0.0, -1.0, -t),
        (0.0, 1.0, -t),
        (t, 0.0, -1.0),
        (t, 0.0, 1.0),
        (-t, 0.0, -1.0),
        (-t, 0.0, 1.0),
    ]
    .iter()
    .map(|&(x, y, z)| Vec3::new(x, y, z).normalize())
    .collect();
    let mut faces: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..level {
        let mut cache: HashMap<(usize, usize), usize> = HashMap::new();
        let mut midpoint = |a: usize, b: usize, verts: &mut Vec<Vec3>| {
            let key = (a.min(b), a.max(b));
            *cache.entry(key).or_insert_with(|| {
                verts.push(((verts[a] + verts[b]) * 0.5).normalize());
                verts.len() - 1
            })
        };
        let mut next = Vec::with_capacity(faces.len() * 4);
        for [a, b, c] in faces {
            let ab = midpoint(a, b, &mut verts);
            let bc = midpoint(b, c, &mut verts);
            let ca = midpoint(c, a, &mut verts);
            next.extend_from_slice(&[[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        faces = next;
    }
    let normals = verts.clone();
    let vertices = verts.iter().map(|v| v * radius).collect();
    oriented(vertices, normals, faces)
}

/// Torus around the Y axis with `2 * major_segments * minor_segments` faces.
pub fn torus(major: f64, minor: f64, major_segments: usize, minor_segments: usize) -> Mesh {
    let mut vertices = Vec::new();
    let mut normals = Vec::new();
    for i in 0..major_segments {
        let u = 2.0 * PI * i as f64 / major_segments as f64;
        for j in 0..minor_segments {
            let v = 2.0 * PI * j as f64 / minor_segments as f64;
            let ring = Vec3::new(u.cos(), 0.0, u.sin());
            let n = ring * v.cos() + Vec3::y() * v.sin();
            vertices.push(ring * major + n * minor);
            normals.push(n);
        }
    }
    let idx = |i: usize, j: usize| (i % major_segments) * minor_segments + (j % minor_segments);
    let mut faces = Vec::new();
    for i in 0..major_segments {
        for j in 0..minor_segments {
            let (a, b, c, d) = (idx(i, j), idx(i + 1, j), idx(i + 1, j + 1), idx(i, j + 1));
            faces.push([a, b, c]);
            faces.push([a, c, d]);
        }
    }
    oriented(vertices, normals, faces)
}

/// Non-convex test asset of about 5k triangles: a torus with a small tilt so
/// that horizontal views see both self-occlusion and the inner hole.
pub fn occluder_torus() -> Mesh {
    let mut m = torus(0.62, 0.3, 72, 36);
    let (s, c) = (20f64.to_radians().sin(), 20f64.to_radians().cos());
    let tilt = |v: &Vec3| Vec3::new(v.x, c * v.y - s * v.z, s * v.y + c * v.z);
    m.vertices = m.vertices.iter().map(tilt).collect();
    m.normals = m.normals.map(|ns| ns.iter().map(tilt).collect());
    m
}
