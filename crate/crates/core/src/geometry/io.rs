//! OBJ and PLY readers/writers.
//!
//! OBJ: `v x y z [r g b]`, `vn`, `f` with `v`, `v/vt`, `v//vn` or `v/vt/vn`
//! corners and negative indices. PLY: ascii, binary_little_endian and
//! binary_big_endian with a `vertex` element (x, y, z, optional nx/ny/nz and
//! red/green/blue) and a `face` element holding an index list.
//! Polygons are fan-triangulated; vertices are never merged.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Mesh, Vec3};
use crate::grid::{quantize_u8, write_atomic, Rgb};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MeshFormat {
    Obj,
    Ply,
}

impl MeshFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        match path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .as_deref()
        {
            Some("obj") => Ok(MeshFormat::Obj),
            Some("ply") => Ok(MeshFormat::Ply),
            _ => Err(Error::parse(
                path,
                "unknown mesh extension (expected .obj or .ply)",
            )),
        }
    }
}

/// Raw geometry before the "must have faces" check.
#[derive(Debug, Clone)]
struct RawGeometry {
    vertices: Vec<Vec3>,
    faces: Vec<[usize; 3]>,
    normals: Option<Vec<Vec3>>,
    colors: Option<Vec<Rgb>>,
}

/// Loads a triangle mesh. Fails on files without faces.
pub fn load_mesh(path: &Path, format: MeshFormat) -> Result<Mesh> {
    let raw = load_raw(path, format)?;
    if raw.vertices.is_empty() || raw.faces.is_empty() {
        return Err(Error::EmptyMesh);
    }
    Mesh::new(raw.vertices, raw.faces, raw.normals, raw.colors)
}

/// Loads only vertex positions: a PLY/OBJ vertex list or whitespace
/// separated `x y z` lines for any other extension.
pub fn load_points(path: &Path) -> Result<Vec<Vec3>> {
    let points = match MeshFormat::from_path(path) {
        Ok(format) => load_raw(path, format)?.vertices,
        Err(_) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let mut pts = Vec::new();
            for (ln, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let vals: Vec<f64> = line
                    .split(|c: char| c.is_whitespace() || c == ',')
                    .filter(|s| !s.is_empty())
                    .map(|s| s.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| Error::parse(path, format!("line {}: {e}", ln + 1)))?;
                if vals.len() < 3 {
                    return Err(Error::parse(
                        path,
                        format!("line {}: expected x y z", ln + 1),
                    ));
                }
                pts.push(Vec3::new(vals[0], vals[1], vals[2]));
            }
            pts
        }
    };
    Ok(points)
}

/// True when the file holds vertices but no faces.
pub fn is_point_cloud(path: &Path) -> Result<bool> {
    match MeshFormat::from_path(path) {
        Ok(format) => Ok(load_raw(path, format)?.faces.is_empty()),
        Err(_) => Ok(true),
    }
}

fn load_raw(path: &Path, format: MeshFormat) -> Result<RawGeometry> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    match format {
        MeshFormat::Obj => parse_obj(&String::from_utf8_lossy(&bytes), path),
        MeshFormat::Ply => parse_ply(&bytes, path),
    }
}

fn push_fan(faces: &mut Vec<[usize; 3]>, poly: &[usize]) {
    for k in 1..poly.len() - 1 {
        let tri = [poly[0], poly[k], poly[k + 1]];
        if tri[0] == tri[1] || tri[1] == tri[2] || tri[0] == tri[2] {
            log::warn!("dropping degenerate triangle {tri:?}");
            continue;
        }
        faces.push(tri);
    }
}

fn parse_obj(text: &str, path: &Path) -> Result<RawGeometry> {
    let mut vertices = Vec::new();
    let mut colors: Vec<Rgb> = Vec::new();
    let mut vn = Vec::new();
    let mut faces = Vec::new();
    // Per-vertex accumulated normals referenced from face corners.
    let mut corner_normals: Vec<(usize, usize)> = Vec::new();

    let resolve = |tok: &str, count: usize, ln: usize| -> Result<usize> {
        let i: i64 = tok
            .parse()
            .map_err(|_| Error::parse(path, format!("line {ln}: bad index '{tok}'")))?;
        if i > 0 {
            Ok(i as usize - 1)
        } else if i < 0 && (-i) as usize <= count {
            Ok((count as i64 + i) as usize)
        } else {
            Err(Error::parse(path, format!("line {ln}: bad index '{tok}'")))
        }
    };
    let floats = |rest: &[&str], ln: usize| -> Result<Vec<f64>> {
        rest.iter()
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|_| Error::parse(path, format!("line {ln}: bad number '{s}'")))
            })
            .collect()
    };

    for (i, line) in text.lines().enumerate() {
        let ln = i + 1;
        let toks: Vec<&str> = line.split_whitespace().collect();
        let Some((&head, rest)) = toks.split_first() else {
            continue;
        };
        match head {
            "v" => {
                let vals = floats(rest, ln)?;
                if vals.len() < 3 {
                    return Err(Error::parse(
                        path,
                        format!("line {ln}: vertex needs 3 coordinates"),
                    ));
                }
                vertices.push(Vec3::new(vals[0], vals[1], vals[2]));
                if vals.len() >= 6 {
                    colors.push([vals[3] as f32, vals[4] as f32, vals[5] as f32]);
                }
            }
            "vn" => {
                let vals = floats(rest, ln)?;
                if vals.len() < 3 {
                    return Err(Error::parse(
                        path,
                        format!("line {ln}: normal needs 3 components"),
                    ));
                }
                vn.push(Vec3::new(vals[0], vals[1], vals[2]));
            }
            "f" => {
                if rest.len() < 3 {
                    return Err(Error::parse(
                        path,
                        format!("line {ln}: face needs 3 corners"),
                    ));
                }
                let mut poly = Vec::with_capacity(rest.len());
                for corner in rest {
                    let mut parts = corner.split('/');
                    let v = resolve(parts.next().unwrap_or(""), vertices.len(), ln)?;
                    if v >= vertices.len() {
                        return Err(Error::IndexOutOfRange {
                            index: v,
                            count: vertices.len(),
                        });
                    }
                    if let Some(n) = parts.nth(1).filter(|s| !s.is_empty()) {
                        corner_normals.push((v, resolve(n, vn.len(), ln)?));
                    }
                    poly.push(v);
                }
                push_fan(&mut faces, &poly);
            }
            _ => {}
        }
    }

    let colors = if colors.is_empty() {
        None
    } else if colors.len() != vertices.len() {
        return Err(Error::parse(
            path,
            "vertex colors present on only some vertices",
        ));
    } else {
        let scale = if colors.iter().flatten().any(|&c| c > 1.0) {
            1.0 / 255.0
        } else {
            1.0
        };
        Some(
            colors
                .into_iter()
                .map(|c| c.map(|x| (x * scale).clamp(0.0, 1.0)))
                .collect(),
        )
    };

    let normals = if corner_normals.is_empty() {
        None
    } else {
        let mut acc = vec![Vec3::zeros(); vertices.len()];
        for (v, n) in corner_normals {
            let n = *vn.get(n).ok_or_else(|| {
                Error::parse(path, format!("normal index {} out of range", n + 1))
            })?;
            acc[v] += n;
        }
        if acc.iter().all(|n| n.norm() > 1e-12) {
            Some(acc.into_iter().map(|n| n.normalize()).collect())
        } else {
            log::warn!(
                "{}: normals missing on some vertices, ignoring them",
                path.display()
            );
            None
        }
    };

    Ok(RawGeometry {
        vertices,
        faces,
        normals,
        colors,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(s: &str) -> Option<Scalar> {
        Some(match s {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }
}

#[derive(Debug, Clone)]
enum PropKind {
    Scalar(Scalar),
    List(Scalar, Scalar),
}

#[derive(Debug, Clone)]
struct Element {
    name: String,
    count: usize,
    props: Vec<(String, PropKind)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum PlyEncoding {
    Ascii,
    LittleEndian,
    BigEndian,
}

struct PlyReader<'a> {
    data: &'a [u8],
    pos: usize,
    encoding: PlyEncoding,
    tokens: std::vec::IntoIter<&'a str>,
    path: &'a Path,
}

impl PlyReader<'_> {
    fn read(&mut self, ty: Scalar) -> Result<f64> {
        if self.encoding == PlyEncoding::Ascii {
            let tok = self
                .tokens
                .next()
                .ok_or_else(|| Error::parse(self.path, "unexpected end of ascii body"))?;
            return tok
                .parse::<f64>()
                .map_err(|_| Error::parse(self.path, format!("bad number '{tok}'")));
        }
        let n = ty.size();
        let bytes = self
            .data
            .get(self.pos..self.pos + n)
            .ok_or_else(|| Error::parse(self.path, "unexpected end of binary body"))?;
        self.pos += n;
        let mut buf = [0u8; 8];
        buf[..n].copy_from_slice(bytes);
        if self.encoding == PlyEncoding::BigEndian {
            buf[..n].reverse();
        }
        Ok(match ty {
            Scalar::I8 => buf[0] as i8 as f64,
            Scalar::U8 => buf[0] as f64,
            Scalar::I16 => i16::from_le_bytes([buf[0], buf[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([buf[0], buf[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes([buf[0], buf[1], buf[2], buf[3]]) as f64,
            Scalar::U32 => u32::from_le_bytes([buf[0], buf[1], buf[2], buf[3]]) as f64,
            Scalar::F32 => f32::from_le_bytes([buf[0], buf[1], buf[2], buf[3]]) as f64,
            Scalar::F64 => f64::from_le_bytes(buf),
        })
    }
}

fn parse_ply(bytes: &[u8], path: &Path) -> Result<RawGeometry> {
    const END: &[u8] = b"end_header";
    let end = bytes
        .windows(END.len())
        .position(|w| w == END)
        .ok_or_else(|| Error::parse(path, "missing end_header"))?;
    let mut body_start = end + END.len();
    while body_start < bytes.len() && bytes[body_start] != b'\n' {
        body_start += 1;
    }
    body_start += 1;
    let header = std::str::from_utf8(&bytes[..end])
        .map_err(|_| Error::parse(path, "header is not UTF-8"))?;
    let mut lines = header.lines();
    if lines.next().map(str::trim) != Some("ply") {
        return Err(Error::parse(path, "missing 'ply' magic"));
    }
    let mut encoding = None;
    let mut elements: Vec<Element> = Vec::new();
    for line in lines {
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["format", f, _] => {
                encoding = Some(match *f {
                    "ascii" => PlyEncoding::Ascii,
                    "binary_little_endian" => PlyEncoding::LittleEndian,
                    "binary_big_endian" => PlyEncoding::BigEndian,
                    other => return Err(Error::parse(path, format!("unknown format '{other}'"))),
                })
            }
            ["element", name, count] => elements.push(Element {
                name: name.to_string(),
                count: count
                    .parse()
                    .map_err(|_| Error::parse(path, format!("bad element count '{count}'")))?,
                props: Vec::new(),
            }),
            ["property", "list", ct, it, name] => {
                let (Some(ct), Some(it)) = (Scalar::parse(ct), Scalar::parse(it)) else {
                    return Err(Error::parse(path, format!("bad list property '{line}'")));
                };
                elements
                    .last_mut()
                    .ok_or_else(|| Error::parse(path, "property before element"))?
                    .props
                    .push((name.to_string(), PropKind::List(ct, it)));
            }
            ["property", ty, name] => {
                let ty = Scalar::parse(ty)
                    .ok_or_else(|| Error::parse(path, format!("bad property type '{ty}'")))?;
                elements
                    .last_mut()
                    .ok_or_else(|| Error::parse(path, "property before element"))?
                    .props
                    .push((name.to_string(), PropKind::Scalar(ty)));
            }
            _ => {}
        }
    }
    let encoding = encoding.ok_or_else(|| Error::parse(path, "missing format line"))?;
    let body = bytes.get(body_start..).unwrap_or(&[]);
    let ascii_body = if encoding == PlyEncoding::Ascii {
        std::str::from_utf8(body).map_err(|_| Error::parse(path, "ascii body is not UTF-8"))?
    } else {
        ""
    };
    let mut reader = PlyReader {
        data: body,
        pos: 0,
        encoding,
        tokens: ascii_body
            .split_whitespace()
            .collect::<Vec<_>>()
            .into_iter(),
        path,
    };

    let mut vertices = Vec::new();
    let mut normals = Vec::new();
    let mut colors = Vec::new();
    let mut faces = Vec::new();
    let mut color_is_byte = true;
    for el in &elements {
        let find = |n: &str| el.props.iter().position(|(p, _)| p == n);
        let xyz = [find("x"), find("y"), find("z")];
        let nrm = [find("nx"), find("ny"), find("nz")];
        let rgb = [find("red"), find("green"), find("blue")];
        if let Some((_, PropKind::Scalar(t))) = rgb[0].map(|i| &el.props[i]) {
            color_is_byte = !matches!(t, Scalar::F32 | Scalar::F64);
        }
        let mut scalars = vec![0.0; el.props.len()];
        let mut list: Vec<usize> = Vec::new();
        for _ in 0..el.count {
            list.clear();
            for (k, (pname, kind)) in el.props.iter().enumerate() {
                match kind {
                    PropKind::Scalar(t) => scalars[k] = reader.read(*t)?,
                    PropKind::List(ct, it) => {
                        let n = reader.read(*ct)? as usize;
                        let keep = pname == "vertex_indices" || pname == "vertex_index";
                        for _ in 0..n {
                            let v = reader.read(*it)?;
                            if keep {
                                if v < 0.0 {
                                    return Err(Error::parse(path, "negative face index"));
                                }
                                list.push(v as usize);
                            }
                        }
                    }
                }
            }
            if el.name == "vertex" {
                let (Some(x), Some(y), Some(z)) = (xyz[0], xyz[1], xyz[2]) else {
                    return Err(Error::parse(path, "vertex element lacks x/y/z"));
                };
                vertices.push(Vec3::new(scalars[x], scalars[y], scalars[z]));
                if let (Some(a), Some(b), Some(c)) = (nrm[0], nrm[1], nrm[2]) {
                    normals.push(Vec3::new(scalars[a], scalars[b], scalars[c]));
                }
                if let (Some(r), Some(g), Some(b)) = (rgb[0], rgb[1], rgb[2]) {
                    colors.push([scalars[r] as f32, scalars[g] as f32, scalars[b] as f32]);
                }
            } else if el.name == "face" {
                if list.len() < 3 {
                    return Err(Error::parse(path, "face with fewer than 3 vertices"));
                }
                if let Some(&bad) = list.iter().find(|&&i| i >= vertices.len()) {
                    return Err(Error::IndexOutOfRange {
                        index: bad,
                        count: vertices.len(),
                    });
                }
                push_fan(&mut faces, &list);
            }
        }
    }

    let normals = (!normals.is_empty()).then(|| {
        normals
            .into_iter()
            .map(|n| {
                if n.norm() > 1e-12 {
                    n.normalize()
                } else {
                    Vec3::y()
                }
            })
            .collect()
    });
    let colors = (!colors.is_empty()).then(|| {
        let scale = if color_is_byte { 1.0 / 255.0 } else { 1.0 };
        colors
            .into_iter()
            .map(|c| c.map(|x| (x * scale).clamp(0.0, 1.0)))
            .collect()
    });
    Ok(RawGeometry {
        vertices,
        faces,
        normals,
        colors,
    })
}

/// Writes a mesh. PLY is binary little-endian with double positions, float
/// normals and uchar RGB; OBJ stores colors as `v x y z r g b`.
pub fn save_mesh(mesh: &Mesh, path: &Path, format: MeshFormat) -> Result<()> {
    let bytes = match format {
        MeshFormat::Ply => ply_bytes(mesh),
        MeshFormat::Obj => obj_text(mesh).into_bytes(),
    };
    write_atomic(path, &bytes)
}

fn ply_bytes(mesh: &Mesh) -> Vec<u8> {
    let mut header = String::from("ply\nformat binary_little_endian 1.0\n");
    let _ = writeln!(header, "element vertex {}", mesh.vertices.len());
    header.push_str("property double x\nproperty double y\nproperty double z\n");
    if mesh.normals.is_some() {
        header.push_str("property float nx\nproperty float ny\nproperty float nz\n");
    }
    if mesh.colors.is_some() {
        header.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    }
    let _ = writeln!(header, "element face {}", mesh.faces.len());
    header.push_str("property list uchar uint vertex_indices\nend_header\n");
    let mut out = header.into_bytes();
    for (i, v) in mesh.vertices.iter().enumerate() {
        for c in v.iter() {
            out.extend_from_slice(&c.to_le_bytes());
        }
        if let Some(ns) = &mesh.normals {
            for c in ns[i].iter() {
                out.extend_from_slice(&(*c as f32).to_le_bytes());
            }
        }
        if let Some(cs) = &mesh.colors {
            out.extend(cs[i].iter().map(|&c| quantize_u8(c)));
        }
    }
    for f in &mesh.faces {
        out.push(3);
        for &i in f {
            out.extend_from_slice(&(i as u32).to_le_bytes());
        }
    }
    out
}

fn obj_text(mesh: &Mesh) -> String {
    let mut s = String::new();
    for (i, v) in mesh.vertices.iter().enumerate() {
        let _ = write!(s, "v {:?} {:?} {:?}", v.x, v.y, v.z);
        if let Some(cs) = &mesh.colors {
            let q = cs[i].map(|c| quantize_u8(c) as f64 / 255.0);
            let _ = write!(s, " {} {} {}", q[0], q[1], q[2]);
        }
        s.push('\n');
    }
    if let Some(ns) = &mesh.normals {
        for n in ns {
            let _ = writeln!(s, "vn {:?} {:?} {:?}", n.x, n.y, n.z);
        }
    }
    for f in &mesh.faces {
        if mesh.normals.is_some() {
            let _ = writeln!(
                s,
                "f {0}//{0} {1}//{1} {2}//{2}",
                f[0] + 1,
                f[1] + 1,
                f[2] + 1
            );
        } else {
            let _ = writeln!(s, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
        }
    }
    s
}
