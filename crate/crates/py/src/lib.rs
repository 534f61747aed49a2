//! Python bindings: meshes, cameras, rendering, planning, the pipeline and
//! the evaluation metrics.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use repaint3d::eval::{self, FeatureSet};
use repaint3d::geometry::{self as geo, primitives, MeshFormat, Vec3};
use repaint3d::pipeline::{self as pl, PipelineConfig};
use repaint3d::raster::{render_depth as raster_depth, Culling};
use repaint3d::remesh;
use repaint3d::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } | Error::Image { .. } => PyIOError::new_err(e.to_string()),
        Error::Config(_)
        | Error::Parse { .. }
        | Error::Schema(_)
        | Error::InvalidMesh(_)
        | Error::InvalidCamera(_)
        | Error::DimensionMismatch(_)
        | Error::IndexOutOfRange { .. }
        | Error::EmptyMesh
        | Error::Disconnected(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

#[pyclass(name = "Mesh", module = "repaint3d")]
struct PyMesh {
    inner: geo::Mesh,
}

#[pymethods]
impl PyMesh {
    #[new]
    #[pyo3(signature = (vertices, faces))]
    fn new(vertices: Vec<[f64; 3]>, faces: Vec<[usize; 3]>) -> PyResult<Self> {
        let v = vertices.into_iter().map(Vec3::from).collect();
        geo::Mesh::new(v, faces, None, None)
            .map(|inner| PyMesh { inner })
            .map_err(to_py)
    }

    #[staticmethod]
    #[pyo3(signature = (radius = 1.0, level = 3))]
    fn icosphere(radius: f64, level: usize) -> Self {
        PyMesh {
            inner: primitives::icosphere(radius, level),
        }
    }

    #[staticmethod]
    #[pyo3(signature = (side = 1.0))]
    fn cube(side: f64) -> Self {
        PyMesh {
            inner: primitives::cube(side),
        }
    }

    #[staticmethod]
    #[pyo3(signature = (half = 0.5, z = 0.0))]
    fn quad(half: f64, z: f64) -> Self {
        PyMesh {
            inner: primitives::quad(half, z),
        }
    }

    #[staticmethod]
    fn occluder_torus() -> Self {
        PyMesh {
            inner: primitives::occluder_torus(),
        }
    }

    /// Loads an OBJ or PLY mesh.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let format = MeshFormat::from_path(&path).map_err(to_py)?;
        geo::load_mesh(&path, format)
            .map(|inner| PyMesh { inner })
            .map_err(to_py)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        let format = MeshFormat::from_path(&path).map_err(to_py)?;
        geo::save_mesh(&self.inner, &path, format).map_err(to_py)
    }

    #[getter]
    fn vertices(&self) -> Vec<[f64; 3]> {
        self.inner
            .vertices
            .iter()
            .map(|v| [v.x, v.y, v.z])
            .collect()
    }

    #[getter]
    fn faces(&self) -> Vec<[usize; 3]> {
        self.inner.faces.clone()
    }

    #[getter]
    fn colors(&self) -> Option<Vec<[f32; 3]>> {
        self.inner.colors.clone()
    }

    fn total_area(&self) -> f64 {
        self.inner.total_area()
    }

    fn __len__(&self) -> usize {
        self.inner.faces.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Mesh(vertices={}, faces={})",
            self.inner.vertices.len(),
            self.inner.faces.len()
        )
    }
}

#[pyclass(name = "Camera", module = "repaint3d")]
struct PyCamera {
    inner: geo::Camera,
}

#[pymethods]
impl PyCamera {
    #[new]
    #[pyo3(signature = (azimuth, elevation = 0.0, radius = pl::DEFAULT_RADIUS, fov_y = 60.0, resolution = 512))]
    fn new(
        azimuth: f64,
        elevation: f64,
        radius: f64,
        fov_y: f64,
        resolution: usize,
    ) -> PyResult<Self> {
        geo::Camera::new(azimuth, elevation, radius, fov_y, resolution)
            .map(|inner| PyCamera { inner })
            .map_err(to_py)
    }

    #[getter]
    fn azimuth(&self) -> f64 {
        self.inner.azimuth
    }

    #[getter]
    fn resolution(&self) -> usize {
        self.inner.resolution
    }

    #[getter]
    fn position(&self) -> [f64; 3] {
        self.inner.position().into()
    }

    /// NDC coordinates and view depth of a world point, or None behind the
    /// camera.
    fn project(&self, point: [f64; 3]) -> Option<([f64; 3], f64)> {
        self.inner
            .project(&Vec3::from(point))
            .map(|(n, d)| (n.into(), d))
    }

    fn __repr__(&self) -> String {
        let c = &self.inner;
        format!(
            "Camera(azimuth={}, elevation={}, radius={}, resolution={})",
            c.azimuth, c.elevation, c.radius, c.resolution
        )
    }
}

/// Row-major depth map; background pixels are `inf`.
#[pyfunction]
fn render_depth(mesh: &PyMesh, camera: &PyCamera) -> Vec<Vec<f64>> {
    let d = raster_depth(&mesh.inner, &camera.inner, Culling::Backface);
    d.data.chunks(d.width).map(|r| r.to_vec()).collect()
}

/// Azimuths of the default-rule view plan.
#[pyfunction]
#[pyo3(signature = (n_views = 9, increment = 40.0, n_facade = 5))]
fn plan_views(n_views: usize, increment: f64, n_facade: usize) -> PyResult<Vec<f64>> {
    let cfg = PipelineConfig {
        n_views,
        increment_deg: increment,
        n_facade,
        ..Default::default()
    };
    pl::plan_views(&cfg).map(|p| p.azimuths()).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (object, azimuth, modifier = None))]
fn build_prompt(object: &str, azimuth: f64, modifier: Option<&str>) -> PyResult<String> {
    pl::build_prompt(object, azimuth, modifier).map_err(to_py)
}

/// Runs the pipeline. `config` is a JSON object overriding defaults; the
/// manifest is returned as a JSON string.
#[pyfunction]
#[pyo3(signature = (input, out, config = None))]
fn run_pipeline(
    py: Python<'_>,
    input: PathBuf,
    out: PathBuf,
    config: Option<&str>,
) -> PyResult<String> {
    let cfg: PipelineConfig = match config {
        Some(c) => serde_json::from_str(c).map_err(|e| PyValueError::new_err(e.to_string()))?,
        None => PipelineConfig::default(),
    };
    let manifest = py
        .detach(|| {
            pl::run_pipeline_with(
                &cfg,
                &input,
                &out,
                &mut std::io::empty(),
                &mut std::io::sink(),
            )
        })
        .map_err(to_py)?
        .manifest;
    serde_json::to_string(&manifest).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

fn features(rows: Vec<Vec<f64>>) -> PyResult<FeatureSet> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err("feature rows differ in length"));
    }
    FeatureSet::new("python", n, d, rows.into_iter().flatten().collect()).map_err(to_py)
}

#[pyfunction]
fn fid(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>) -> PyResult<f64> {
    eval::fid(&features(a)?, &features(b)?).map_err(to_py)
}

/// Returns `(mean, std)`.
#[pyfunction]
#[pyo3(signature = (a, b, subsets = 100, subset_size = 1000, seed = 0))]
fn kid(
    a: Vec<Vec<f64>>,
    b: Vec<Vec<f64>>,
    subsets: usize,
    subset_size: usize,
    seed: u64,
) -> PyResult<(f64, f64)> {
    eval::kid(&features(a)?, &features(b)?, subsets, subset_size, seed)
        .map(|r| (r.mean, r.std))
        .map_err(to_py)
}

/// Returns `[(item, score, ci_low, ci_high)]` sorted by item.
#[pyfunction]
fn bradley_terry(votes: Vec<(String, String)>) -> PyResult<Vec<(String, f64, f64, f64)>> {
    let r = eval::bradley_terry(&votes).map_err(to_py)?;
    Ok(r.scores
        .into_iter()
        .map(|s| (s.item, s.score, s.ci_low, s.ci_high))
        .collect())
}

/// Returns `(extractor_id, rows)`.
#[pyfunction]
fn read_features(path: PathBuf) -> PyResult<(String, Vec<Vec<f64>>)> {
    let f = eval::read_features(&path).map_err(to_py)?;
    let rows = (0..f.n).map(|i| f.row(i).to_vec()).collect();
    Ok((f.extractor_id, rows))
}

#[pyfunction]
fn write_features(path: PathBuf, extractor_id: &str, rows: Vec<Vec<f64>>) -> PyResult<()> {
    let mut f = features(rows)?;
    f.extractor_id = extractor_id.to_string();
    eval::write_features(&f, &path).map_err(to_py)
}

#[pyfunction]
fn remesh_planar(mesh: &PyMesh, target_edge: f64) -> PyResult<PyMesh> {
    remesh::remesh_planar(&mesh.inner, target_edge)
        .map(|inner| PyMesh { inner })
        .map_err(to_py)
}

/// Symmetric max point-to-surface distance from `n` samples per side.
#[pyfunction]
#[pyo3(signature = (a, b, n = 10000, seed = 0))]
fn surface_deviation(a: &PyMesh, b: &PyMesh, n: usize, seed: u64) -> f64 {
    remesh::surface_deviation(&a.inner, &b.inner, n, seed)
}

#[pymodule]
#[pyo3(name = "repaint3d")]
fn repaint3d_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyMesh>()?;
    m.add_class::<PyCamera>()?;
    m.add_function(wrap_pyfunction!(render_depth, m)?)?;
    m.add_function(wrap_pyfunction!(plan_views, m)?)?;
    m.add_function(wrap_pyfunction!(build_prompt, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    m.add_function(wrap_pyfunction!(fid, m)?)?;
    m.add_function(wrap_pyfunction!(kid, m)?)?;
    m.add_function(wrap_pyfunction!(bradley_terry, m)?)?;
    m.add_function(wrap_pyfunction!(read_features, m)?)?;
    m.add_function(wrap_pyfunction!(write_features, m)?)?;
    m.add_function(wrap_pyfunction!(remesh_planar, m)?)?;
    m.add_function(wrap_pyfunction!(surface_deviation, m)?)?;
    Ok(())
}
