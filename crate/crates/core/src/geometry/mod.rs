//! Input geometry: meshes, file formats, scene normalization, point cloud
//! meshing and cameras on the viewing sphere.

mod camera;
mod frame;
pub mod io;
mod marching;
mod mesh;
pub mod primitives;

pub use camera::{camera_on_sphere, Camera, Projection, DEFAULT_FAR, DEFAULT_NEAR};
pub use frame::{normalize, normalize_with_frame, SceneFrame};
pub use io::{load_mesh, save_mesh, MeshFormat};
pub use marching::{pointcloud_to_mesh, surface_offset, DEFAULT_GRID};
pub use mesh::Mesh;

pub type Vec3 = nalgebra::Vector3<f64>;
