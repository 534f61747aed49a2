//! Text-guided repainting of legacy 3D geometry through a multi-view image
//! pipeline.
//!
//! The crate renders per-view depth and visibility from an input mesh,
//! remaps previously painted views into each novel view with an occlusion
//! test, hands the result to a painter over a file protocol, reconciles all
//! painted views into a view-invariant surface color field and finally
//! transfers the colors onto a remeshed copy of the input.

pub mod diffusion;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod geometry;
pub mod grid;
pub mod pipeline;
pub mod protocol;
pub mod raster;
pub mod remap;
pub mod remesh;
pub mod spatial;

pub use error::{Error, Result};
pub use geometry::{Camera, Mesh, SceneFrame, Vec3};
pub use grid::{DepthMap, Grid, Image, Mask, PositionMap, Rgb, VisibilityMap, Zone, ZoneMap};
