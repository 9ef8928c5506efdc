//! Numerical core for panoramic holistic scene understanding.
//!
//! Modules, bottom-up:
//! - [`pano_geom`]: equirectangular pixel/direction maps and perspective view extraction.
//! - [`pointcloud`]: depth panorama lifting and Fibonacci-lattice downsampling.
//! - [`layout_mesh`]: icosphere layout meshes, deformation, graph propagation, voxel IoU.
//! - [`boxes3d`]: gravity-aligned oriented boxes, rotated IoU, average precision.
//! - [`context`]: masked multi-head transformer context module with analytic backward.
//! - [`losses`]: layout, object, physical-violation and joint objectives.
//! - [`scenegen`]: synthetic rooms and an exact ray-cast depth renderer.
//! - [`toytrain`]: gradient-descent driver and ablation runner.
//! - [`gradcheck`]: finite-difference checks of the analytic gradients.
//! - [`io`]: file formats (EDEP, PPM, OBJ, JSON, PCTX, point text).

pub mod boxes3d;
pub mod context;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod layout_mesh;
pub mod losses;
pub mod pano_geom;
pub mod pointcloud;
pub mod scenegen;
pub mod toytrain;

pub use error::{Error, Result};

pub type Vec3 = nalgebra::Vector3<f64>;
