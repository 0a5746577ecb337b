//! Surface reconstruction from 3D Gaussian splats with a triangle mesh
//! extracted differentiably at every optimization step.
//!
//! Gaussians carry pivot points (center + 8 scaled principal-axis corners)
//! and learnable SDF values. The pivots are tetrahedralized with a robust
//! 3D Delaunay triangulation, marching tetrahedra extracts the zero level
//! set, and consistency losses couple depth/normal maps rendered from the
//! Gaussians with maps rasterized from the mesh. All gradients are analytic
//! and flow from the mesh vertices back to the Gaussian parameters.

pub mod delaunay;
pub mod eval;
pub mod kdtree;
pub mod losses;
pub mod math;
pub mod meshing;
pub mod optim;
pub mod pivots;
pub mod render;
pub mod scene;

pub use scene::{Camera, Gaussian, GaussianScene, Shape, SyntheticScene};
