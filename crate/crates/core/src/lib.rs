//! Surface-centric sparse-volume reconstruction from calibrated multi-view
//! images.
//!
//! The pipeline keeps two scalar fields on multi-scale sparse voxel grids:
//! a matching field whose per-ray softmax localizes the photoconsistent
//! surface along each viewing ray, and a signed distance field refined by
//! unbiased volume rendering around that surface. Coarse scales fix the
//! topology; finer scales are restricted to a shrinking shell around the
//! current surface estimate, so resolution grows where the surface is.
//!
//! Modules roughly follow the data flow: `scene` synthesizes calibrated
//! inputs with analytic ground truth, `pyramid` builds per-view features,
//! `matching` localizes surfaces per ray, `sparsify` votes cells in or out
//! of the next scale, `render` evaluates the unbiased volume-rendering
//! forward and backward passes, `loss` scores renders against references,
//! `optim` runs the optimization loop, and `mesh` extracts triangles.

pub mod config;
pub mod formats;
pub mod geometry;
pub mod grid;
pub mod loss;
pub mod pyramid;
pub mod matching;
pub mod mesh;
pub mod optim;
pub mod render;
pub mod scene;
pub mod sparsify;

pub use geometry::{Camera, Image, Ray};
pub use grid::{GridSpec, SparseScalarGrid};
pub use scene::{SceneDataset, Shape};
