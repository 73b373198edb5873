//! Visibility-voted sparsification of the reconstruction grids.
//!
//! Each view's surface map is a witness: a voxel is confirmed by a view when
//! it projects into that view and the map's surface point under the
//! projected pixel lies within a world tolerance of the voxel center. Voxels
//! confirmed by at least two views survive a pruning pass; a cascade step
//! prunes with the *next* scale's (tighter) tolerance and subdivides the
//! survivors, so resolution is only spent near the consensus surface.
//!
//! Votes are conservative at depth discontinuities: when the four map
//! texels under the bilinear footprint disagree about depth by more than
//! four tolerances, the interpolated point is a fiction between two
//! surfaces and the view abstains.

use nalgebra::Point3;
use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::Camera;
use crate::grid::{GridError, SparseScalarGrid};
use crate::matching::SurfaceMap;

/// A view abstains when its bilinear footprint spans more than this many
/// tolerances of depth spread.
pub const VOTE_SPAN_FACTOR: f64 = 4.0;

#[derive(Debug, Error)]
pub enum SparsifyError {
    #[error("need at least two views to vote, got {0}")]
    TooFewViews(usize),
    #[error("got {cameras} cameras but {maps} surface maps")]
    MismatchedInputs { cameras: usize, maps: usize },
    #[error("tolerance must be positive and finite, got {0}")]
    BadTolerance(f64),
    #[error("no voxel was confirmed by two views; the surface was lost")]
    EmptyKeep,
    #[error(transparent)]
    Grid(#[from] GridError),
}

/// One view's vote on one voxel center.
pub fn classify_voxel(
    center: Point3<f64>,
    cam: &Camera,
    map: &SurfaceMap,
    eps_world: f64,
) -> bool {
    let proj = cam.project(&center.coords);
    if !proj.in_image || proj.behind {
        return false;
    }
    let Some(s) = map.sample(proj.pixel[0], proj.pixel[1]) else {
        return false;
    };
    if s.t_span > VOTE_SPAN_FACTOR * eps_world {
        return false;
    }
    (s.point - center).norm() < eps_world
}

fn check_views(cameras: &[Camera], maps: &[SurfaceMap], eps_world: f64) -> Result<(), SparsifyError> {
    if cameras.len() != maps.len() {
        return Err(SparsifyError::MismatchedInputs { cameras: cameras.len(), maps: maps.len() });
    }
    if cameras.len() < 2 {
        return Err(SparsifyError::TooFewViews(cameras.len()));
    }
    if !(eps_world > 0.0 && eps_world.is_finite()) {
        return Err(SparsifyError::BadTolerance(eps_world));
    }
    Ok(())
}

/// Active cells confirmed by at least two views, in the grid's sorted cell
/// order. May be empty.
pub fn sparsify(
    grid: &SparseScalarGrid,
    cameras: &[Camera],
    maps: &[SurfaceMap],
    eps_world: f64,
) -> Result<Vec<[u32; 3]>, SparsifyError> {
    check_views(cameras, maps, eps_world)?;
    let spec = grid.spec();
    let keep: Vec<[u32; 3]> = grid
        .cells()
        .par_iter()
        .filter(|&&cell| {
            let center = spec.cell_center(cell);
            let votes = cameras
                .iter()
                .zip(maps)
                .filter(|(cam, map)| classify_voxel(center, cam, map, eps_world))
                .count();
            votes >= 2
        })
        .copied()
        .collect();
    Ok(keep)
}

/// One scale transition: prune at the target scale's tolerance, then
/// subdivide the survivors into the doubled-resolution grid.
pub fn cascade_step(
    grid: &SparseScalarGrid,
    cameras: &[Camera],
    maps: &[SurfaceMap],
    eps_world_next: f64,
) -> Result<SparseScalarGrid, SparsifyError> {
    let keep = sparsify(grid, cameras, maps, eps_world_next)?;
    if keep.is_empty() {
        return Err(SparsifyError::EmptyKeep);
    }
    Ok(grid.subdivide(&keep)?)
}
