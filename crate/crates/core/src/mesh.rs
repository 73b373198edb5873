//! Zero-level-set extraction over the finest lattice plus chamfer-distance
//! evaluation of the result.
//!
//! Extraction is the classic 256-case marching-cubes table. Cells run in
//! parallel; vertex welding keys on (lattice vertex, axis) edge ids rather
//! than floating-point positions, so shared edges weld exactly and two runs
//! produce bit-identical meshes. The field is evaluated through the full
//! multi-scale stack: where a fine cell is inactive the coarser scales still
//! answer, so sparsification never punches holes into the mesh.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::Point3;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::formats::{self, FormatError};
use crate::grid::GridSpec;
use crate::render::MultiScaleSdf;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("empty mesh")]
    EmptyMesh,
    #[error("empty point set")]
    EmptyPoints,
    #[error(transparent)]
    Format(#[from] FormatError),
}

/// Triangle mesh in world coordinates. Extraction guarantees in-range
/// indices and no zero-area (within 1e-12) triangles.
#[derive(Debug, Clone, Default)]
pub struct Mesh {
    pub vertices: Vec<Point3<f64>>,
    pub triangles: Vec<[u32; 3]>,
}

impl Mesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn save_ply(&self, path: &Path) -> Result<(), MeshError> {
        formats::save_ply(path, &self.vertices, &self.triangles)?;
        Ok(())
    }

    pub fn load_ply(path: &Path) -> Result<Mesh, MeshError> {
        let (vertices, triangles) = formats::load_ply(path)?;
        Ok(Mesh { vertices, triangles })
    }

    pub fn save_obj(&self, path: &Path) -> Result<(), MeshError> {
        formats::save_obj(path, &self.vertices, &self.triangles)?;
        Ok(())
    }

    pub fn triangle_area(&self, i: usize) -> f64 {
        let [a, b, c] = self.triangles[i];
        let (a, b, c) = (
            self.vertices[a as usize],
            self.vertices[b as usize],
            self.vertices[c as usize],
        );
        (b - a).cross(&(c - a)).norm() * 0.5
    }
}

/// Cube corner k sits at offset (k&1 pattern below) from the cell origin;
/// the numbering matches the classic table: 0..3 ring the z=0 face counter
/// clockwise, 4..7 the z=1 face.
const CORNER_OFFSET: [[u32; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
];

/// For each of the 12 cube edges: the corner at its low end and the axis it
/// runs along. Keying a mesh vertex by (lattice index of that corner, axis)
/// identifies the edge globally, shared across all adjacent cells.
const EDGE_ANCHOR: [(usize, usize); 12] = [
    (0, 0),
    (1, 1),
    (3, 0),
    (0, 1),
    (4, 0),
    (5, 1),
    (7, 0),
    (4, 1),
    (0, 2),
    (1, 2),
    (2, 2),
    (3, 2),
];

/// Standard marching-cubes triangulation, up to 5 triangles per case,
/// padded with 255. Bit k of the case index is set when corner k is below
/// the iso value.
static MC_TRI_TABLE: [[[u8; 3]; 5]; 256] = {
    let empty = [[255, 255, 255]; 5];
    let mut table = [empty; 256];

    macro_rules! tri {
        ($idx:expr, $( [$a:expr, $b:expr, $c:expr] ),* ) => {
            {
                let mut entry = [[255u8, 255, 255]; 5];
                let tris: &[[u8; 3]] = &[ $( [$a, $b, $c] ),* ];
                let mut i = 0;
                while i < tris.len() && i < 5 {
                    entry[i] = tris[i];
                    i += 1;
                }
                table[$idx] = entry;
            }
        };
    }

    tri!(0x01, [0, 8, 3]);
    tri!(0x02, [0, 1, 9]);
    tri!(0x03, [1, 8, 3], [9, 8, 1]);
    tri!(0x04, [1, 2, 10]);
    tri!(0x05, [0, 8, 3], [1, 2, 10]);
    tri!(0x06, [9, 2, 10], [0, 2, 9]);
    tri!(0x07, [2, 8, 3], [2, 10, 8], [10, 9, 8]);
    tri!(0x08, [3, 11, 2]);
    tri!(0x09, [0, 11, 2], [8, 11, 0]);
    tri!(0x0A, [1, 9, 0], [2, 3, 11]);
    tri!(0x0B, [1, 11, 2], [1, 9, 11], [9, 8, 11]);
    tri!(0x0C, [3, 10, 1], [11, 10, 3]);
    tri!(0x0D, [0, 10, 1], [0, 8, 10], [8, 11, 10]);
    tri!(0x0E, [3, 9, 0], [3, 11, 9], [11, 10, 9]);
    tri!(0x0F, [9, 8, 10], [10, 8, 11]);
    tri!(0x10, [4, 7, 8]);
    tri!(0x11, [4, 3, 0], [7, 3, 4]);
    tri!(0x12, [0, 1, 9], [8, 4, 7]);
    tri!(0x13, [4, 1, 9], [4, 7, 1], [7, 3, 1]);
    tri!(0x14, [1, 2, 10], [8, 4, 7]);
    tri!(0x15, [3, 4, 7], [3, 0, 4], [1, 2, 10]);
    tri!(0x16, [9, 2, 10], [9, 0, 2], [8, 4, 7]);
    tri!(0x17, [2, 10, 9], [2, 9, 7], [2, 7, 3], [7, 9, 4]);
    tri!(0x18, [8, 4, 7], [3, 11, 2]);
    tri!(0x19, [11, 4, 7], [11, 2, 4], [2, 0, 4]);
    tri!(0x1A, [9, 0, 1], [8, 4, 7], [2, 3, 11]);
    tri!(0x1B, [4, 7, 11], [9, 4, 11], [9, 11, 2], [9, 2, 1]);
    tri!(0x1C, [3, 10, 1], [3, 11, 10], [7, 8, 4]);
    tri!(0x1D, [1, 11, 10], [1, 4, 11], [1, 0, 4], [7, 11, 4]);
    tri!(0x1E, [4, 7, 8], [9, 0, 11], [9, 11, 10], [11, 0, 3]);
    tri!(0x1F, [4, 7, 11], [4, 11, 9], [9, 11, 10]);
    tri!(0x20, [9, 5, 4]);
    tri!(0x21, [9, 5, 4], [0, 8, 3]);
    tri!(0x22, [0, 5, 4], [1, 5, 0]);
    tri!(0x23, [8, 5, 4], [8, 3, 5], [3, 1, 5]);
    tri!(0x24, [1, 2, 10], [9, 5, 4]);
    tri!(0x25, [3, 0, 8], [1, 2, 10], [4, 9, 5]);
    tri!(0x26, [5, 2, 10], [5, 4, 2], [4, 0, 2]);
    tri!(0x27, [2, 10, 5], [3, 2, 5], [3, 5, 4], [3, 4, 8]);
    tri!(0x28, [9, 5, 4], [2, 3, 11]);
    tri!(0x29, [0, 11, 2], [0, 8, 11], [4, 9, 5]);
    tri!(0x2A, [0, 5, 4], [0, 1, 5], [2, 3, 11]);
    tri!(0x2B, [2, 1, 5], [2, 5, 8], [2, 8, 11], [4, 8, 5]);
    tri!(0x2C, [10, 3, 11], [10, 1, 3], [9, 5, 4]);
    tri!(0x2D, [4, 9, 5], [0, 8, 1], [8, 10, 1], [8, 11, 10]);
    tri!(0x2E, [5, 4, 0], [5, 0, 11], [5, 11, 10], [11, 0, 3]);
    tri!(0x2F, [5, 4, 8], [5, 8, 10], [10, 8, 11]);
    tri!(0x30, [9, 7, 8], [5, 7, 9]);
    tri!(0x31, [9, 3, 0], [9, 5, 3], [5, 7, 3]);
    tri!(0x32, [0, 7, 8], [0, 1, 7], [1, 5, 7]);
    tri!(0x33, [1, 5, 3], [3, 5, 7]);
    tri!(0x34, [9, 7, 8], [9, 5, 7], [10, 1, 2]);
    tri!(0x35, [10, 1, 2], [9, 5, 0], [5, 3, 0], [5, 7, 3]);
    tri!(0x36, [8, 0, 2], [8, 2, 5], [8, 5, 7], [10, 5, 2]);
    tri!(0x37, [2, 10, 5], [2, 5, 3], [3, 5, 7]);
    tri!(0x38, [7, 9, 5], [7, 8, 9], [3, 11, 2]);
    tri!(0x39, [9, 5, 7], [9, 7, 2], [9, 2, 0], [2, 7, 11]);
    tri!(0x3A, [2, 3, 11], [0, 1, 8], [1, 7, 8], [1, 5, 7]);
    tri!(0x3B, [11, 2, 1], [11, 1, 7], [7, 1, 5]);
    tri!(0x3C, [9, 5, 8], [8, 5, 7], [10, 1, 3], [10, 3, 11]);
    tri!(0x3D, [5, 7, 0], [5, 0, 9], [7, 11, 0], [1, 0, 10], [11, 10, 0]);
    tri!(0x3E, [11, 10, 0], [11, 0, 3], [10, 5, 0], [8, 0, 7], [5, 7, 0]);
    tri!(0x3F, [11, 10, 5], [7, 11, 5]);
    tri!(0x40, [10, 6, 5]);
    tri!(0x41, [0, 8, 3], [5, 10, 6]);
    tri!(0x42, [9, 0, 1], [5, 10, 6]);
    tri!(0x43, [1, 8, 3], [1, 9, 8], [5, 10, 6]);
    tri!(0x44, [1, 6, 5], [2, 6, 1]);
    tri!(0x45, [1, 6, 5], [1, 2, 6], [3, 0, 8]);
    tri!(0x46, [9, 6, 5], [9, 0, 6], [0, 2, 6]);
    tri!(0x47, [5, 9, 8], [5, 8, 2], [5, 2, 6], [3, 2, 8]);
    tri!(0x48, [2, 3, 11], [10, 6, 5]);
    tri!(0x49, [11, 0, 8], [11, 2, 0], [10, 6, 5]);
    tri!(0x4A, [0, 1, 9], [2, 3, 11], [5, 10, 6]);
    tri!(0x4B, [5, 10, 6], [1, 9, 2], [9, 11, 2], [9, 8, 11]);
    tri!(0x4C, [6, 3, 11], [6, 5, 3], [5, 1, 3]);
    tri!(0x4D, [0, 8, 11], [0, 11, 5], [0, 5, 1], [5, 11, 6]);
    tri!(0x4E, [3, 11, 6], [0, 3, 6], [0, 6, 5], [0, 5, 9]);
    tri!(0x4F, [6, 5, 9], [6, 9, 11], [11, 9, 8]);
    tri!(0x50, [5, 10, 6], [4, 7, 8]);
    tri!(0x51, [4, 3, 0], [4, 7, 3], [6, 5, 10]);
    tri!(0x52, [1, 9, 0], [5, 10, 6], [8, 4, 7]);
    tri!(0x53, [10, 6, 5], [1, 9, 7], [1, 7, 3], [7, 9, 4]);
    tri!(0x54, [6, 1, 2], [6, 5, 1], [4, 7, 8]);
    tri!(0x55, [1, 2, 5], [5, 2, 6], [3, 0, 4], [3, 4, 7]);
    tri!(0x56, [8, 4, 7], [9, 0, 5], [0, 6, 5], [0, 2, 6]);
    tri!(0x57, [7, 3, 9], [7, 9, 4], [3, 2, 9], [5, 9, 6], [2, 6, 9]);
    tri!(0x58, [3, 11, 2], [7, 8, 4], [10, 6, 5]);
    tri!(0x59, [5, 10, 6], [4, 7, 2], [4, 2, 0], [2, 7, 11]);
    tri!(0x5A, [0, 1, 9], [4, 7, 8], [2, 3, 11], [5, 10, 6]);
    tri!(0x5B, [9, 2, 1], [9, 11, 2], [9, 4, 11], [7, 11, 4], [5, 10, 6]);
    tri!(0x5C, [8, 4, 7], [3, 11, 5], [3, 5, 1], [5, 11, 6]);
    tri!(0x5D, [5, 1, 11], [5, 11, 6], [1, 0, 11], [7, 11, 4], [0, 4, 11]);
    tri!(0x5E, [0, 5, 9], [0, 6, 5], [0, 3, 6], [11, 6, 3], [8, 4, 7]);
    tri!(0x5F, [6, 5, 9], [6, 9, 11], [4, 7, 9], [7, 11, 9]);
    tri!(0x60, [10, 4, 9], [6, 4, 10]);
    tri!(0x61, [4, 10, 6], [4, 9, 10], [0, 8, 3]);
    tri!(0x62, [10, 0, 1], [10, 6, 0], [6, 4, 0]);
    tri!(0x63, [8, 3, 1], [8, 1, 6], [8, 6, 4], [6, 1, 10]);
    tri!(0x64, [1, 4, 9], [1, 2, 4], [2, 6, 4]);
    tri!(0x65, [3, 0, 8], [1, 2, 9], [2, 4, 9], [2, 6, 4]);
    tri!(0x66, [0, 2, 4], [4, 2, 6]);
    tri!(0x67, [8, 3, 2], [8, 2, 4], [4, 2, 6]);
    tri!(0x68, [10, 4, 9], [10, 6, 4], [11, 2, 3]);
    tri!(0x69, [0, 8, 2], [2, 8, 11], [4, 9, 10], [4, 10, 6]);
    tri!(0x6A, [3, 11, 2], [0, 1, 6], [0, 6, 4], [6, 1, 10]);
    tri!(0x6B, [6, 4, 1], [6, 1, 10], [4, 8, 1], [2, 1, 11], [8, 11, 1]);
    tri!(0x6C, [9, 6, 4], [9, 3, 6], [9, 1, 3], [11, 6, 3]);
    tri!(0x6D, [8, 11, 1], [8, 1, 0], [11, 6, 1], [9, 1, 4], [6, 4, 1]);
    tri!(0x6E, [3, 11, 6], [3, 6, 0], [0, 6, 4]);
    tri!(0x6F, [6, 4, 8], [11, 6, 8]);
    tri!(0x70, [7, 10, 6], [7, 8, 10], [8, 9, 10]);
    tri!(0x71, [0, 7, 3], [0, 10, 7], [0, 9, 10], [6, 7, 10]);
    tri!(0x72, [10, 6, 7], [1, 10, 7], [1, 7, 8], [1, 8, 0]);
    tri!(0x73, [10, 6, 7], [10, 7, 1], [1, 7, 3]);
    tri!(0x74, [1, 2, 6], [1, 6, 8], [1, 8, 9], [8, 6, 7]);
    tri!(0x75, [2, 6, 9], [2, 9, 1], [6, 7, 9], [0, 9, 3], [7, 3, 9]);
    tri!(0x76, [7, 8, 0], [7, 0, 6], [6, 0, 2]);
    tri!(0x77, [7, 3, 2], [6, 7, 2]);
    tri!(0x78, [2, 3, 11], [10, 6, 8], [10, 8, 9], [8, 6, 7]);
    tri!(0x79, [2, 0, 7], [2, 7, 11], [0, 9, 7], [6, 7, 10], [9, 10, 7]);
    tri!(0x7A, [1, 8, 0], [1, 7, 8], [1, 10, 7], [6, 7, 10], [2, 3, 11]);
    tri!(0x7B, [11, 2, 1], [11, 1, 7], [10, 6, 1], [6, 7, 1]);
    tri!(0x7C, [8, 9, 6], [8, 6, 7], [9, 1, 6], [11, 6, 3], [1, 3, 6]);
    tri!(0x7D, [0, 9, 1], [11, 6, 7]);
    tri!(0x7E, [7, 8, 0], [7, 0, 6], [3, 11, 0], [11, 6, 0]);
    tri!(0x7F, [7, 11, 6]);
    tri!(0x80, [7, 6, 11]);
    tri!(0x81, [3, 0, 8], [11, 7, 6]);
    tri!(0x82, [0, 1, 9], [11, 7, 6]);
    tri!(0x83, [8, 1, 9], [8, 3, 1], [11, 7, 6]);
    tri!(0x84, [10, 1, 2], [6, 11, 7]);
    tri!(0x85, [1, 2, 10], [3, 0, 8], [6, 11, 7]);
    tri!(0x86, [2, 9, 0], [2, 10, 9], [6, 11, 7]);
    tri!(0x87, [6, 11, 7], [2, 10, 3], [10, 8, 3], [10, 9, 8]);
    tri!(0x88, [7, 2, 3], [6, 2, 7]);
    tri!(0x89, [7, 0, 8], [7, 6, 0], [6, 2, 0]);
    tri!(0x8A, [2, 7, 6], [2, 3, 7], [0, 1, 9]);
    tri!(0x8B, [1, 6, 2], [1, 8, 6], [1, 9, 8], [8, 7, 6]);
    tri!(0x8C, [10, 7, 6], [10, 1, 7], [1, 3, 7]);
    tri!(0x8D, [10, 7, 6], [1, 7, 10], [1, 8, 7], [1, 0, 8]);
    tri!(0x8E, [0, 3, 7], [0, 7, 10], [0, 10, 9], [6, 10, 7]);
    tri!(0x8F, [7, 6, 10], [7, 10, 8], [8, 10, 9]);
    tri!(0x90, [6, 8, 4], [11, 8, 6]);
    tri!(0x91, [3, 6, 11], [3, 0, 6], [0, 4, 6]);
    tri!(0x92, [8, 6, 11], [8, 4, 6], [9, 0, 1]);
    tri!(0x93, [9, 4, 6], [9, 6, 3], [9, 3, 1], [11, 3, 6]);
    tri!(0x94, [6, 8, 4], [6, 11, 8], [2, 10, 1]);
    tri!(0x95, [1, 2, 10], [3, 0, 11], [0, 6, 11], [0, 4, 6]);
    tri!(0x96, [4, 11, 8], [4, 6, 11], [0, 2, 9], [2, 10, 9]);
    tri!(0x97, [10, 9, 3], [10, 3, 2], [9, 4, 3], [11, 3, 6], [4, 6, 3]);
    tri!(0x98, [8, 2, 3], [8, 4, 2], [4, 6, 2]);
    tri!(0x99, [0, 4, 2], [4, 6, 2]);
    tri!(0x9A, [1, 9, 0], [2, 3, 4], [2, 4, 6], [4, 3, 8]);
    tri!(0x9B, [1, 9, 4], [1, 4, 2], [2, 4, 6]);
    tri!(0x9C, [8, 1, 3], [8, 6, 1], [8, 4, 6], [6, 10, 1]);
    tri!(0x9D, [10, 1, 0], [10, 0, 6], [6, 0, 4]);
    tri!(0x9E, [4, 6, 3], [4, 3, 8], [6, 10, 3], [0, 3, 9], [10, 9, 3]);
    tri!(0x9F, [10, 9, 4], [6, 10, 4]);
    tri!(0xA0, [4, 9, 5], [7, 6, 11]);
    tri!(0xA1, [0, 8, 3], [4, 9, 5], [11, 7, 6]);
    tri!(0xA2, [5, 0, 1], [5, 4, 0], [7, 6, 11]);
    tri!(0xA3, [11, 7, 6], [8, 3, 4], [3, 5, 4], [3, 1, 5]);
    tri!(0xA4, [9, 5, 4], [10, 1, 2], [7, 6, 11]);
    tri!(0xA5, [6, 11, 7], [1, 2, 10], [0, 8, 3], [4, 9, 5]);
    tri!(0xA6, [7, 6, 11], [5, 4, 10], [4, 2, 10], [4, 0, 2]);
    tri!(0xA7, [3, 4, 8], [3, 5, 4], [3, 2, 5], [10, 5, 2], [11, 7, 6]);
    tri!(0xA8, [7, 2, 3], [7, 6, 2], [5, 4, 9]);
    tri!(0xA9, [9, 5, 4], [0, 8, 6], [0, 6, 2], [6, 8, 7]);
    tri!(0xAA, [3, 6, 2], [3, 7, 6], [1, 5, 0], [5, 4, 0]);
    tri!(0xAB, [6, 2, 8], [6, 8, 7], [2, 1, 8], [4, 8, 5], [1, 5, 8]);
    tri!(0xAC, [9, 5, 4], [10, 1, 6], [1, 7, 6], [1, 3, 7]);
    tri!(0xAD, [1, 6, 10], [1, 7, 6], [1, 0, 7], [8, 7, 0], [9, 5, 4]);
    tri!(0xAE, [4, 0, 10], [4, 10, 5], [0, 3, 10], [6, 10, 7], [3, 7, 10]);
    tri!(0xAF, [7, 6, 10], [7, 10, 8], [5, 4, 10], [4, 8, 10]);
    tri!(0xB0, [6, 9, 5], [6, 11, 9], [11, 8, 9]);
    tri!(0xB1, [3, 6, 11], [0, 6, 3], [0, 5, 6], [0, 9, 5]);
    tri!(0xB2, [0, 11, 8], [0, 5, 11], [0, 1, 5], [5, 6, 11]);
    tri!(0xB3, [6, 11, 3], [6, 3, 5], [5, 3, 1]);
    tri!(0xB4, [1, 2, 10], [9, 5, 11], [9, 11, 8], [11, 5, 6]);
    tri!(0xB5, [0, 11, 3], [0, 6, 11], [0, 9, 6], [5, 6, 9], [1, 2, 10]);
    tri!(0xB6, [11, 8, 5], [11, 5, 6], [8, 0, 5], [10, 5, 2], [0, 2, 5]);
    tri!(0xB7, [6, 11, 3], [6, 3, 5], [2, 10, 3], [10, 5, 3]);
    tri!(0xB8, [5, 8, 9], [5, 2, 8], [5, 6, 2], [3, 8, 2]);
    tri!(0xB9, [9, 5, 6], [9, 6, 0], [0, 6, 2]);
    tri!(0xBA, [1, 5, 8], [1, 8, 0], [5, 6, 8], [3, 8, 2], [6, 2, 8]);
    tri!(0xBB, [1, 5, 6], [2, 1, 6]);
    tri!(0xBC, [1, 3, 6], [1, 6, 10], [3, 8, 6], [5, 6, 9], [8, 9, 6]);
    tri!(0xBD, [10, 1, 0], [10, 0, 6], [9, 5, 0], [5, 6, 0]);
    tri!(0xBE, [0, 3, 8], [5, 6, 10]);
    tri!(0xBF, [10, 5, 6]);
    tri!(0xC0, [11, 5, 10], [7, 5, 11]);
    tri!(0xC1, [11, 5, 10], [11, 7, 5], [8, 3, 0]);
    tri!(0xC2, [5, 11, 7], [5, 10, 11], [1, 9, 0]);
    tri!(0xC3, [10, 7, 5], [10, 11, 7], [9, 8, 1], [8, 3, 1]);
    tri!(0xC4, [11, 1, 2], [11, 7, 1], [7, 5, 1]);
    tri!(0xC5, [0, 8, 3], [1, 2, 7], [1, 7, 5], [7, 2, 11]);
    tri!(0xC6, [9, 7, 5], [9, 2, 7], [9, 0, 2], [2, 11, 7]);
    tri!(0xC7, [7, 5, 2], [7, 2, 11], [5, 9, 2], [3, 2, 8], [9, 8, 2]);
    tri!(0xC8, [2, 5, 10], [2, 3, 5], [3, 7, 5]);
    tri!(0xC9, [8, 2, 0], [8, 5, 2], [8, 7, 5], [10, 2, 5]);
    tri!(0xCA, [9, 0, 1], [5, 10, 3], [5, 3, 7], [3, 10, 2]);
    tri!(0xCB, [9, 8, 2], [9, 2, 1], [8, 7, 2], [10, 2, 5], [7, 5, 2]);
    tri!(0xCC, [1, 3, 5], [3, 7, 5]);
    tri!(0xCD, [0, 8, 7], [0, 7, 1], [1, 7, 5]);
    tri!(0xCE, [9, 0, 3], [9, 3, 5], [5, 3, 7]);
    tri!(0xCF, [9, 8, 7], [5, 9, 7]);
    tri!(0xD0, [5, 8, 4], [5, 10, 8], [10, 11, 8]);
    tri!(0xD1, [5, 0, 4], [5, 11, 0], [5, 10, 11], [11, 3, 0]);
    tri!(0xD2, [0, 1, 9], [8, 4, 10], [8, 10, 11], [10, 4, 5]);
    tri!(0xD3, [10, 11, 4], [10, 4, 5], [11, 3, 4], [9, 4, 1], [3, 1, 4]);
    tri!(0xD4, [2, 5, 1], [2, 8, 5], [2, 11, 8], [4, 5, 8]);
    tri!(0xD5, [0, 4, 11], [0, 11, 3], [4, 5, 11], [2, 11, 1], [5, 1, 11]);
    tri!(0xD6, [0, 2, 5], [0, 5, 9], [2, 11, 5], [4, 5, 8], [11, 8, 5]);
    tri!(0xD7, [9, 4, 5], [2, 11, 3]);
    tri!(0xD8, [2, 5, 10], [3, 5, 2], [3, 4, 5], [3, 8, 4]);
    tri!(0xD9, [5, 10, 2], [5, 2, 4], [4, 2, 0]);
    tri!(0xDA, [3, 10, 2], [3, 5, 10], [3, 8, 5], [4, 5, 8], [0, 1, 9]);
    tri!(0xDB, [5, 10, 2], [5, 2, 4], [1, 9, 2], [9, 4, 2]);
    tri!(0xDC, [8, 4, 5], [8, 5, 3], [3, 5, 1]);
    tri!(0xDD, [0, 4, 5], [1, 0, 5]);
    tri!(0xDE, [8, 4, 5], [8, 5, 3], [9, 0, 5], [0, 3, 5]);
    tri!(0xDF, [9, 4, 5]);
    tri!(0xE0, [4, 11, 7], [4, 9, 11], [9, 10, 11]);
    tri!(0xE1, [0, 8, 3], [4, 9, 7], [9, 11, 7], [9, 10, 11]);
    tri!(0xE2, [1, 10, 11], [1, 11, 4], [1, 4, 0], [7, 4, 11]);
    tri!(0xE3, [3, 1, 4], [3, 4, 8], [1, 10, 4], [7, 4, 11], [10, 11, 4]);
    tri!(0xE4, [4, 11, 7], [9, 11, 4], [9, 2, 11], [9, 1, 2]);
    tri!(0xE5, [9, 7, 4], [9, 11, 7], [9, 1, 11], [2, 11, 1], [0, 8, 3]);
    tri!(0xE6, [11, 7, 4], [11, 4, 2], [2, 4, 0]);
    tri!(0xE7, [11, 7, 4], [11, 4, 2], [8, 3, 4], [3, 2, 4]);
    tri!(0xE8, [2, 9, 10], [2, 7, 9], [2, 3, 7], [7, 4, 9]);
    tri!(0xE9, [9, 10, 7], [9, 7, 4], [10, 2, 7], [8, 7, 0], [2, 0, 7]);
    tri!(0xEA, [3, 7, 10], [3, 10, 2], [7, 4, 10], [1, 10, 0], [4, 0, 10]);
    tri!(0xEB, [1, 10, 2], [8, 7, 4]);
    tri!(0xEC, [4, 9, 1], [4, 1, 7], [7, 1, 3]);
    tri!(0xED, [4, 9, 1], [4, 1, 7], [0, 8, 1], [8, 7, 1]);
    tri!(0xEE, [4, 0, 3], [7, 4, 3]);
    tri!(0xEF, [4, 8, 7]);
    tri!(0xF0, [9, 10, 8], [10, 11, 8]);
    tri!(0xF1, [3, 0, 9], [3, 9, 11], [11, 9, 10]);
    tri!(0xF2, [0, 1, 10], [0, 10, 8], [8, 10, 11]);
    tri!(0xF3, [3, 1, 10], [11, 3, 10]);
    tri!(0xF4, [1, 2, 11], [1, 11, 9], [9, 11, 8]);
    tri!(0xF5, [3, 0, 9], [3, 9, 11], [1, 2, 9], [2, 11, 9]);
    tri!(0xF6, [0, 2, 11], [8, 0, 11]);
    tri!(0xF7, [3, 2, 11]);
    tri!(0xF8, [2, 3, 8], [2, 8, 10], [10, 8, 9]);
    tri!(0xF9, [9, 10, 2], [0, 9, 2]);
    tri!(0xFA, [2, 3, 8], [2, 8, 10], [0, 1, 8], [1, 10, 8]);
    tri!(0xFB, [1, 10, 2]);
    tri!(0xFC, [1, 3, 8], [9, 1, 8]);
    tri!(0xFD, [0, 9, 1]);
    tri!(0xFE, [0, 3, 8]);
    // 0x00 and 0xFF stay empty: all corners on one side.

    table
};

/// Extracts the iso surface of `field` over the lattice of `spec` (normally
/// the finest scale's spec). The field is evaluated through all scales, so
/// cells with no active fine voxel fall back to the coarser grids instead
/// of leaving holes. An all-positive (or all-negative) field yields an
/// empty mesh.
pub fn marching_cubes(field: &MultiScaleSdf, spec: &GridSpec, iso: f64) -> Mesh {
    let [rx, ry, rz] = spec.resolution;
    let (ny, nz) = (ry as usize + 1, rz as usize + 1);
    let lattice = (rx as usize + 1) * ny * nz;

    let values: Vec<f64> = (0..lattice)
        .into_par_iter()
        .map(|i| {
            let x = (i / (ny * nz)) as u32;
            let y = ((i / nz) % ny) as u32;
            let z = (i % nz) as u32;
            field.value(spec.vertex_world([x, y, z]))
        })
        .collect();
    let lat = |x: u32, y: u32, z: u32| (x as usize * ny + y as usize) * nz + z as usize;

    // Per-slab triangle generation, keyed by global edge id so the weld
    // below is exact. Edge id = lattice index of the low corner * 3 + axis.
    let slabs: Vec<Vec<[u64; 3]>> = (0..rx)
        .into_par_iter()
        .map(|x| {
            let mut tris = Vec::new();
            for y in 0..ry {
                for z in 0..rz {
                    let mut case = 0usize;
                    for (k, off) in CORNER_OFFSET.iter().enumerate() {
                        if values[lat(x + off[0], y + off[1], z + off[2])] < iso {
                            case |= 1 << k;
                        }
                    }
                    if case == 0 || case == 255 {
                        continue;
                    }
                    let edge_key = |e: usize| {
                        let (corner, axis) = EDGE_ANCHOR[e];
                        let off = CORNER_OFFSET[corner];
                        let li = lat(x + off[0], y + off[1], z + off[2]);
                        (li * 3 + axis) as u64
                    };
                    for t in MC_TRI_TABLE[case].iter() {
                        if t[0] == 255 {
                            break;
                        }
                        tris.push([
                            edge_key(t[0] as usize),
                            edge_key(t[1] as usize),
                            edge_key(t[2] as usize),
                        ]);
                    }
                }
            }
            tris
        })
        .collect();

    // Sequential weld in slab order: first encounter of an edge id mints
    // its vertex, so indices are deterministic.
    let mut vertex_of: HashMap<u64, u32> = HashMap::new();
    let mut vertices: Vec<Point3<f64>> = Vec::new();
    let mut triangles = Vec::new();
    for tri in slabs.iter().flatten() {
        let mut vi = [0u32; 3];
        for (slot, &key) in vi.iter_mut().zip(tri) {
            *slot = *vertex_of.entry(key).or_insert_with(|| {
                let li = (key / 3) as usize;
                let axis = (key % 3) as usize;
                let a = [
                    (li / (ny * nz)) as u32,
                    ((li / nz) % ny) as u32,
                    (li % nz) as u32,
                ];
                let mut b = a;
                b[axis] += 1;
                let (va, vb) = (values[li], values[lat(b[0], b[1], b[2])]);
                let t = if (vb - va).abs() < f64::MIN_POSITIVE {
                    0.5
                } else {
                    ((iso - va) / (vb - va)).clamp(0.0, 1.0)
                };
                let (pa, pb) = (spec.vertex_world(a), spec.vertex_world(b));
                vertices.push(pa + (pb - pa) * t);
                let id = vertices.len() - 1;
                id as u32
            });
        }
        if vi[0] == vi[1] || vi[1] == vi[2] || vi[0] == vi[2] {
            continue;
        }
        let (a, b, c) = (
            vertices[vi[0] as usize],
            vertices[vi[1] as usize],
            vertices[vi[2] as usize],
        );
        if (b - a).cross(&(c - a)).norm() * 0.5 <= 1e-12 {
            continue;
        }
        triangles.push(vi);
    }
    Mesh { vertices, triangles }
}

/// Area-weighted uniform samples on the mesh surface, deterministic under
/// the seed.
pub fn sample_mesh(mesh: &Mesh, count: usize, seed: u64) -> Result<Vec<Point3<f64>>, MeshError> {
    if mesh.is_empty() {
        return Err(MeshError::EmptyMesh);
    }
    let mut cumulative = Vec::with_capacity(mesh.triangles.len());
    let mut total = 0.0;
    for i in 0..mesh.triangles.len() {
        total += mesh.triangle_area(i);
        cumulative.push(total);
    }
    if total <= 0.0 {
        return Err(MeshError::EmptyMesh);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let r = rng.gen_range(0.0..total);
        let ti = cumulative.partition_point(|&c| c <= r).min(mesh.triangles.len() - 1);
        let [a, b, c] = mesh.triangles[ti];
        let (a, b, c) = (
            mesh.vertices[a as usize],
            mesh.vertices[b as usize],
            mesh.vertices[c as usize],
        );
        // Square-root trick: uniform over the triangle.
        let r1 = rng.gen_range(0.0..1.0f64).sqrt();
        let r2 = rng.gen_range(0.0..1.0f64);
        let p = a * (1.0 - r1) + (b.coords * (1.0 - r2) + c.coords * r2) * r1;
        out.push(Point3::from(p.coords));
    }
    Ok(out)
}

/// Uniform-cell bucket index over a point set for exact nearest-neighbor
/// queries: rings of cells are searched outward until no unvisited cell
/// can beat the best distance found.
pub struct PointGrid {
    points: Vec<Point3<f64>>,
    lo: Point3<f64>,
    cell: f64,
    dims: [i64; 3],
    buckets: Vec<Vec<u32>>,
}

impl PointGrid {
    pub fn build(points: &[Point3<f64>]) -> Result<PointGrid, MeshError> {
        if points.is_empty() {
            return Err(MeshError::EmptyPoints);
        }
        let mut lo = points[0];
        let mut hi = points[0];
        for p in points {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let ext = (hi - lo).amax().max(1e-12);
        // ~1 point per cell along the longest axis keeps rings short.
        let per_axis = (points.len() as f64).cbrt().ceil().clamp(1.0, 128.0);
        let cell = ext / per_axis;
        let mut dims = [1i64; 3];
        for a in 0..3 {
            dims[a] = (((hi[a] - lo[a]) / cell).ceil() as i64).max(1);
        }
        let mut grid = PointGrid {
            points: points.to_vec(),
            lo,
            cell,
            dims,
            buckets: vec![Vec::new(); (dims[0] * dims[1] * dims[2]) as usize],
        };
        for (i, p) in points.iter().enumerate() {
            let b = grid.bucket_of(*p);
            let bi = grid.bucket_index(b);
            grid.buckets[bi].push(i as u32);
        }
        Ok(grid)
    }

    fn bucket_of(&self, p: Point3<f64>) -> [i64; 3] {
        let mut b = [0i64; 3];
        for a in 0..3 {
            b[a] = (((p[a] - self.lo[a]) / self.cell).floor() as i64).clamp(0, self.dims[a] - 1);
        }
        b
    }

    fn bucket_index(&self, b: [i64; 3]) -> usize {
        ((b[0] * self.dims[1] + b[1]) * self.dims[2] + b[2]) as usize
    }

    /// Index and distance of the closest stored point (exact).
    pub fn nearest(&self, q: Point3<f64>) -> (usize, f64) {
        let c = self.bucket_of(q);
        let max_ring = (0..3)
            .map(|a| c[a].max(self.dims[a] - 1 - c[a]))
            .max()
            .unwrap();
        let mut best = (usize::MAX, f64::INFINITY);
        for ring in 0..=max_ring {
            // Every unvisited cell is at least (ring-1) cells away along
            // some axis, measured from the query's (clamped) cell.
            if best.1.is_finite() && (ring - 1) as f64 * self.cell > best.1 {
                break;
            }
            for dx in -ring..=ring {
                for dy in -ring..=ring {
                    for dz in -ring..=ring {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != ring {
                            continue;
                        }
                        let b = [c[0] + dx, c[1] + dy, c[2] + dz];
                        if (0..3).any(|a| b[a] < 0 || b[a] >= self.dims[a]) {
                            continue;
                        }
                        for &pi in &self.buckets[self.bucket_index(b)] {
                            let d = (self.points[pi as usize] - q).norm();
                            if d < best.1 {
                                best = (pi as usize, d);
                            }
                        }
                    }
                }
            }
        }
        best
    }
}

/// Mean nearest-neighbor distances between two point sets, both ways.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct ChamferReport {
    /// Mean distance from `a` to its nearest point in `b`.
    pub accuracy: f64,
    /// Mean distance from `b` to its nearest point in `a`.
    pub completeness: f64,
    /// Mean of the two.
    pub overall: f64,
}

pub fn chamfer(a: &[Point3<f64>], b: &[Point3<f64>]) -> Result<ChamferReport, MeshError> {
    if a.is_empty() || b.is_empty() {
        return Err(MeshError::EmptyPoints);
    }
    let grid_b = PointGrid::build(b)?;
    let to_b: Vec<f64> = a.par_iter().map(|&p| grid_b.nearest(p).1).collect();
    let grid_a = PointGrid::build(a)?;
    let to_a: Vec<f64> = b.par_iter().map(|&p| grid_a.nearest(p).1).collect();
    let accuracy = to_b.iter().sum::<f64>() / a.len() as f64;
    let completeness = to_a.iter().sum::<f64>() / b.len() as f64;
    Ok(ChamferReport { accuracy, completeness, overall: 0.5 * (accuracy + completeness) })
}
