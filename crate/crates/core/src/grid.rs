//! Sparse voxel grids with scalar values stored at cell vertices.
//!
//! A grid is a set of active cells inside an axis-aligned box. Values live on
//! the lattice vertices and are shared between neighboring cells, so a scalar
//! field sampled by trilinear interpolation is continuous across the active
//! region. Queries outside the box or in inactive cells report no value;
//! callers that want border clamping use the `_clamped` variants.
//!
//! Cells and vertices are kept in sorted order everywhere so that iteration,
//! subdivision, and snapshots are reproducible bit for bit.

use std::collections::HashMap;
use std::io::Write as _;
use std::path::Path;

use nalgebra::{Point3, Vector3};
use thiserror::Error;

use crate::formats::{self, ByteReader, FormatError};

#[derive(Debug, Error)]
pub enum GridError {
    #[error("grid resolution must be at least 2 per axis, got {0:?}")]
    BadResolution([u32; 3]),
    #[error("bounding box must have positive extent on every axis")]
    BadBounds,
    #[error("voxels must be isotropic; cell sizes {0:?} differ beyond tolerance")]
    Anisotropic([f64; 3]),
    #[error("cell coordinate {coord:?} outside resolution {resolution:?}")]
    CellOutOfRange { coord: [u32; 3], resolution: [u32; 3] },
    #[error("keep set contains inactive cell {0:?}")]
    KeepNotActive([u32; 3]),
    #[error("grid has no active cells")]
    Empty,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("bad snapshot: {0}")]
    Snapshot(#[from] FormatError),
}

/// Lattice geometry: per-axis cell counts and the world-space box they span.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub resolution: [u32; 3],
    pub lo: Point3<f64>,
    pub hi: Point3<f64>,
}

impl GridSpec {
    pub fn new(
        resolution: [u32; 3],
        lo: Point3<f64>,
        hi: Point3<f64>,
    ) -> Result<Self, GridError> {
        if resolution.iter().any(|&r| r < 2 || r >= (1 << 21)) {
            return Err(GridError::BadResolution(resolution));
        }
        if !(0..3).all(|a| hi[a] > lo[a] && lo[a].is_finite() && hi[a].is_finite()) {
            return Err(GridError::BadBounds);
        }
        let spec = Self { resolution, lo, hi };
        let h = spec.cell_size();
        if (1..3).any(|a| (h[a] - h[0]).abs() > 1e-9 * h[0]) {
            return Err(GridError::Anisotropic([h.x, h.y, h.z]));
        }
        Ok(spec)
    }

    pub fn cell_size(&self) -> Vector3<f64> {
        Vector3::new(
            (self.hi.x - self.lo.x) / self.resolution[0] as f64,
            (self.hi.y - self.lo.y) / self.resolution[1] as f64,
            (self.hi.z - self.lo.z) / self.resolution[2] as f64,
        )
    }

    /// Largest side length of the box.
    pub fn max_extent(&self) -> f64 {
        (0..3).map(|a| self.hi[a] - self.lo[a]).fold(0.0, f64::max)
    }

    /// Same box at twice the resolution.
    pub fn doubled(&self) -> GridSpec {
        GridSpec {
            resolution: self.resolution.map(|r| r * 2),
            lo: self.lo,
            hi: self.hi,
        }
    }

    pub fn vertex_world(&self, v: [u32; 3]) -> Point3<f64> {
        let h = self.cell_size();
        Point3::new(
            self.lo.x + v[0] as f64 * h.x,
            self.lo.y + v[1] as f64 * h.y,
            self.lo.z + v[2] as f64 * h.z,
        )
    }

    pub fn cell_center(&self, c: [u32; 3]) -> Point3<f64> {
        let h = self.cell_size();
        Point3::new(
            self.lo.x + (c[0] as f64 + 0.5) * h.x,
            self.lo.y + (c[1] as f64 + 0.5) * h.y,
            self.lo.z + (c[2] as f64 + 0.5) * h.z,
        )
    }

    pub fn cell_count(&self) -> u64 {
        self.resolution.iter().map(|&r| r as u64).product()
    }

    pub fn clamp_point(&self, p: Point3<f64>) -> Point3<f64> {
        Point3::new(
            p.x.clamp(self.lo.x, self.hi.x),
            p.y.clamp(self.lo.y, self.hi.y),
            p.z.clamp(self.lo.z, self.hi.z),
        )
    }

    pub fn contains(&self, p: Point3<f64>) -> bool {
        (0..3).all(|a| p[a] >= self.lo[a] && p[a] <= self.hi[a])
    }

    /// Cell coordinate and in-cell fraction of a point, or None outside the
    /// box. Points exactly on the upper boundary land in the last cell with
    /// fraction 1.
    pub fn locate(&self, p: Point3<f64>) -> Option<([u32; 3], Vector3<f64>)> {
        let h = self.cell_size();
        let mut cell = [0u32; 3];
        let mut frac = Vector3::zeros();
        for a in 0..3 {
            let u = (p[a] - self.lo[a]) / h[a];
            let res = self.resolution[a] as f64;
            if !u.is_finite() || u < 0.0 || u > res {
                return None;
            }
            let ix = (u.floor() as u32).min(self.resolution[a] - 1);
            cell[a] = ix;
            frac[a] = u - ix as f64;
        }
        Some((cell, frac))
    }

    pub fn locate_clamped(&self, p: Point3<f64>) -> ([u32; 3], Vector3<f64>) {
        let h = self.cell_size();
        let mut cell = [0u32; 3];
        let mut frac = Vector3::zeros();
        for a in 0..3 {
            let res = self.resolution[a] as f64;
            let u = ((p[a] - self.lo[a]) / h[a]).clamp(0.0, res);
            let ix = (u.floor() as u32).min(self.resolution[a] - 1);
            cell[a] = ix;
            frac[a] = u - ix as f64;
        }
        (cell, frac)
    }
}

/// One trilinear lookup with everything the optimizer needs: the value, its
/// spatial gradient, and the interpolation weights (plus their spatial
/// gradients) of the 8 vertices of the containing cell.
#[derive(Debug, Clone)]
pub struct GridSample {
    pub value: f64,
    pub gradient: Vector3<f64>,
    /// Indices into the grid's vertex table; corner k is at offset
    /// `(k & 1, (k >> 1) & 1, (k >> 2) & 1)` from the cell origin.
    pub vertices: [u32; 8],
    pub weights: [f64; 8],
    pub weight_gradients: [Vector3<f64>; 8],
}

/// Active/total cell counts and the measured byte footprint of one grid.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct OccupancyReport {
    pub active: u64,
    pub total: u64,
    pub fraction: f64,
    pub bytes: u64,
}

#[derive(Debug, Clone)]
pub struct SparseScalarGrid {
    spec: GridSpec,
    cells: Vec<[u32; 3]>,
    cell_lookup: HashMap<u64, u32>,
    cell_verts: Vec<[u32; 8]>,
    vertex_coords: Vec<[u32; 3]>,
    vertex_lookup: HashMap<u64, u32>,
    values: Vec<f64>,
}

fn pack(c: [u32; 3]) -> u64 {
    debug_assert!(c.iter().all(|&v| v < (1 << 21)));
    (c[0] as u64) << 42 | (c[1] as u64) << 21 | c[2] as u64
}

const CORNER_OFFSETS: [[u32; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [0, 1, 0],
    [1, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [0, 1, 1],
    [1, 1, 1],
];

fn corner_coord(cell: [u32; 3], k: usize) -> [u32; 3] {
    let o = CORNER_OFFSETS[k];
    [cell[0] + o[0], cell[1] + o[1], cell[2] + o[2]]
}

fn trilinear_weights(f: Vector3<f64>) -> [f64; 8] {
    let mut w = [0.0; 8];
    for (k, o) in CORNER_OFFSETS.iter().enumerate() {
        let wx = if o[0] == 1 { f.x } else { 1.0 - f.x };
        let wy = if o[1] == 1 { f.y } else { 1.0 - f.y };
        let wz = if o[2] == 1 { f.z } else { 1.0 - f.z };
        w[k] = wx * wy * wz;
    }
    w
}

/// Gradients of the trilinear weights with respect to the world point.
fn trilinear_weight_grads(f: Vector3<f64>, h: Vector3<f64>) -> [Vector3<f64>; 8] {
    let mut g = [Vector3::zeros(); 8];
    for (k, o) in CORNER_OFFSETS.iter().enumerate() {
        let (wx, dx) = if o[0] == 1 { (f.x, 1.0) } else { (1.0 - f.x, -1.0) };
        let (wy, dy) = if o[1] == 1 { (f.y, 1.0) } else { (1.0 - f.y, -1.0) };
        let (wz, dz) = if o[2] == 1 { (f.z, 1.0) } else { (1.0 - f.z, -1.0) };
        g[k] = Vector3::new(dx * wy * wz / h.x, wx * dy * wz / h.y, wx * wy * dz / h.z);
    }
    g
}

impl SparseScalarGrid {
    /// Grid with the given active cells, every vertex initialized to `init`.
    /// Cell coordinates are deduplicated and sorted.
    pub fn from_cells(
        spec: GridSpec,
        mut cells: Vec<[u32; 3]>,
        init: f64,
    ) -> Result<Self, GridError> {
        if cells.is_empty() {
            return Err(GridError::Empty);
        }
        for &c in &cells {
            if (0..3).any(|a| c[a] >= spec.resolution[a]) {
                return Err(GridError::CellOutOfRange { coord: c, resolution: spec.resolution });
            }
        }
        cells.sort_unstable();
        cells.dedup();

        let mut vertex_coords: Vec<[u32; 3]> = cells
            .iter()
            .flat_map(|&c| (0..8).map(move |k| corner_coord(c, k)))
            .collect();
        vertex_coords.sort_unstable();
        vertex_coords.dedup();

        let vertex_lookup: HashMap<u64, u32> = vertex_coords
            .iter()
            .enumerate()
            .map(|(i, &v)| (pack(v), i as u32))
            .collect();
        let cell_lookup: HashMap<u64, u32> =
            cells.iter().enumerate().map(|(i, &c)| (pack(c), i as u32)).collect();
        let cell_verts: Vec<[u32; 8]> = cells
            .iter()
            .map(|&c| {
                let mut vs = [0u32; 8];
                for (k, v) in vs.iter_mut().enumerate() {
                    *v = vertex_lookup[&pack(corner_coord(c, k))];
                }
                vs
            })
            .collect();

        let values = vec![init; vertex_coords.len()];
        Ok(Self { spec, cells, cell_lookup, cell_verts, vertex_coords, vertex_lookup, values })
    }

    /// Fully active grid.
    pub fn dense(spec: GridSpec, init: f64) -> Self {
        let [rx, ry, rz] = spec.resolution;
        let mut cells = Vec::with_capacity((rx * ry * rz) as usize);
        for x in 0..rx {
            for y in 0..ry {
                for z in 0..rz {
                    cells.push([x, y, z]);
                }
            }
        }
        Self::from_cells(spec, cells, init).expect("dense grid is non-empty and in range")
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn cells(&self) -> &[[u32; 3]] {
        &self.cells
    }

    pub fn cell_count(&self) -> usize {
        self.cells.len()
    }

    pub fn vertex_coords(&self) -> &[[u32; 3]] {
        &self.vertex_coords
    }

    pub fn vertex_count(&self) -> usize {
        self.vertex_coords.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn set_all_values(&mut self, v: f64) {
        self.values.fill(v);
    }

    pub fn is_active(&self, cell: [u32; 3]) -> bool {
        self.cell_lookup.contains_key(&pack(cell))
    }

    pub fn vertex_index(&self, v: [u32; 3]) -> Option<u32> {
        self.vertex_lookup.get(&pack(v)).copied()
    }

    pub fn vertex_world(&self, index: u32) -> Point3<f64> {
        self.spec.vertex_world(self.vertex_coords[index as usize])
    }

    fn sample_in_cell(&self, cell: [u32; 3], frac: Vector3<f64>) -> Option<GridSample> {
        let ci = *self.cell_lookup.get(&pack(cell))? as usize;
        let vertices = self.cell_verts[ci];
        let weights = trilinear_weights(frac);
        let weight_gradients = trilinear_weight_grads(frac, self.spec.cell_size());
        let mut value = 0.0;
        let mut gradient = Vector3::zeros();
        for k in 0..8 {
            let v = self.values[vertices[k] as usize];
            value += weights[k] * v;
            gradient += weight_gradients[k] * v;
        }
        Some(GridSample { value, gradient, vertices, weights, weight_gradients })
    }

    /// Trilinear sample, or None outside the box / in an inactive cell.
    pub fn sample(&self, p: Point3<f64>) -> Option<GridSample> {
        let (cell, frac) = self.spec.locate(p)?;
        self.sample_in_cell(cell, frac)
    }

    /// Like `sample`, but the point is first clamped into the box. Still
    /// returns None when the clamped point lands in an inactive cell.
    pub fn sample_clamped(&self, p: Point3<f64>) -> Option<GridSample> {
        let (cell, frac) = self.spec.locate_clamped(p);
        self.sample_in_cell(cell, frac)
    }

    pub fn value_at(&self, p: Point3<f64>) -> Option<f64> {
        let (cell, frac) = self.spec.locate(p)?;
        let ci = *self.cell_lookup.get(&pack(cell))? as usize;
        let w = trilinear_weights(frac);
        let vs = self.cell_verts[ci];
        Some((0..8).map(|k| w[k] * self.values[vs[k] as usize]).sum())
    }

    pub fn value_at_clamped(&self, p: Point3<f64>) -> Option<f64> {
        let (cell, frac) = self.spec.locate_clamped(p);
        let ci = *self.cell_lookup.get(&pack(cell))? as usize;
        let w = trilinear_weights(frac);
        let vs = self.cell_verts[ci];
        Some((0..8).map(|k| w[k] * self.values[vs[k] as usize]).sum())
    }

    /// Twice the resolution: every active cell becomes its 8 children and new
    /// vertex values are trilinear interpolations of the parent field.
    pub fn subdivided(&self) -> SparseScalarGrid {
        let fine_spec = self.spec.doubled();
        let mut fine_cells = Vec::with_capacity(self.cells.len() * 8);
        let mut fine_values: HashMap<u64, f64> = HashMap::new();
        let mut fine_vertex_list: Vec<([u32; 3], f64)> = Vec::new();
        for &c in &self.cells {
            for o in CORNER_OFFSETS {
                fine_cells.push([2 * c[0] + o[0], 2 * c[1] + o[1], 2 * c[2] + o[2]]);
            }
            // 27 fine lattice vertices covered by this parent cell. Shared
            // vertices are written once, by the lexicographically first
            // parent, which keeps the result independent of traversal order.
            for ox in 0..3u32 {
                for oy in 0..3u32 {
                    for oz in 0..3u32 {
                        let w = [2 * c[0] + ox, 2 * c[1] + oy, 2 * c[2] + oz];
                        let key = pack(w);
                        if fine_values.contains_key(&key) {
                            continue;
                        }
                        let frac = Vector3::new(
                            ox as f64 * 0.5,
                            oy as f64 * 0.5,
                            oz as f64 * 0.5,
                        );
                        let weights = trilinear_weights(frac);
                        let vs = self.cell_verts[self.cell_lookup[&pack(c)] as usize];
                        let val: f64 =
                            (0..8).map(|k| weights[k] * self.values[vs[k] as usize]).sum();
                        fine_values.insert(key, val);
                        fine_vertex_list.push((w, val));
                    }
                }
            }
        }
        let mut out = SparseScalarGrid::from_cells(fine_spec, fine_cells, 0.0)
            .expect("children of active cells are in range");
        for (w, val) in fine_vertex_list {
            let idx = out.vertex_index(w).expect("child vertex exists");
            out.values[idx as usize] = val;
        }
        out
    }

    /// Sub-grid on the cells that pass the predicate; surviving vertices keep
    /// their values. Errors when nothing survives.
    pub fn restricted(
        &self,
        keep: impl Fn([u32; 3]) -> bool,
    ) -> Result<SparseScalarGrid, GridError> {
        let kept: Vec<[u32; 3]> = self.cells.iter().copied().filter(|&c| keep(c)).collect();
        let mut out = SparseScalarGrid::from_cells(self.spec, kept, 0.0)?;
        for (i, &v) in out.vertex_coords.iter().enumerate() {
            let src = self.vertex_index(v).expect("kept cells are a subset");
            out.values[i] = self.values[src as usize];
        }
        Ok(out)
    }

    /// Same active structure, fresh constant values.
    pub fn like_structure(&self, init: f64) -> SparseScalarGrid {
        let mut out = self.clone();
        out.set_all_values(init);
        out
    }

    /// The cascade step's structural half: keeps only the given cells, then
    /// doubles resolution so each kept cell becomes 8 children whose vertex
    /// values interpolate the parent field. Errors when a kept cell is not
    /// active or nothing is kept.
    pub fn subdivide(&self, keep: &[[u32; 3]]) -> Result<SparseScalarGrid, GridError> {
        for &c in keep {
            if !self.is_active(c) {
                return Err(GridError::KeepNotActive(c));
            }
        }
        let keep_set: std::collections::HashSet<u64> = keep.iter().map(|&c| pack(c)).collect();
        Ok(self.restricted(|c| keep_set.contains(&pack(c)))?.subdivided())
    }

    /// Memory accounting for the sparse structure: coordinate index, per-cell
    /// vertex references, hash lookups, and the vertex values themselves.
    /// Computed from counts, not the allocator, so reports are reproducible.
    pub fn occupancy_report(&self) -> OccupancyReport {
        let cells = self.cells.len() as u64;
        let verts = self.vertex_coords.len() as u64;
        let bytes = cells * (12 + 32) // coords + 8 vertex indices
            + verts * (12 + 8) // coords + f64 value
            + (cells + verts) * 12; // hash index entries (packed key + slot)
        let total = self.spec.cell_count();
        OccupancyReport {
            active: cells,
            total,
            fraction: cells as f64 / total as f64,
            bytes,
        }
    }

    /// Serializes the grid to the binary snapshot layout (little-endian):
    /// magic `SSGV`, version, resolution, box, sorted cell coordinates, then
    /// the sorted vertex table with one f32 value per vertex.
    pub fn to_snapshot_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(64 + self.cells.len() * 12 + self.values.len() * 16);
        buf.extend_from_slice(b"SSGV");
        buf.extend_from_slice(&1u32.to_le_bytes());
        for &r in &self.spec.resolution {
            buf.extend_from_slice(&r.to_le_bytes());
        }
        for a in 0..3 {
            buf.extend_from_slice(&self.spec.lo[a].to_le_bytes());
        }
        for a in 0..3 {
            buf.extend_from_slice(&self.spec.hi[a].to_le_bytes());
        }
        buf.extend_from_slice(&(self.cells.len() as u64).to_le_bytes());
        for c in &self.cells {
            for &x in c {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        buf.extend_from_slice(&(self.vertex_coords.len() as u64).to_le_bytes());
        for (v, &val) in self.vertex_coords.iter().zip(&self.values) {
            for &x in v {
                buf.extend_from_slice(&x.to_le_bytes());
            }
            buf.extend_from_slice(&(val as f32).to_le_bytes());
        }
        buf
    }

    pub fn from_snapshot_bytes(bytes: &[u8]) -> Result<SparseScalarGrid, GridError> {
        let mut r = ByteReader::new(bytes);
        let magic = r.take(4)?;
        if magic != b"SSGV" {
            return Err(FormatError::BadMagic { expected: "SSGV" }.into());
        }
        let version = r.u32()?;
        if version != 1 {
            return Err(FormatError::BadVersion(version).into());
        }
        let resolution = [r.u32()?, r.u32()?, r.u32()?];
        let lo = Point3::new(r.f64()?, r.f64()?, r.f64()?);
        let hi = Point3::new(r.f64()?, r.f64()?, r.f64()?);
        let spec = GridSpec::new(resolution, lo, hi)?;

        let n_cells = r.u64()? as usize;
        let mut cells = Vec::with_capacity(n_cells);
        for _ in 0..n_cells {
            cells.push([r.u32()?, r.u32()?, r.u32()?]);
        }
        let mut grid = SparseScalarGrid::from_cells(spec, cells, 0.0)?;

        let n_verts = r.u64()? as usize;
        if n_verts != grid.vertex_count() {
            return Err(FormatError::Corrupt(format!(
                "vertex table holds {n_verts} entries, cell structure implies {}",
                grid.vertex_count()
            ))
            .into());
        }
        for _ in 0..n_verts {
            let v = [r.u32()?, r.u32()?, r.u32()?];
            let val = r.f32()? as f64;
            let idx = grid.vertex_index(v).ok_or_else(|| {
                FormatError::Corrupt(format!("vertex {v:?} not on any active cell"))
            })?;
            grid.values[idx as usize] = val;
        }
        r.expect_end()?;
        Ok(grid)
    }

    pub fn save_snapshot(&self, path: &Path) -> Result<(), GridError> {
        let bytes = self.to_snapshot_bytes();
        formats::write_atomic(path, |f| f.write_all(&bytes))?;
        Ok(())
    }

    pub fn load_snapshot(path: &Path) -> Result<SparseScalarGrid, GridError> {
        let bytes = std::fs::read(path)?;
        Self::from_snapshot_bytes(&bytes)
    }
}
