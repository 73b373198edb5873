//! Per-scene optimization: interleaved matching-field and SDF updates over
//! the coarse-to-fine grid cascade.
//!
//! Each step draws a ray batch, runs the forward pass and the hand-written
//! adjoints in parallel over fixed batch chunks, merges the per-chunk
//! gradient buffers sequentially in chunk order, and applies a lazy
//! adaptive-moment update. All randomness flows from one seeded generator on
//! the orchestrator thread and every reduction is order-stable, so a run is
//! reproducible bit-for-bit under a fixed seed.

use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{Point3, Vector3};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::config::{ConfigError, PipelineConfig, SdfInit};
use crate::formats::write_atomic;
use crate::geometry::{Camera, Image, Ray};
use crate::grid::{GridError, GridSpec, SparseScalarGrid};
use crate::loss::{
    eikonal_loss_backward, pseudo_loss_backward, total_loss, window_warp_loss, LossError,
    LossTerms,
};
use crate::matching::{
    build_surface_map, init_matching_from_photoconsistency, locate_surface,
    locate_surface_adjoint, shrink_region, MatchingError, RegionSchedule, SurfaceMap,
    SurfaceRegion,
};
use crate::mesh::{MeshError, PointGrid};
use crate::pyramid::{build_pyramid, ImagePyramid, PyramidError};
use crate::render::{
    annealed_sharpness, render_ray, render_ray_backward, MultiScaleSdf, RenderError, RenderViews,
};
use crate::scene::SceneDataset;
use crate::sparsify::{cascade_step, sparsify, SparsifyError};

/// Multiplier turning fused-feature variance into matching-field scores.
pub const SCORE_SCALE: f64 = 50.0;
/// Feature pyramid depth used for photo-consistency scoring.
pub const PYRAMID_LEVELS: u32 = 3;
/// Ray batches are split into this many fixed chunks; each chunk accumulates
/// gradients sequentially and chunks merge in index order, which keeps the
/// result independent of the thread count.
const GRAD_CHUNKS: usize = 16;
/// Resolution of the per-view min-depth splat buffers used to sign the
/// pseudo-point distance field.
const SPLAT_RES: u32 = 64;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("pseudo-point initialization needs a non-empty cloud")]
    EmptyPseudoCloud,
    #[error("every ray in the batch failed to localize")]
    AllRaysInvalid,
    #[error("need at least two views, got {0}")]
    TooFewViews(usize),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Matching(#[from] MatchingError),
    #[error(transparent)]
    Sparsify(#[from] SparsifyError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Pyramid(#[from] PyramidError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

// ---------------------------------------------------------------------------
// Adaptive-moment updates

/// First/second moment accumulators for one parameter vector, with a lazy
/// update rule: parameters whose gradient is exactly zero this step are not
/// touched at all — neither value nor moments — so an all-zero gradient (or
/// a zero learning rate) leaves the grid bit-identical. That matches the
/// touched-vertex semantics of the sparse adjoints, where an untouched
/// vertex simply was not part of the step.
#[derive(Debug, Clone)]
pub struct OptimState {
    pub lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl OptimState {
    pub fn new(len: usize, lr: f64) -> OptimState {
        OptimState { lr, m: vec![0.0; len], v: vec![0.0; len], step: 0 }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn apply(&mut self, values: &mut [f64], grads: &[f64]) {
        assert_eq!(values.len(), self.m.len(), "parameter shape drifted");
        assert_eq!(grads.len(), self.m.len(), "gradient shape drifted");
        if self.lr == 0.0 {
            return;
        }
        self.step += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.step as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.step as i32);
        for i in 0..values.len() {
            let g = grads[i];
            if g == 0.0 {
                continue;
            }
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * g;
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            values[i] -= self.lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
}

// ---------------------------------------------------------------------------
// SDF initialization

/// Per-view near/far depth buffers splatted from a point cloud, dilated by
/// one bucket so silhouette gaps do not read as free space. A point inside a
/// watertight cloud projects between the near and far splat along every
/// covering ray, so depth outside that band in any view votes "outside".
struct DepthSplat {
    near: Vec<f64>,
    far: Vec<f64>,
}

impl DepthSplat {
    fn build(points: &[Point3<f64>], cam: &Camera) -> DepthSplat {
        let n = SPLAT_RES as usize;
        let mut raw_near = vec![f64::INFINITY; n * n];
        let mut raw_far = vec![f64::NEG_INFINITY; n * n];
        for p in points {
            let proj = cam.project(&p.coords);
            if !proj.in_image || proj.behind {
                continue;
            }
            let bx = (proj.pixel[0] / cam.width as f64 * n as f64) as usize;
            let by = (proj.pixel[1] / cam.height as f64 * n as f64) as usize;
            let i = by.min(n - 1) * n + bx.min(n - 1);
            raw_near[i] = raw_near[i].min(proj.depth);
            raw_far[i] = raw_far[i].max(proj.depth);
        }
        let (mut near, mut far) = (raw_near.clone(), raw_far.clone());
        for y in 0..n {
            for x in 0..n {
                let (mut lo, mut hi) = (raw_near[y * n + x], raw_far[y * n + x]);
                for dy in y.saturating_sub(1)..(y + 2).min(n) {
                    for dx in x.saturating_sub(1)..(x + 2).min(n) {
                        lo = lo.min(raw_near[dy * n + dx]);
                        hi = hi.max(raw_far[dy * n + dx]);
                    }
                }
                near[y * n + x] = lo;
                far[y * n + x] = hi;
            }
        }
        DepthSplat { near, far }
    }

    fn band_at(&self, cam: &Camera, pixel: [f64; 2]) -> (f64, f64) {
        let n = SPLAT_RES as usize;
        let bx = ((pixel[0] / cam.width as f64 * n as f64) as usize).min(n - 1);
        let by = ((pixel[1] / cam.height as f64 * n as f64) as usize).min(n - 1);
        (self.near[by * n + bx], self.far[by * n + bx])
    }
}

/// Fully active SDF grid to start optimizing from. Sphere mode writes the
/// analytic distance to a sphere of radius 0.45 x extent around the bbox
/// center. Pseudo mode writes the unsigned nearest-neighbor distance to the
/// cloud, signed by a visibility vote: each covering view measures how far
/// the vertex depth sits inside the cloud's splatted near/far band at its
/// pixel, and the median over views decides the side. Points outside the
/// cloud hug a band edge in every view (they lie just past the surface
/// along each line of sight), so the median stays at or below zero even
/// where splat depths blur near a silhouette rim; interior points clear
/// both edges by their distance to the surface. A vertex no view covers
/// is outside.
pub fn init_sdf_grid(
    spec: &GridSpec,
    mode: SdfInit,
    pseudo: Option<&[Point3<f64>]>,
    cameras: &[Camera],
) -> Result<SparseScalarGrid, OptimError> {
    let center = nalgebra::center(&spec.lo, &spec.hi);
    let extent = spec.max_extent();
    let mut grid = SparseScalarGrid::dense(*spec, 0.0);
    match mode {
        SdfInit::Sphere => {
            let r = 0.45 * extent;
            let values: Vec<f64> = grid
                .vertex_coords()
                .iter()
                .map(|&c| (spec.vertex_world(c) - center).norm() - r)
                .collect();
            grid.values_mut().copy_from_slice(&values);
        }
        SdfInit::PseudoPoints => {
            let points = match pseudo {
                Some(p) if !p.is_empty() => p,
                _ => return Err(OptimError::EmptyPseudoCloud),
            };
            let nn = PointGrid::build(points).map_err(|e| match e {
                MeshError::EmptyPoints => OptimError::EmptyPseudoCloud,
                other => panic!("point grid build cannot fail otherwise: {other}"),
            })?;
            let splats: Vec<DepthSplat> =
                cameras.iter().map(|cam| DepthSplat::build(points, cam)).collect();
            let values: Vec<f64> = grid
                .vertex_coords()
                .par_iter()
                .map(|&c| {
                    let p = spec.vertex_world(c);
                    let d = nn.nearest(p).1;
                    let mut interior: Vec<f64> = Vec::with_capacity(cameras.len());
                    for (cam, splat) in cameras.iter().zip(&splats) {
                        let proj = cam.project(&p.coords);
                        if !proj.in_image || proj.behind {
                            continue;
                        }
                        // An empty bucket reads as an empty band: visible
                        // with no cloud along the ray means outside.
                        let (near, far) = splat.band_at(cam, proj.pixel);
                        interior.push((proj.depth - near).min(far - proj.depth));
                    }
                    if interior.is_empty() {
                        return d;
                    }
                    interior.sort_by(f64::total_cmp);
                    let mid = interior.len() / 2;
                    let median = if interior.len() % 2 == 1 {
                        interior[mid]
                    } else {
                        0.5 * (interior[mid - 1] + interior[mid])
                    };
                    if median > 0.0 {
                        -d
                    } else {
                        d
                    }
                })
                .collect();
            grid.values_mut().copy_from_slice(&values);
        }
    }
    Ok(grid)
}

// ---------------------------------------------------------------------------
// Matching-field step

struct WindowSlot {
    ray: Ray,
    region: SurfaceRegion,
    point: Vector3<f64>,
}

/// Per-view backward payload: the window loss and, per valid slot, the image
/// gradient and projection Jacobian needed to chain into ray parameters.
struct ViewWindow {
    value: f64,
    grad: Vec<Vector3<f64>>,
    chain: Vec<Option<(Vector3<f64>, Vector3<f64>, [Vector3<f64>; 2])>>,
}

#[allow(clippy::too_many_arguments)]
fn matching_ray_pass(
    grid: &SparseScalarGrid,
    images: &[Image],
    cameras: &[Camera],
    prev_maps: Option<&[SurfaceMap]>,
    layouts: &[SurfaceMap],
    schedule: &RegionSchedule,
    stage: usize,
    tau: f64,
    k_views: usize,
    scene_extent: f64,
    target: (usize, u32, u32),
    grads: &mut [f64],
) -> Option<f64> {
    let (view, mx, my) = target;
    let cam = &cameras[view];
    let layout = &layouts[view];
    let count = schedule.sample_counts[stage];

    // Localize the 3x3 texel window around the batch texel.
    let mut slots: Vec<Option<WindowSlot>> = Vec::with_capacity(9);
    let mut reference = vec![Vector3::zeros(); 9];
    for dy in -1i64..=1 {
        for dx in -1i64..=1 {
            let (tx, ty) = (mx as i64 + dx, my as i64 + dy);
            if tx < 0 || ty < 0 || tx >= layout.width as i64 || ty >= layout.height as i64 {
                slots.push(None);
                continue;
            }
            let (tx, ty) = (tx as u32, ty as u32);
            let (u, v) = layout.texel_pixel(tx, ty);
            let ray = cam.ray_through_pixel(u, v).expect("texel center is inside the image");
            let center = prev_maps.and_then(|maps| {
                let m = &maps[view];
                let i = m.idx(tx, ty);
                m.valid[i].then_some(m.ts[i])
            });
            let region = match center {
                Some(c) if stage > 0 => {
                    shrink_region(&ray, stage, schedule, scene_extent, c)
                        .expect("stage checked against schedule")
                }
                _ => SurfaceRegion::full(&ray),
            };
            match locate_surface(grid, &ray, region, count, tau) {
                Ok(loc) => {
                    let mut buf = [0.0f64; 3];
                    images[view].sample_bilinear_into(u, v, &mut buf);
                    reference[slots.len()] = Vector3::from_row_slice(&buf);
                    slots.push(Some(WindowSlot { ray, region, point: ray.at(loc.t) }));
                }
                Err(MatchingError::AllSamplesInvalid) => slots.push(None),
                Err(other) => panic!("unexpected localization failure: {other}"),
            }
        }
    }
    slots[4].as_ref()?;

    // Warp the window into every other view.
    let mut windows: Vec<(usize, ViewWindow)> = Vec::new();
    for (s, (img, scam)) in images.iter().zip(cameras).enumerate() {
        if s == view {
            continue;
        }
        let mut warped = vec![Vector3::zeros(); 9];
        let mut valid = vec![false; 9];
        let mut chain: Vec<Option<(Vector3<f64>, Vector3<f64>, [Vector3<f64>; 2])>> =
            vec![None; 9];
        for (i, slot) in slots.iter().enumerate() {
            let Some(slot) = slot else { continue };
            let proj = scam.project(&slot.point);
            if !proj.in_image || proj.behind {
                continue;
            }
            let Some(jac) = scam.project_jacobian(&slot.point) else { continue };
            let mut color = [0.0f64; 3];
            let (mut du, mut dv) = ([0.0f64; 3], [0.0f64; 3]);
            if !img.sample_bilinear_into(proj.pixel[0], proj.pixel[1], &mut color)
                || !img.sample_bilinear_grad_into(proj.pixel[0], proj.pixel[1], &mut du, &mut dv)
            {
                continue;
            }
            warped[i] = Vector3::from_row_slice(&color);
            chain[i] = Some((Vector3::from_row_slice(&du), Vector3::from_row_slice(&dv), jac));
            valid[i] = true;
        }
        if let Some(w) = window_warp_loss(&reference, &warped, &valid, 4) {
            windows.push((s, ViewWindow { value: w.value, grad: w.grad, chain }));
        }
    }
    if windows.is_empty() {
        return None;
    }

    // Keep the K best views (ties broken by view index, for stability).
    windows.sort_by(|a, b| a.1.value.total_cmp(&b.1.value).then(a.0.cmp(&b.0)));
    let k = k_views.min(windows.len());
    let inv_k = 1.0 / k as f64;
    let mut loss = 0.0;
    let mut dt = [0.0f64; 9];
    for (_, w) in &windows[..k] {
        loss += w.value * inv_k;
        for i in 0..9 {
            let (Some(slot), Some((du, dv, jac))) = (&slots[i], &w.chain[i]) else { continue };
            let dl_du = w.grad[i].dot(du);
            let dl_dv = w.grad[i].dot(dv);
            let d_point = jac[0] * dl_du + jac[1] * dl_dv;
            dt[i] += inv_k * d_point.dot(&slot.ray.dir);
        }
    }
    for (slot, &dti) in slots.iter().zip(&dt) {
        let Some(slot) = slot else { continue };
        if dti == 0.0 {
            continue;
        }
        locate_surface_adjoint(grid, &slot.ray, slot.region, count, tau, dti, grads)
            .expect("forward localization succeeded");
    }
    Some(loss)
}

/// One matching-field update: localize 3x3 windows around a batch of map
/// texels, warp them into the other views, keep the K best views per window,
/// and push the photometric gradient back into the matching grid through the
/// localization softmax. Returns the mean window loss over usable rays.
#[allow(clippy::too_many_arguments)]
pub fn step_matching(
    state: &mut OptimState,
    grid: &mut SparseScalarGrid,
    images: &[Image],
    cameras: &[Camera],
    prev_maps: Option<&[SurfaceMap]>,
    schedule: &RegionSchedule,
    stage: usize,
    cfg: &PipelineConfig,
    scene_extent: f64,
    rng: &mut ChaCha8Rng,
) -> Result<f64, OptimError> {
    if images.len() < 2 {
        return Err(OptimError::TooFewViews(images.len()));
    }
    let layouts: Vec<SurfaceMap> = cameras
        .iter()
        .map(|c| {
            SurfaceMap::invalid(
                c.width.div_ceil(cfg.map_scale),
                c.height.div_ceil(cfg.map_scale),
                c.width,
                c.height,
            )
        })
        .collect();
    let batch: Vec<(usize, u32, u32)> = (0..cfg.rays_per_step)
        .map(|_| {
            let view = rng.gen_range(0..images.len());
            let mx = rng.gen_range(0..layouts[view].width);
            let my = rng.gen_range(0..layouts[view].height);
            (view, mx, my)
        })
        .collect();
    let k_views = cfg.weights.warp_views_for(images.len() - 1);

    let chunk_size = batch.len().div_ceil(GRAD_CHUNKS);
    let chunks: Vec<(Vec<f64>, f64, usize)> = batch
        .par_chunks(chunk_size)
        .map(|chunk| {
            let mut grads = vec![0.0f64; grid.vertex_count()];
            let mut sum = 0.0;
            let mut used = 0;
            for &target in chunk {
                if let Some(l) = matching_ray_pass(
                    grid,
                    images,
                    cameras,
                    prev_maps,
                    &layouts,
                    schedule,
                    stage,
                    cfg.tau,
                    k_views,
                    scene_extent,
                    target,
                    &mut grads,
                ) {
                    sum += l;
                    used += 1;
                }
            }
            (grads, sum, used)
        })
        .collect();

    let mut grads = vec![0.0f64; grid.vertex_count()];
    let mut sum = 0.0;
    let mut used = 0usize;
    for (g, s, n) in chunks {
        for (acc, v) in grads.iter_mut().zip(&g) {
            *acc += v;
        }
        sum += s;
        used += n;
    }
    if used == 0 {
        return Err(OptimError::AllRaysInvalid);
    }
    let inv = 1.0 / used as f64;
    for g in &mut grads {
        *g *= inv;
    }
    state.apply(grid.values_mut(), &grads);
    Ok(sum * inv)
}

// ---------------------------------------------------------------------------
// SDF step

fn ray_regions(
    ray: &Ray,
    map: &SurfaceMap,
    px: u32,
    py: u32,
    schedule: &RegionSchedule,
    region_stages: usize,
    scene_extent: f64,
) -> Vec<SurfaceRegion> {
    let mx = (px * map.width / map.image_width).min(map.width - 1);
    let my = (py * map.height / map.image_height).min(map.height - 1);
    let i = map.idx(mx, my);
    let t_est = map.valid[i].then_some(map.ts[i]);
    (0..region_stages)
        .map(|st| match t_est {
            Some(t) if st > 0 => shrink_region(ray, st, schedule, scene_extent, t)
                .expect("stage checked against schedule"),
            _ => SurfaceRegion::full(ray),
        })
        .collect()
}

/// One SDF update: render a ray batch through the full multi-scale field,
/// backpropagate the photometric l1 error, add the eikonal and pseudo-point
/// regularizers, and apply adaptive-moment updates to every scale at once —
/// coarse grids keep receiving gradients for as long as they exist.
///
/// The matching-consistency term is reported (the gap between the rendered
/// and localized surface, where a localization exists) but carries no
/// gradient of its own.
#[allow(clippy::too_many_arguments)]
pub fn step_sdf(
    states: &mut [OptimState],
    grids: &mut [SparseScalarGrid],
    images: &[Image],
    cameras: &[Camera],
    pyramids: Option<&[ImagePyramid]>,
    maps: &[SurfaceMap],
    pseudo: Option<&[Point3<f64>]>,
    schedule: &RegionSchedule,
    region_stages: usize,
    s: f64,
    cfg: &PipelineConfig,
    scene_extent: f64,
    rng: &mut ChaCha8Rng,
) -> Result<LossTerms, OptimError> {
    assert_eq!(states.len(), grids.len());
    assert!(region_stages >= 1 && region_stages <= schedule.stages());
    let n_views = images.len();
    if n_views < 2 {
        return Err(OptimError::TooFewViews(n_views));
    }

    // Draw every random quantity up front, on the orchestrator thread.
    let batch: Vec<(usize, u32, u32)> = (0..cfg.rays_per_step)
        .map(|_| {
            let view = rng.gen_range(0..n_views);
            let px = rng.gen_range(0..images[view].width);
            let py = rng.gen_range(0..images[view].height);
            (view, px, py)
        })
        .collect();

    let (lo, hi) = (grids[0].spec().lo, grids[0].spec().hi);
    let valid_texels: Vec<Vec<usize>> = maps
        .iter()
        .map(|m| (0..m.valid.len()).filter(|&i| m.valid[i]).collect())
        .collect();
    let any_surface = valid_texels.iter().any(|v| !v.is_empty());
    let jitter = grids.last().unwrap().spec().cell_size().amax();
    let n_eik = cfg.rays_per_step;
    let eik_points: Vec<Point3<f64>> = (0..n_eik)
        .map(|i| {
            if i % 2 == 0 || !any_surface {
                Point3::new(
                    rng.gen_range(lo.x..hi.x),
                    rng.gen_range(lo.y..hi.y),
                    rng.gen_range(lo.z..hi.z),
                )
            } else {
                let view = loop {
                    let v = rng.gen_range(0..maps.len());
                    if !valid_texels[v].is_empty() {
                        break v;
                    }
                };
                let i = valid_texels[view][rng.gen_range(0..valid_texels[view].len())];
                let p = maps[view].points[i];
                Point3::new(
                    p.x + rng.gen_range(-jitter..jitter),
                    p.y + rng.gen_range(-jitter..jitter),
                    p.z + rng.gen_range(-jitter..jitter),
                )
            }
        })
        .collect();
    let pseudo_batch: Vec<Point3<f64>> = match pseudo {
        Some(pts) if !pts.is_empty() && cfg.weights.pseudo > 0.0 => (0..cfg
            .rays_per_step
            .min(pts.len()))
            .map(|_| pts[rng.gen_range(0..pts.len())])
            .collect(),
        _ => Vec::new(),
    };

    let field = MultiScaleSdf::new(grids.iter().collect())?;
    let views = RenderViews { cameras, images, pyramids };
    let rcfg = cfg.render_config(s, region_stages);

    let chunk_size = batch.len().div_ceil(GRAD_CHUNKS);
    let chunks: Vec<(Vec<Vec<f64>>, f64, f64, usize)> = batch
        .par_chunks(chunk_size)
        .map(|chunk| {
            let mut grads = field.zero_grads();
            let mut color_sum = 0.0;
            let mut mfc_sum = 0.0;
            let mut mfc_n = 0usize;
            for &(view, px, py) in chunk {
                let ray = cameras[view]
                    .ray_through_pixel(px as f64, py as f64)
                    .expect("batch pixel is inside the image");
                let regions =
                    ray_regions(&ray, &maps[view], px, py, schedule, region_stages, scene_extent);
                let forward = render_ray(&field, &views, &ray, &regions, &rcfg);
                let texel = images[view].texel(px, py);
                let obs = Vector3::new(texel[0] as f64, texel[1] as f64, texel[2] as f64);
                let diff = forward.color - obs;
                color_sum += diff.abs().sum() / 3.0;
                let upstream = diff.map(|d| d.signum() / 3.0);
                render_ray_backward(&field, &views, &ray, &regions, &rcfg, upstream, &mut grads);

                let m = &maps[view];
                let mx = (px * m.width / m.image_width).min(m.width - 1);
                let my = (py * m.height / m.image_height).min(m.height - 1);
                let i = m.idx(mx, my);
                if m.valid[i] {
                    mfc_sum += (forward.t_expectation - m.ts[i]).abs();
                    mfc_n += 1;
                }
            }
            (grads, color_sum, mfc_sum, mfc_n)
        })
        .collect();

    let mut grads = field.zero_grads();
    let (mut color_sum, mut mfc_sum, mut mfc_n) = (0.0, 0.0, 0usize);
    for (g, c, m, n) in chunks {
        for (acc, scale) in grads.iter_mut().zip(&g) {
            for (a, v) in acc.iter_mut().zip(scale) {
                *a += v;
            }
        }
        color_sum += c;
        mfc_sum += m;
        mfc_n += n;
    }
    let inv = 1.0 / batch.len() as f64;
    for scale in &mut grads {
        for g in scale.iter_mut() {
            *g *= inv;
        }
    }

    let eikonal = if cfg.weights.eikonal > 0.0 {
        eikonal_loss_backward(&field, &eik_points, cfg.weights.eikonal, &mut grads)?
    } else {
        0.0
    };
    let pseudo_val = if pseudo_batch.is_empty() {
        0.0
    } else {
        pseudo_loss_backward(&field, &pseudo_batch, cfg.weights.pseudo, &mut grads)
    };
    drop(field);

    for ((state, grid), g) in states.iter_mut().zip(grids.iter_mut()).zip(&grads) {
        state.apply(grid.values_mut(), g);
    }

    Ok(LossTerms {
        color: color_sum * inv,
        mfc: if mfc_n > 0 { mfc_sum / mfc_n as f64 } else { 0.0 },
        eikonal,
        pseudo: pseudo_val,
        warping: Vec::new(),
    })
}

// ---------------------------------------------------------------------------
// Pipeline

/// One JSON-lines record per optimization step.
#[derive(Debug, Clone, serde::Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub scale: usize,
    pub phase: &'static str,
    pub color: f64,
    pub mfc: f64,
    pub eikonal: f64,
    pub pseudo: f64,
    pub warping: f64,
    pub total: f64,
    /// Active-cell fraction of the finest SDF grid.
    pub active_fraction: f64,
    pub s: f64,
    pub elapsed_ms: u64,
}

pub struct PipelineOutput {
    pub sdf_grids: Vec<SparseScalarGrid>,
    pub matching_grid: SparseScalarGrid,
    pub maps: Vec<SurfaceMap>,
    pub records: Vec<StepRecord>,
}

struct RunCtx<'a> {
    cfg: &'a PipelineConfig,
    data: &'a SceneDataset,
    out: Option<PathBuf>,
    schedule: RegionSchedule,
    extent: f64,
    pyramids: Vec<ImagePyramid>,
    rng: ChaCha8Rng,
    matching: SparseScalarGrid,
    matching_state: OptimState,
    sdf: Vec<SparseScalarGrid>,
    sdf_states: Vec<OptimState>,
    maps: Option<Vec<SurfaceMap>>,
    records: Vec<StepRecord>,
    global_step: usize,
    sdf_steps_done: usize,
}

impl<'a> RunCtx<'a> {
    fn new(
        cfg: &'a PipelineConfig,
        data: &'a SceneDataset,
        out: Option<&Path>,
    ) -> Result<RunCtx<'a>, OptimError> {
        cfg.validate()?;
        if data.view_count() < 2 {
            return Err(OptimError::TooFewViews(data.view_count()));
        }
        let schedule = cfg.region_schedule()?;
        let n = cfg.base_resolution;
        let spec = GridSpec::new([n, n, n], data.bbox_lo, data.bbox_hi)?;
        let pyramids: Vec<ImagePyramid> = data
            .images
            .iter()
            .map(|im| build_pyramid(im, PYRAMID_LEVELS))
            .collect::<Result<_, _>>()?;
        let sdf_grid =
            init_sdf_grid(&spec, cfg.sdf_init, data.pseudo_points.as_deref(), &data.cameras)?;
        let matching = SparseScalarGrid::dense(spec, 0.0);
        Ok(RunCtx {
            cfg,
            data,
            out: out.map(Path::to_path_buf),
            schedule,
            extent: data.extent(),
            pyramids,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            matching_state: OptimState::new(matching.vertex_count(), cfg.matching_lr),
            matching,
            sdf_states: vec![OptimState::new(sdf_grid.vertex_count(), cfg.sdf_lr)],
            sdf: vec![sdf_grid],
            maps: None,
            records: Vec::new(),
            global_step: 0,
            sdf_steps_done: 0,
        })
    }

    fn sharpness(&self) -> f64 {
        annealed_sharpness(self.cfg.s_initial, self.sdf_steps_done, self.cfg.s_double_every)
    }

    fn record(
        &mut self,
        scale: usize,
        phase: &'static str,
        terms: &LossTerms,
        started: Instant,
    ) -> Result<(), OptimError> {
        let report = total_loss(terms, &self.cfg.weights)?;
        self.global_step += 1;
        self.records.push(StepRecord {
            step: self.global_step,
            scale,
            phase,
            color: terms.color,
            mfc: terms.mfc,
            eikonal: terms.eikonal,
            pseudo: terms.pseudo,
            warping: terms.warping.iter().sum(),
            total: report.total,
            active_fraction: self.sdf.last().unwrap().occupancy_report().fraction,
            s: self.sharpness(),
            elapsed_ms: started.elapsed().as_millis() as u64,
        });
        Ok(())
    }

    fn drive(&mut self) -> Result<(), OptimError> {
        let scales = self.cfg.scales;
        for j in 0..scales {
            // (a) Score the matching grid from photo-consistency: the
            // initial scoring at the first scale, a re-score of the
            // subdivided grid afterwards.
            init_matching_from_photoconsistency(
                &mut self.matching,
                &self.pyramids,
                &self.data.cameras,
                self.cfg.fusion,
                SCORE_SCALE,
            )?;

            // (b) Fine-tune the matching field photometrically.
            for _ in 0..self.cfg.matching_steps[j] {
                let started = Instant::now();
                let wl = step_matching(
                    &mut self.matching_state,
                    &mut self.matching,
                    &self.data.images,
                    &self.data.cameras,
                    self.maps.as_deref(),
                    &self.schedule,
                    j,
                    self.cfg,
                    self.extent,
                    &mut self.rng,
                )?;
                let mut warping = vec![0.0; scales];
                warping[j] = wl;
                let terms = LossTerms { warping, ..LossTerms::default() };
                self.record(j + 1, "matching", &terms, started)?;
            }

            // (c) Freeze this scale's surface maps.
            let window = (j > 0).then(|| self.cfg.eps_ratios[j] * self.extent);
            let maps: Vec<SurfaceMap> = self
                .data
                .cameras
                .iter()
                .enumerate()
                .map(|(v, cam)| {
                    build_surface_map(
                        &self.matching,
                        cam,
                        self.cfg.map_scale,
                        self.schedule.sample_counts[j],
                        self.cfg.tau,
                        window,
                        self.maps.as_ref().map(|m| &m[v]),
                    )
                })
                .collect::<Result<_, _>>()?;
            self.maps = Some(maps);
            let maps = self.maps.as_ref().unwrap();

            // (d) Cascade both grids to the next scale.
            if j + 1 < scales {
                let eps_next = self.cfg.eps_ratios[j + 1] * self.extent;
                self.matching =
                    cascade_step(&self.matching, &self.data.cameras, maps, eps_next)?;
                self.matching_state =
                    OptimState::new(self.matching.vertex_count(), self.cfg.matching_lr);
                let finest = self.sdf.last().unwrap();
                let keep = sparsify(finest, &self.data.cameras, maps, eps_next)?;
                if keep.is_empty() {
                    return Err(SparsifyError::EmptyKeep.into());
                }
                let mut next = finest.subdivide(&keep)?;
                // New scales hold residuals on top of the coarser field.
                next.set_all_values(0.0);
                self.sdf_states.push(OptimState::new(next.vertex_count(), self.cfg.sdf_lr));
                self.sdf.push(next);
            }

            // (e) Optimize the SDF stack end to end.
            let region_stages = self.sdf.len().min(self.schedule.stages());
            for _ in 0..self.cfg.sdf_steps[j] {
                let started = Instant::now();
                let s = self.sharpness();
                let terms = step_sdf(
                    &mut self.sdf_states,
                    &mut self.sdf,
                    &self.data.images,
                    &self.data.cameras,
                    Some(&self.pyramids),
                    self.maps.as_ref().unwrap(),
                    self.data.pseudo_points.as_deref(),
                    &self.schedule,
                    region_stages,
                    s,
                    self.cfg,
                    self.extent,
                    &mut self.rng,
                )?;
                self.sdf_steps_done += 1;
                self.record(j + 1, "sdf", &terms, started)?;
            }

            self.checkpoint()?;
        }
        Ok(())
    }

    /// Writes the current grids and log atomically; used both for per-scale
    /// checkpoints and as the last-good dump on failure.
    fn checkpoint(&self) -> Result<(), OptimError> {
        let Some(dir) = &self.out else { return Ok(()) };
        let grids_dir = dir.join("grids");
        std::fs::create_dir_all(&grids_dir)?;
        for (i, g) in self.sdf.iter().enumerate() {
            g.save_snapshot(&grids_dir.join(format!("scale{}.ssgv", i + 1)))?;
        }
        self.matching.save_snapshot(&grids_dir.join("matching.ssgv"))?;
        let mut log = String::new();
        for r in &self.records {
            log.push_str(&serde_json::to_string(r)?);
            log.push('\n');
        }
        write_atomic(&dir.join("log.jsonl"), |f| {
            use std::io::Write;
            f.write_all(log.as_bytes())
        })?;
        Ok(())
    }
}

/// Runs the full coarse-to-fine loop. With an output directory, grids and
/// the JSON-lines log are checkpointed after every scale — and dumped one
/// final time if a later stage fails, so a crash always leaves the last
/// good state on disk.
pub fn run_pipeline(
    cfg: &PipelineConfig,
    data: &SceneDataset,
    out_dir: Option<&Path>,
) -> Result<PipelineOutput, OptimError> {
    let mut ctx = RunCtx::new(cfg, data, out_dir)?;
    let outcome = ctx.drive();
    // Best-effort dump even when the run failed mid-scale.
    let dump = ctx.checkpoint();
    outcome?;
    dump?;
    Ok(PipelineOutput {
        sdf_grids: ctx.sdf,
        matching_grid: ctx.matching,
        maps: ctx.maps.unwrap_or_default(),
        records: ctx.records,
    })
}
