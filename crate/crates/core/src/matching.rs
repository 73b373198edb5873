//! Per-ray surface localization on a matching field.
//!
//! The matching field is a sparse scalar grid scoring photo-consistency:
//! high values where fused multi-view features agree, low elsewhere. Along a
//! viewing ray the surface is localized as a soft argmax (softmax-weighted
//! mean of sample positions), which is differentiable in the grid values, so
//! the field can be optimized through losses defined on the localized
//! points. Localization runs coarse-to-fine: each stage re-centers a
//! narrower search window on the previous stage's estimate.

use nalgebra::Point3;
use rayon::prelude::*;
use thiserror::Error;

use crate::formats::{self, FormatError};
use crate::geometry::{Camera, Ray};
use crate::grid::SparseScalarGrid;
use crate::pyramid::{fuse_views, fusion_weights, FusionMode, ImagePyramid, FEATURE_CHANNELS};

/// Score given to matching-field vertices seen by fewer than two views;
/// effectively removes them from every soft argmax without changing the
/// valid-sample set.
pub const MISSING_VERTEX_SCORE: f64 = -1.0e4;

#[derive(Debug, Error)]
pub enum MatchingError {
    #[error("schedule stage lists must be equal nonzero lengths")]
    BadSchedule,
    #[error("stage {0} out of range; schedule has {1} stages")]
    BadStage(usize, usize),
    #[error("search region [{lo}, {hi}] is empty or not finite")]
    BadRegion { lo: f64, hi: f64 },
    #[error("need at least 2 samples along the ray, got {0}")]
    TooFewSamples(usize),
    #[error("temperature must be positive and finite, got {0}")]
    BadTemperature(f64),
    #[error("no sample along the ray landed in an active cell")]
    AllSamplesInvalid,
    #[error("need at least two views, got {0}")]
    TooFewViews(usize),
}

/// Coarse-to-fine search schedule: per stage, how many samples each ray
/// takes and the window width as a fraction of the scene extent.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionSchedule {
    pub sample_counts: Vec<usize>,
    pub relative_widths: Vec<f64>,
}

impl RegionSchedule {
    pub fn new(sample_counts: Vec<usize>, relative_widths: Vec<f64>) -> Result<Self, MatchingError> {
        if sample_counts.is_empty() || sample_counts.len() != relative_widths.len() {
            return Err(MatchingError::BadSchedule);
        }
        if sample_counts.iter().any(|&c| c < 2) {
            return Err(MatchingError::BadSchedule);
        }
        let monotone = relative_widths.windows(2).all(|w| w[1] <= w[0]);
        if !monotone || relative_widths.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
            return Err(MatchingError::BadSchedule);
        }
        Ok(Self { sample_counts, relative_widths })
    }

    pub fn stages(&self) -> usize {
        self.sample_counts.len()
    }
}

impl Default for RegionSchedule {
    /// Four stages halving the sample count while the window shrinks
    /// 1 : 0.3 : 0.1 : 0.01.
    fn default() -> Self {
        RegionSchedule::new(vec![128, 64, 32, 16], vec![1.0, 0.3, 0.1, 0.01])
            .expect("schedule constants are valid")
    }
}

/// t-interval searched along one ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfaceRegion {
    pub lo: f64,
    pub hi: f64,
}

impl SurfaceRegion {
    pub fn full(ray: &Ray) -> Self {
        SurfaceRegion { lo: ray.near, hi: ray.far }
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    /// Distance between adjacent midpoint samples.
    pub fn spacing(&self, count: usize) -> f64 {
        self.width() / count as f64
    }
}

/// The first stage searches the whole ray; each later stage centers a
/// window of that stage's width on `center` (the previous estimate),
/// clamped into the ray's depth range.
pub fn shrink_region(
    ray: &Ray,
    stage: usize,
    schedule: &RegionSchedule,
    scene_extent: f64,
    center: f64,
) -> Result<SurfaceRegion, MatchingError> {
    if stage >= schedule.stages() {
        return Err(MatchingError::BadStage(stage, schedule.stages()));
    }
    if stage == 0 {
        return Ok(SurfaceRegion::full(ray));
    }
    let half = 0.5 * schedule.relative_widths[stage] * scene_extent;
    let c = center.clamp(ray.near, ray.far);
    Ok(SurfaceRegion { lo: (c - half).max(ray.near), hi: (c + half).min(ray.far) })
}

/// Localized crossing along one ray.
#[derive(Debug, Clone, Copy)]
pub struct SurfaceLocation {
    /// Softmax-weighted mean of valid sample positions.
    pub t: f64,
    /// Midpoint sample spacing of the searched region.
    pub spacing: f64,
    /// Samples that landed in active cells and contributed.
    pub valid_count: usize,
}

fn check_params(region: SurfaceRegion, count: usize, tau: f64) -> Result<(), MatchingError> {
    if !(region.lo.is_finite() && region.hi.is_finite() && region.hi > region.lo) {
        return Err(MatchingError::BadRegion { lo: region.lo, hi: region.hi });
    }
    if count < 2 {
        return Err(MatchingError::TooFewSamples(count));
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(MatchingError::BadTemperature(tau));
    }
    Ok(())
}

/// Soft argmax of the field over `count` midpoint samples of the region.
/// Samples outside the grid or in inactive cells are excluded from the
/// softmax rather than treated as zero.
pub fn locate_surface(
    grid: &SparseScalarGrid,
    ray: &Ray,
    region: SurfaceRegion,
    count: usize,
    tau: f64,
) -> Result<SurfaceLocation, MatchingError> {
    check_params(region, count, tau)?;
    let spacing = region.spacing(count);
    let mut max_value = f64::NEG_INFINITY;
    let mut samples = Vec::with_capacity(count);
    for k in 0..count {
        let t = region.lo + (k as f64 + 0.5) * spacing;
        if let Some(v) = grid.value_at(Point3::from(ray.at(t))) {
            max_value = max_value.max(v);
            samples.push((t, v));
        }
    }
    if samples.is_empty() {
        return Err(MatchingError::AllSamplesInvalid);
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for &(t, v) in &samples {
        let e = ((v - max_value) / tau).exp();
        num += e * t;
        den += e;
    }
    Ok(SurfaceLocation { t: num / den, spacing, valid_count: samples.len() })
}

/// Forward localization plus gradient scatter: accumulates
/// `upstream * dt/d(value_v)` into `grads` (indexed like the grid's vertex
/// table). The softmax weight of sample k moves the estimate by
/// `gamma_k (t_k - t) / tau` per unit of its field value, and each field
/// value is a trilinear blend of vertex values.
pub fn locate_surface_adjoint(
    grid: &SparseScalarGrid,
    ray: &Ray,
    region: SurfaceRegion,
    count: usize,
    tau: f64,
    upstream: f64,
    grads: &mut [f64],
) -> Result<SurfaceLocation, MatchingError> {
    check_params(region, count, tau)?;
    assert_eq!(grads.len(), grid.vertex_count(), "gradient buffer shape");
    let spacing = region.spacing(count);
    let mut max_value = f64::NEG_INFINITY;
    let mut samples = Vec::with_capacity(count);
    for k in 0..count {
        let t = region.lo + (k as f64 + 0.5) * spacing;
        if let Some(s) = grid.sample(Point3::from(ray.at(t))) {
            max_value = max_value.max(s.value);
            samples.push((t, s));
        }
    }
    if samples.is_empty() {
        return Err(MatchingError::AllSamplesInvalid);
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for (t, s) in &samples {
        let e = ((s.value - max_value) / tau).exp();
        num += e * t;
        den += e;
    }
    let t_s = num / den;
    for (t, s) in &samples {
        let gamma = ((s.value - max_value) / tau).exp() / den;
        let dt_dv = gamma * (t - t_s) / tau;
        for c in 0..8 {
            grads[s.vertices[c] as usize] += upstream * dt_dv * s.weights[c];
        }
    }
    Ok(SurfaceLocation { t: t_s, spacing, valid_count: samples.len() })
}

/// Bilinear readout of a surface map at full-resolution pixel coordinates.
#[derive(Debug, Clone, Copy)]
pub struct MapSample {
    pub point: Point3<f64>,
    /// Spread of the four contributing texels' ray parameters; large values
    /// flag a depth discontinuity under the footprint.
    pub t_span: f64,
}

/// Per-view grid of localized surface points, at a fraction of image
/// resolution. Texels where localization failed are invalid and poison any
/// bilinear footprint that touches them.
#[derive(Debug, Clone)]
pub struct SurfaceMap {
    pub width: u32,
    pub height: u32,
    pub image_width: u32,
    pub image_height: u32,
    pub points: Vec<Point3<f64>>,
    /// Ray parameter per texel (the debug quantity dumped to PFM).
    pub ts: Vec<f64>,
    pub valid: Vec<bool>,
}

impl SurfaceMap {
    /// All-invalid map of the given shape; callers fill texels in.
    pub fn invalid(width: u32, height: u32, image_width: u32, image_height: u32) -> Self {
        let n = (width * height) as usize;
        SurfaceMap {
            width,
            height,
            image_width,
            image_height,
            points: vec![Point3::origin(); n],
            ts: vec![0.0; n],
            valid: vec![false; n],
        }
    }

    pub fn idx(&self, x: u32, y: u32) -> usize {
        (y * self.width + x) as usize
    }

    /// Center of map texel (mx, my) in full-resolution pixel coordinates.
    pub fn texel_pixel(&self, mx: u32, my: u32) -> (f64, f64) {
        let sx = self.image_width as f64 / self.width as f64;
        let sy = self.image_height as f64 / self.height as f64;
        ((mx as f64 + 0.5) * sx - 0.5, (my as f64 + 0.5) * sy - 0.5)
    }

    /// Bilinear surface point under a full-resolution pixel coordinate.
    /// None when the footprint leaves the map or touches an invalid texel.
    pub fn sample(&self, u: f64, v: f64) -> Option<MapSample> {
        let mu = (u + 0.5) * self.width as f64 / self.image_width as f64 - 0.5;
        let mv = (v + 0.5) * self.height as f64 / self.image_height as f64 - 0.5;
        if !(mu >= 0.0 && mu <= (self.width - 1) as f64 && mv >= 0.0 && mv <= (self.height - 1) as f64)
        {
            return None;
        }
        let x0 = (mu.floor() as u32).min(self.width - 2);
        let y0 = (mv.floor() as u32).min(self.height - 2);
        let (fx, fy) = (mu - x0 as f64, mv - y0 as f64);
        let mut point = Point3::origin();
        let mut t_min = f64::INFINITY;
        let mut t_max = f64::NEG_INFINITY;
        for (dx, dy, w) in [
            (0u32, 0u32, (1.0 - fx) * (1.0 - fy)),
            (1, 0, fx * (1.0 - fy)),
            (0, 1, (1.0 - fx) * fy),
            (1, 1, fx * fy),
        ] {
            let i = self.idx(x0 + dx, y0 + dy);
            if !self.valid[i] {
                return None;
            }
            point += self.points[i].coords * w;
            t_min = t_min.min(self.ts[i]);
            t_max = t_max.max(self.ts[i]);
        }
        Some(MapSample { point, t_span: t_max - t_min })
    }

    /// Builds a map from a full-resolution per-pixel ray-parameter image
    /// (0 marks a miss), picking the nearest pixel under each texel center.
    /// This is how ground-truth depth doubles as a surface map.
    pub fn from_depth_map(cam: &Camera, depth: &[f32], scale: u32) -> SurfaceMap {
        assert_eq!(depth.len(), (cam.width * cam.height) as usize);
        assert!(scale >= 1);
        let width = cam.width.div_ceil(scale);
        let height = cam.height.div_ceil(scale);
        let mut map = SurfaceMap::invalid(width, height, cam.width, cam.height);
        for my in 0..height {
            for mx in 0..width {
                let (u, v) = map.texel_pixel(mx, my);
                let px = (u.round() as i64).clamp(0, cam.width as i64 - 1) as u32;
                let py = (v.round() as i64).clamp(0, cam.height as i64 - 1) as u32;
                let t = depth[(py * cam.width + px) as usize] as f64;
                if t <= 0.0 {
                    continue;
                }
                let ray = cam
                    .ray_through_pixel(px as f64, py as f64)
                    .expect("pixel inside image");
                let i = map.idx(mx, my);
                map.points[i] = Point3::from(ray.at(t));
                map.ts[i] = t;
                map.valid[i] = true;
            }
        }
        map
    }

    /// Debug dump of the ray parameters; invalid texels become 0.
    pub fn save_t_pfm(&self, path: &std::path::Path) -> Result<(), FormatError> {
        let data: Vec<f32> = self
            .ts
            .iter()
            .zip(&self.valid)
            .map(|(&t, &ok)| if ok { t as f32 } else { 0.0 })
            .collect();
        formats::save_pfm(path, self.width, self.height, &data)
    }

    pub fn valid_fraction(&self) -> f64 {
        self.valid.iter().filter(|&&v| v).count() as f64 / self.valid.len().max(1) as f64
    }
}

/// Localizes the surface along the central ray of every map texel.
///
/// `window` is the absolute world-space width of the search region; with a
/// previous map, each texel's window centers on its old estimate. Texels
/// with no previous estimate (or no window) search the whole ray. Texels
/// whose samples all miss active cells come back invalid.
pub fn build_surface_map(
    grid: &SparseScalarGrid,
    cam: &Camera,
    map_scale: u32,
    count: usize,
    tau: f64,
    window: Option<f64>,
    prev: Option<&SurfaceMap>,
) -> Result<SurfaceMap, MatchingError> {
    check_params(SurfaceRegion { lo: 0.0, hi: 1.0 }, count, tau)?;
    if let Some(w) = window {
        if !(w > 0.0 && w.is_finite()) {
            return Err(MatchingError::BadRegion { lo: 0.0, hi: w });
        }
    }
    assert!(map_scale >= 1);
    let width = cam.width.div_ceil(map_scale);
    let height = cam.height.div_ceil(map_scale);
    let mut map = SurfaceMap::invalid(width, height, cam.width, cam.height);

    let rows: Vec<Vec<Option<(Point3<f64>, f64)>>> = (0..height)
        .into_par_iter()
        .map(|my| {
            let mut row = Vec::with_capacity(width as usize);
            for mx in 0..width {
                let (u, v) = map.texel_pixel(mx, my);
                let ray = cam.ray_through_pixel(u, v).expect("texel center inside image");
                let region = match (window, prev) {
                    (Some(w), Some(p)) if p.valid[p.idx(mx, my)] => {
                        let c = p.ts[p.idx(mx, my)].clamp(ray.near, ray.far);
                        SurfaceRegion {
                            lo: (c - 0.5 * w).max(ray.near),
                            hi: (c + 0.5 * w).min(ray.far),
                        }
                    }
                    _ => SurfaceRegion::full(&ray),
                };
                match locate_surface(grid, &ray, region, count, tau) {
                    Ok(loc) => row.push(Some((Point3::from(ray.at(loc.t)), loc.t))),
                    Err(MatchingError::AllSamplesInvalid) => row.push(None),
                    Err(other) => panic!("unexpected localization failure: {other}"),
                }
            }
            row
        })
        .collect();

    for (my, row) in rows.into_iter().enumerate() {
        for (mx, texel) in row.into_iter().enumerate() {
            if let Some((point, t)) = texel {
                let i = map.idx(mx as u32, my as u32);
                map.points[i] = point;
                map.ts[i] = t;
                map.valid[i] = true;
            }
        }
    }
    Ok(map)
}

/// Scores every vertex of the matching grid by multi-view feature
/// agreement: project the vertex into each view, fuse the per-view residual
/// features, and take the negative scaled l1 variance. Vertices seen by
/// fewer than two views get `MISSING_VERTEX_SCORE`.
pub fn init_matching_from_photoconsistency(
    grid: &mut SparseScalarGrid,
    pyramids: &[ImagePyramid],
    cameras: &[Camera],
    mode: FusionMode,
    score_scale: f64,
) -> Result<(), MatchingError> {
    if pyramids.len() < 2 || pyramids.len() != cameras.len() {
        return Err(MatchingError::TooFewViews(pyramids.len().min(cameras.len())));
    }
    let values: Vec<f64> = (0..grid.vertex_count() as u32)
        .into_par_iter()
        .map_init(
            || (Vec::new(), vec![0.0; FEATURE_CHANNELS as usize]),
            |(features, buf), vi| {
                features.clear();
                let p = grid.vertex_world(vi);
                for (pyr, cam) in pyramids.iter().zip(cameras) {
                    let proj = cam.project(&p.coords);
                    if !proj.in_image || proj.behind {
                        continue;
                    }
                    if pyr.sample_residual_features_into(proj.pixel[0], proj.pixel[1], buf) {
                        features.push(buf.clone());
                    }
                }
                if features.len() < 2 {
                    return MISSING_VERTEX_SCORE;
                }
                let weights = fusion_weights(features, mode).expect("non-empty feature set");
                let fused = fuse_views(features, &weights).expect("weights form a simplex");
                -score_scale * fused.variance.iter().sum::<f64>()
            },
        )
        .collect();
    grid.values_mut().copy_from_slice(&values);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Image;
    use crate::grid::GridSpec;
    use crate::pyramid::build_pyramid;
    use crate::scene::{gen_synthetic, GenConfig, Shape};
    use approx::assert_relative_eq;
    use nalgebra::Vector3;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn unit_spec(n: u32) -> GridSpec {
        GridSpec::new([n, n, n], Point3::new(-1.0, -1.0, -1.0), Point3::new(1.0, 1.0, 1.0))
            .unwrap()
    }

    fn down_z_ray(x: f64, y: f64) -> Ray {
        Ray { origin: Vector3::new(x, y, 2.0), dir: -Vector3::z(), near: 0.5, far: 3.5 }
    }

    /// Matching-style volume peaking on the plane z = z0.
    fn plane_peak_grid(n: u32, z0: f64, sharpness: f64) -> SparseScalarGrid {
        let mut grid = SparseScalarGrid::dense(unit_spec(n), 0.0);
        let coords = grid.vertex_coords().to_vec();
        let spec = grid.spec().clone();
        for (i, c) in coords.iter().enumerate() {
            let p = spec.vertex_world(*c);
            grid.values_mut()[i] = -sharpness * (p.z - z0).abs();
        }
        grid
    }

    #[test]
    fn soft_argmax_finds_a_field_peak_within_one_spacing() {
        let z0 = 0.137;
        let grid = plane_peak_grid(32, z0, 50.0);
        let ray = down_z_ray(0.2, -0.3);
        let region = SurfaceRegion::full(&ray);
        let loc = locate_surface(&grid, &ray, region, 128, 1.0).unwrap();
        let t_true = 2.0 - z0;
        assert!(
            (loc.t - t_true).abs() <= loc.spacing,
            "err {} spacing {}",
            (loc.t - t_true).abs(),
            loc.spacing
        );
    }

    #[test]
    fn soft_argmax_is_exact_for_a_window_centered_on_the_peak() {
        // Symmetric samples around the peak cancel exactly.
        let z0 = 0.25;
        let grid = plane_peak_grid(64, z0, 50.0);
        let ray = down_z_ray(0.0, 0.0);
        let t_true = 2.0 - z0;
        let region = SurfaceRegion { lo: t_true - 0.25, hi: t_true + 0.25 };
        let loc = locate_surface(&grid, &ray, region, 50, 1.0).unwrap();
        assert_relative_eq!(loc.t, t_true, epsilon = 1e-9);
    }

    #[test]
    fn localization_narrows_through_the_default_schedule() {
        let z0 = -0.083;
        let grid = plane_peak_grid(64, z0, 50.0);
        let schedule = RegionSchedule::default();
        let ray = down_z_ray(-0.4, 0.1);
        let t_true = 2.0 - z0;
        let mut center = 0.0;
        let mut errs = Vec::new();
        for stage in 0..schedule.stages() {
            let region = shrink_region(&ray, stage, &schedule, 2.0, center).unwrap();
            let loc =
                locate_surface(&grid, &ray, region, schedule.sample_counts[stage], 1.0).unwrap();
            errs.push((loc.t - t_true).abs());
            // Every stage localizes to within its own sample spacing; the
            // stronger claim (the error median shrinks stage over stage)
            // only holds across many rays and lives in the integration
            // suite.
            assert!(
                (loc.t - t_true).abs() <= loc.spacing,
                "stage {stage}: err {} spacing {}",
                (loc.t - t_true).abs(),
                loc.spacing
            );
            center = loc.t;
        }
        assert!(errs.last().unwrap() < &0.002);
    }

    #[test]
    fn invalid_samples_are_excluded_not_zeroed() {
        // Constant field active only for z < 0; the soft argmax over a
        // constant is the plain mean of the *valid* sample positions.
        let mut grid = SparseScalarGrid::dense(unit_spec(16), 0.0);
        grid.set_all_values(3.0);
        let spec = grid.spec().clone();
        let grid = grid
            .restricted(|cell| spec.cell_center(cell).z < 0.0)
            .unwrap();
        let ray = down_z_ray(0.05, 0.05);
        let region = SurfaceRegion { lo: 0.5, hi: 3.5 };
        let count = 100;
        let loc = locate_surface(&grid, &ray, region, count, 1.0).unwrap();
        let spacing = region.spacing(count);
        let valid_ts: Vec<f64> = (0..count)
            .map(|k| region.lo + (k as f64 + 0.5) * spacing)
            .filter(|&t| {
                let z = 2.0 - t;
                (-1.0..0.0).contains(&z)
            })
            .collect();
        let mean = valid_ts.iter().sum::<f64>() / valid_ts.len() as f64;
        assert_relative_eq!(loc.t, mean, epsilon = 1e-9);
        assert_eq!(loc.valid_count, valid_ts.len());
    }

    #[test]
    fn empty_rays_and_bad_parameters_error() {
        let spec = unit_spec(8);
        let grid = SparseScalarGrid::dense(spec.clone(), 0.0);
        let off = grid.restricted(|cell| cell == [0, 0, 0]).unwrap();
        let ray = down_z_ray(0.9, 0.9);
        let region = SurfaceRegion::full(&ray);
        assert!(matches!(
            locate_surface(&off, &ray, region, 64, 1.0),
            Err(MatchingError::AllSamplesInvalid)
        ));
        assert!(matches!(
            locate_surface(&grid, &ray, SurfaceRegion { lo: 2.0, hi: 2.0 }, 64, 1.0),
            Err(MatchingError::BadRegion { .. })
        ));
        assert!(matches!(
            locate_surface(&grid, &ray, region, 1, 1.0),
            Err(MatchingError::TooFewSamples(1))
        ));
        assert!(matches!(
            locate_surface(&grid, &ray, region, 64, 0.0),
            Err(MatchingError::BadTemperature(_))
        ));
    }

    #[test]
    fn shrink_region_clamps_to_the_ray_range() {
        let schedule = RegionSchedule::default();
        let ray = down_z_ray(0.0, 0.0);
        let full = shrink_region(&ray, 0, &schedule, 2.0, 123.0).unwrap();
        assert_eq!(full, SurfaceRegion { lo: 0.5, hi: 3.5 });
        // Stage 2: width 0.1 * extent = 0.2 centered on 2.0.
        let mid = shrink_region(&ray, 2, &schedule, 2.0, 2.0).unwrap();
        assert_relative_eq!(mid.lo, 1.9, epsilon = 1e-12);
        assert_relative_eq!(mid.hi, 2.1, epsilon = 1e-12);
        // Center beyond the far bound clamps to it.
        let tail = shrink_region(&ray, 3, &schedule, 2.0, 10.0).unwrap();
        assert_relative_eq!(tail.hi, 3.5, epsilon = 1e-12);
        assert_relative_eq!(tail.lo, 3.5 - 0.01, epsilon = 1e-12);
        assert!(matches!(
            shrink_region(&ray, 4, &schedule, 2.0, 0.0),
            Err(MatchingError::BadStage(4, 4))
        ));
    }

    #[test]
    fn schedule_validation_rejects_malformed_stage_lists() {
        assert!(RegionSchedule::new(vec![], vec![]).is_err());
        assert!(RegionSchedule::new(vec![4, 4], vec![1.0]).is_err());
        assert!(RegionSchedule::new(vec![4, 1], vec![1.0, 0.5]).is_err());
        assert!(RegionSchedule::new(vec![4, 4], vec![0.5, 1.0]).is_err());
        assert!(RegionSchedule::new(vec![4, 4], vec![1.0, 0.0]).is_err());
        assert!(RegionSchedule::new(vec![4, 4], vec![1.0, 0.5]).is_ok());
    }

    #[test]
    fn adjoint_matches_central_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let mut grid = SparseScalarGrid::dense(unit_spec(6), 0.0);
        for v in grid.values_mut() {
            *v = rng.gen_range(-2.0..2.0);
        }
        let tau = 0.7;
        for probe in 0..25 {
            let ray = down_z_ray(rng.gen_range(-0.8..0.8), rng.gen_range(-0.8..0.8));
            let region = SurfaceRegion { lo: 1.1, hi: 2.9 };
            let mut grads = vec![0.0; grid.vertex_count()];
            let loc =
                locate_surface_adjoint(&grid, &ray, region, 33, tau, 1.0, &mut grads).unwrap();
            // Probe the few vertices with the largest analytic gradient plus
            // a random one.
            let mut order: Vec<usize> = (0..grads.len()).collect();
            order.sort_by(|&a, &b| grads[b].abs().total_cmp(&grads[a].abs()));
            let mut picks = order[..4].to_vec();
            picks.push(rng.gen_range(0..grads.len()));
            for vi in picks {
                let h = 1e-5;
                let base = grid.values()[vi];
                grid.values_mut()[vi] = base + h;
                let plus = locate_surface(&grid, &ray, region, 33, tau).unwrap().t;
                grid.values_mut()[vi] = base - h;
                let minus = locate_surface(&grid, &ray, region, 33, tau).unwrap().t;
                grid.values_mut()[vi] = base;
                let fd = (plus - minus) / (2.0 * h);
                let denom = fd.abs().max(grads[vi].abs()).max(1e-8);
                assert!(
                    (fd - grads[vi]).abs() / denom < 1e-5,
                    "probe {probe} vertex {vi}: fd {fd:.3e} vs adjoint {:.3e}",
                    grads[vi]
                );
            }
            assert!(loc.t.is_finite());
        }
    }

    #[test]
    fn adjoint_scales_with_upstream_and_accumulates() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut grid = SparseScalarGrid::dense(unit_spec(5), 0.0);
        for v in grid.values_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let ray = down_z_ray(0.1, -0.2);
        let region = SurfaceRegion { lo: 1.2, hi: 2.8 };
        let mut once = vec![0.0; grid.vertex_count()];
        locate_surface_adjoint(&grid, &ray, region, 16, 1.0, 1.0, &mut once).unwrap();
        let mut scaled = vec![0.0; grid.vertex_count()];
        locate_surface_adjoint(&grid, &ray, region, 16, 1.0, -2.5, &mut scaled).unwrap();
        locate_surface_adjoint(&grid, &ray, region, 16, 1.0, 0.5, &mut scaled).unwrap();
        for (a, b) in once.iter().zip(&scaled) {
            assert_relative_eq!(*b, a * -2.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn surface_map_bilinear_blends_points_and_rejects_invalid_corners() {
        let mut map = SurfaceMap::invalid(4, 4, 16, 16);
        for my in 0..4u32 {
            for mx in 0..4u32 {
                let i = map.idx(mx, my);
                map.points[i] = Point3::new(mx as f64, my as f64, 1.0);
                map.ts[i] = 1.0 + 0.1 * mx as f64;
                map.valid[i] = true;
            }
        }
        let corner = map.idx(3, 3);
        map.valid[corner] = false;
        // Image pixel (u, v) maps to map coords (u+0.5)/4 - 0.5.
        let s = map.sample(5.5, 5.5).unwrap();
        assert_relative_eq!(s.point.x, 1.0, epsilon = 1e-12);
        assert_relative_eq!(s.point.y, 1.0, epsilon = 1e-12);
        let s = map.sample(7.5, 5.5).unwrap();
        assert_relative_eq!(s.point.x, 1.5, epsilon = 1e-12);
        assert_relative_eq!(s.t_span, 0.1, epsilon = 1e-12);
        // Footprint touching the invalid texel.
        assert!(map.sample(12.0, 12.0).is_none());
        // Outside the half-texel border.
        assert!(map.sample(0.4, 8.0).is_none());
        assert!(map.sample(15.2, 8.0).is_none());
    }

    #[test]
    fn map_from_depth_matches_analytic_surface() {
        let cfg = GenConfig::new(Shape::Sphere, 2, 64, 64, 21);
        let data = gen_synthetic(&cfg).unwrap();
        let cam = &data.cameras[0];
        let map = SurfaceMap::from_depth_map(cam, &data.gt_depth.as_ref().unwrap()[0], 4);
        assert_eq!((map.width, map.height), (16, 16));
        let mut seen = 0;
        for my in 0..map.height {
            for mx in 0..map.width {
                let i = map.idx(mx, my);
                if map.valid[i] {
                    seen += 1;
                    assert!(Shape::Sphere.sdf(map.points[i]).abs() < 1e-6);
                }
            }
        }
        assert!(seen > 10, "sphere should cover some texels, saw {seen}");
    }

    #[test]
    fn build_surface_map_localizes_a_sphere_within_a_window() {
        // Matching volume scoring distance to the sphere surface.
        let mut grid = SparseScalarGrid::dense(unit_spec(48), 0.0);
        let coords = grid.vertex_coords().to_vec();
        let spec = grid.spec().clone();
        for (i, c) in coords.iter().enumerate() {
            let p = spec.vertex_world(*c);
            grid.values_mut()[i] = -50.0 * Shape::Sphere.sdf(p).abs();
        }
        let cfg = GenConfig::new(Shape::Sphere, 2, 64, 64, 22);
        let data = gen_synthetic(&cfg).unwrap();
        let cam = &data.cameras[0];
        // Window around ground truth excludes the second (exit) crossing.
        let gt = SurfaceMap::from_depth_map(cam, &data.gt_depth.as_ref().unwrap()[0], 4);
        let map = build_surface_map(&grid, cam, 4, 32, 1.0, Some(0.4), Some(&gt)).unwrap();
        let mut checked = 0;
        for my in 0..map.height {
            for mx in 0..map.width {
                let i = map.idx(mx, my);
                if !gt.valid[i] {
                    continue;
                }
                assert!(map.valid[i], "texel ({mx},{my}) lost the surface");
                // Compare against the analytic crossing of this texel's own
                // ray (the ground-truth map samples a nearby full-res pixel,
                // a different ray). Grazing silhouette rays localize softly,
                // so measure interior texels only.
                let (u, v) = map.texel_pixel(mx, my);
                let ray = cam.ray_through_pixel(u, v).unwrap();
                let t_close = -ray.origin.dot(&ray.dir);
                let impact = (ray.origin + ray.dir * t_close).norm();
                if impact < 0.45 {
                    let exact = Shape::Sphere.raycast(&ray).expect("interior ray hits").t;
                    let err = (map.ts[i] - exact).abs();
                    assert!(err < 3.0 * 0.4 / 32.0, "texel ({mx},{my}) err {err}");
                    assert!(Shape::Sphere.sdf(map.points[i]).abs() < 0.03);
                    checked += 1;
                }
            }
        }
        assert!(checked > 8, "too few interior texels checked: {checked}");
    }

    #[test]
    fn photoconsistency_score_is_exact_on_constant_images() {
        // Three constant-color views: every feature channel of a constant
        // image is constant, so the fused variance is analytic.
        let levels = 2u32;
        let values = [0.5f32, 0.5, 0.8];
        let cams = crate::scene::ring_cameras(3, 20.0, 1.0, 32, 32).unwrap();
        let pyramids: Vec<_> = values
            .iter()
            .map(|&v| build_pyramid(&Image::constant(32, 32, 3, v), levels).unwrap())
            .collect();
        let mut grid = SparseScalarGrid::dense(unit_spec(4), 0.0);
        init_matching_from_photoconsistency(&mut grid, &pyramids, &cams, FusionMode::Uniform, 50.0)
            .unwrap();
        // Residual features sum over levels, so each of the four non-zero
        // channels (RGB + luminance) carries levels^2 times the pixel
        // variance of (0.5, 0.5, 0.8) — at the f32 precision images store.
        let pixel_var = {
            let vs = values.map(|v| v as f64);
            let mean = vs.iter().sum::<f64>() / 3.0;
            vs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0
        };
        let want = -50.0 * 4.0 * (levels as f64).powi(2) * pixel_var;
        let center = grid.vertex_index([2, 2, 2]).unwrap() as usize;
        assert_relative_eq!(grid.values()[center], want, epsilon = 1e-9);
        // Identical views score a perfect zero.
        let same: Vec<_> = (0..3)
            .map(|_| build_pyramid(&Image::constant(32, 32, 3, 0.5), levels).unwrap())
            .collect();
        init_matching_from_photoconsistency(&mut grid, &same, &cams, FusionMode::Uniform, 50.0)
            .unwrap();
        assert_relative_eq!(grid.values()[center], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn photoconsistency_scores_peak_on_the_surface_locally() {
        // The initial field only has to rank the surface above its own
        // neighborhood along rays; the soft argmax and the matching
        // optimization do the rest. Vertices must sit close enough to the
        // surface that reprojection parallax stays under a pixel, hence the
        // fine grid.
        let cfg = GenConfig::new(Shape::Sphere, 6, 96, 96, 23);
        let data = gen_synthetic(&cfg).unwrap();
        let pyramids: Vec<_> =
            data.images.iter().map(|im| build_pyramid(im, 3).unwrap()).collect();
        let mut grid = SparseScalarGrid::dense(unit_spec(40), 0.0);
        init_matching_from_photoconsistency(
            &mut grid,
            &pyramids,
            &data.cameras,
            FusionMode::Uniform,
            50.0,
        )
        .unwrap();
        let spec = *grid.spec();
        let coords = grid.vertex_coords().to_vec();
        let (mut shell, mut near, mut far) = (Vec::new(), Vec::new(), Vec::new());
        for (i, c) in coords.iter().enumerate() {
            let v = grid.values()[i];
            if v == MISSING_VERTEX_SCORE {
                continue;
            }
            let d = Shape::Sphere.sdf(spec.vertex_world(*c)).abs();
            if d < 0.025 {
                shell.push(v);
            } else if (0.05..0.1).contains(&d) {
                near.push(v);
            } else if (0.125..0.175).contains(&d) {
                far.push(v);
            }
        }
        let median = |xs: &mut Vec<f64>| {
            xs.sort_by(f64::total_cmp);
            xs[xs.len() / 2]
        };
        let (m_shell, m_near, m_far) = (median(&mut shell), median(&mut near), median(&mut far));
        assert!(
            m_shell > m_near && m_near > m_far,
            "score should fall off the surface: shell {m_shell} near {m_near} far {m_far}"
        );
        assert!(grid.values().iter().all(|&v| v <= 0.0));
    }

    #[test]
    fn vertices_seen_by_fewer_than_two_views_get_the_sentinel() {
        let cfg = GenConfig::new(Shape::Sphere, 2, 48, 48, 24);
        let data = gen_synthetic(&cfg).unwrap();
        let pyramids: Vec<_> =
            data.images.iter().map(|im| build_pyramid(im, 2).unwrap()).collect();
        let mut grid = SparseScalarGrid::dense(unit_spec(8), 0.0);
        init_matching_from_photoconsistency(
            &mut grid,
            &pyramids,
            &data.cameras,
            FusionMode::Similarity,
            50.0,
        )
        .unwrap();
        // With a 2-view ring and a tight field of view some box corners fall
        // outside at least one frustum.
        let sentinels = grid
            .values()
            .iter()
            .filter(|&&v| v == MISSING_VERTEX_SCORE)
            .count();
        assert!(sentinels > 0, "expected some unseen vertices");
        assert!(sentinels < grid.vertex_count(), "not every vertex can be unseen");

        let one_view =
            init_matching_from_photoconsistency(
                &mut grid,
                &pyramids[..1],
                &data.cameras[..1],
                FusionMode::Uniform,
                50.0,
            );
        assert!(matches!(one_view, Err(MatchingError::TooFewViews(1))));
    }

    #[test]
    fn surface_map_pfm_round_trips() {
        let mut map = SurfaceMap::invalid(3, 2, 12, 8);
        for i in 0..6 {
            map.ts[i] = 0.5 + i as f64;
            map.valid[i] = i != 4;
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.pfm");
        map.save_t_pfm(&path).unwrap();
        let (w, h, data) = formats::load_pfm(&path).unwrap();
        assert_eq!((w, h), (3, 2));
        assert_eq!(data[0], 0.5);
        assert_eq!(data[4], 0.0);
        assert_eq!(data[5], 5.5);
    }
}
