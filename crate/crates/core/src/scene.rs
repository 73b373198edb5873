//! Synthetic calibrated scenes with analytic ground truth, plus the dataset
//! directory format shared with real inputs.
//!
//! Shapes are lambertian with a procedural 3D value-noise albedo, lit by a
//! fixed directional light, so their appearance is view-independent and the
//! photo-consistency signal is exact. Backgrounds are per-view noise: a 3D
//! point off the surface projects to unrelated colors across views, which is
//! what keeps empty space photo-inconsistent.
//!
//! The canonical scene box is [-1,1]^3. Image colors are quantized to 8 bits
//! at generation time, so a dataset save/load round trip is bit-identical.

use std::path::Path;

use nalgebra::{Point3, Vector3};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::formats::{self, FormatError};
use crate::geometry::{Camera, GeometryError, Image, Ray};

pub const SCENE_LO: Point3<f64> = Point3::new(-1.0, -1.0, -1.0);
pub const SCENE_HI: Point3<f64> = Point3::new(1.0, 1.0, 1.0);

pub const SPHERE_RADIUS: f64 = 0.6;
pub const CUBE_HALF: f64 = 0.5;
pub const PLANE_Z: f64 = 0.0;

/// two_planes layout: a large quad near the cameras and a small quad behind
/// it, placed so the back quad clears the front quad's right edge only from
/// the widest-angle camera of the 5-view arc.
pub const FRONT_Z: f64 = 0.3;
pub const FRONT_X: [f64; 2] = [-0.9, 0.78];
pub const FRONT_Y: [f64; 2] = [-0.8, 0.8];
pub const BACK_Z: f64 = -0.3;
pub const BACK_X: [f64; 2] = [0.55, 0.7];
pub const BACK_Y: [f64; 2] = [-0.5, 0.5];

const CAMERA_RADIUS: f64 = 2.5;
const LIGHT_DIR: Vector3<f64> = Vector3::new(0.4, 0.7, 0.6);

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("unknown shape {0:?} (expected sphere, cube, two_planes, or plane)")]
    UnknownShape(String),
    #[error("need at least two views, got {0}")]
    TooFewViews(u32),
    #[error("dataset has no views under {0}")]
    NoViews(String),
    #[error("view {view} is {got:?} pixels, expected {expected:?}")]
    MixedResolutions { view: usize, got: (u32, u32), expected: (u32, u32) },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Sphere,
    Cube,
    TwoPlanes,
    Plane,
}

#[derive(Debug, Clone, Copy)]
pub struct RayHit {
    pub t: f64,
    pub point: Point3<f64>,
    pub normal: Vector3<f64>,
}

impl Shape {
    pub fn parse(name: &str) -> Result<Shape, SceneError> {
        match name {
            "sphere" => Ok(Shape::Sphere),
            "cube" => Ok(Shape::Cube),
            "two_planes" => Ok(Shape::TwoPlanes),
            "plane" => Ok(Shape::Plane),
            other => Err(SceneError::UnknownShape(other.to_string())),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Shape::Sphere => "sphere",
            Shape::Cube => "cube",
            Shape::TwoPlanes => "two_planes",
            Shape::Plane => "plane",
        }
    }

    /// Signed distance for the closed shapes and the plane; the two_planes
    /// layout is an open surface, so its value is the unsigned distance to
    /// the nearer quad.
    pub fn sdf(&self, p: Point3<f64>) -> f64 {
        match self {
            Shape::Sphere => p.coords.norm() - SPHERE_RADIUS,
            Shape::Cube => {
                let q = Vector3::new(
                    p.x.abs() - CUBE_HALF,
                    p.y.abs() - CUBE_HALF,
                    p.z.abs() - CUBE_HALF,
                );
                let outside = Vector3::new(q.x.max(0.0), q.y.max(0.0), q.z.max(0.0));
                outside.norm() + q.x.max(q.y).max(q.z).min(0.0)
            }
            Shape::Plane => p.z - PLANE_Z,
            Shape::TwoPlanes => {
                let d_front = quad_distance(p, FRONT_Z, FRONT_X, FRONT_Y);
                let d_back = quad_distance(p, BACK_Z, BACK_X, BACK_Y);
                d_front.min(d_back)
            }
        }
    }

    /// First intersection within the ray's [near, far] range.
    pub fn raycast(&self, ray: &Ray) -> Option<RayHit> {
        match self {
            Shape::Sphere => {
                // |o + t d|^2 = r^2 with unit d.
                let b = ray.origin.dot(&ray.dir);
                let c = ray.origin.norm_squared() - SPHERE_RADIUS * SPHERE_RADIUS;
                let disc = b * b - c;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                let t = [-b - sq, -b + sq]
                    .into_iter()
                    .find(|&t| t >= ray.near && t <= ray.far)?;
                let point = Point3::from(ray.at(t));
                Some(RayHit { t, point, normal: point.coords / SPHERE_RADIUS })
            }
            Shape::Cube => {
                let mut clipped = *ray;
                if !clipped.clip_to_box(Vector3::repeat(-CUBE_HALF), Vector3::repeat(CUBE_HALF)) {
                    return None;
                }
                let t = clipped.near;
                if t < ray.near || t > ray.far {
                    return None;
                }
                let point = Point3::from(ray.at(t));
                // Entry face = axis where the scaled coordinate is extremal.
                let mut axis = 0;
                let mut best = 0.0;
                for a in 0..3 {
                    let s = point[a].abs() / CUBE_HALF;
                    if s > best {
                        best = s;
                        axis = a;
                    }
                }
                let mut normal = Vector3::zeros();
                normal[axis] = point[axis].signum();
                Some(RayHit { t, point, normal })
            }
            Shape::Plane => {
                let hit = quad_raycast(ray, PLANE_Z, [SCENE_LO.x, SCENE_HI.x], [
                    SCENE_LO.y, SCENE_HI.y,
                ])?;
                Some(hit)
            }
            Shape::TwoPlanes => {
                let front = quad_raycast(ray, FRONT_Z, FRONT_X, FRONT_Y);
                let back = quad_raycast(ray, BACK_Z, BACK_X, BACK_Y);
                match (front, back) {
                    (Some(f), Some(b)) => Some(if f.t <= b.t { f } else { b }),
                    (f, b) => f.or(b),
                }
            }
        }
    }

    /// Area-weighted surface samples, deterministic under the given rng.
    pub fn surface_points(&self, count: usize, rng: &mut ChaCha8Rng) -> Vec<Point3<f64>> {
        let mut out = Vec::with_capacity(count);
        match self {
            Shape::Sphere => {
                for _ in 0..count {
                    // Uniform on the sphere via z + azimuth.
                    let z: f64 = rng.gen_range(-1.0..1.0);
                    let az = rng.gen_range(0.0..std::f64::consts::TAU);
                    let r = (1.0 - z * z).sqrt();
                    out.push(Point3::new(
                        SPHERE_RADIUS * r * az.cos(),
                        SPHERE_RADIUS * r * az.sin(),
                        SPHERE_RADIUS * z,
                    ));
                }
            }
            Shape::Cube => {
                for _ in 0..count {
                    // All 6 faces have equal area.
                    let face = rng.gen_range(0..6u32);
                    let (axis, sign) = ((face / 2) as usize, if face % 2 == 0 { 1.0 } else { -1.0 });
                    let u = rng.gen_range(-CUBE_HALF..CUBE_HALF);
                    let v = rng.gen_range(-CUBE_HALF..CUBE_HALF);
                    let mut p = Point3::origin();
                    p[axis] = sign * CUBE_HALF;
                    p[(axis + 1) % 3] = u;
                    p[(axis + 2) % 3] = v;
                    out.push(p);
                }
            }
            Shape::Plane => {
                for _ in 0..count {
                    out.push(Point3::new(
                        rng.gen_range(SCENE_LO.x..SCENE_HI.x),
                        rng.gen_range(SCENE_LO.y..SCENE_HI.y),
                        PLANE_Z,
                    ));
                }
            }
            Shape::TwoPlanes => {
                let area_front =
                    (FRONT_X[1] - FRONT_X[0]) * (FRONT_Y[1] - FRONT_Y[0]);
                let area_back = (BACK_X[1] - BACK_X[0]) * (BACK_Y[1] - BACK_Y[0]);
                let p_front = area_front / (area_front + area_back);
                for _ in 0..count {
                    let (z, xr, yr) = if rng.gen_range(0.0..1.0) < p_front {
                        (FRONT_Z, FRONT_X, FRONT_Y)
                    } else {
                        (BACK_Z, BACK_X, BACK_Y)
                    };
                    out.push(Point3::new(
                        rng.gen_range(xr[0]..xr[1]),
                        rng.gen_range(yr[0]..yr[1]),
                        z,
                    ));
                }
            }
        }
        out
    }
}

fn quad_distance(p: Point3<f64>, z: f64, xr: [f64; 2], yr: [f64; 2]) -> f64 {
    let dx = (xr[0] - p.x).max(0.0).max(p.x - xr[1]);
    let dy = (yr[0] - p.y).max(0.0).max(p.y - yr[1]);
    let dz = p.z - z;
    (dx * dx + dy * dy + dz * dz).sqrt()
}

fn quad_raycast(ray: &Ray, z: f64, xr: [f64; 2], yr: [f64; 2]) -> Option<RayHit> {
    if ray.dir.z.abs() < 1e-12 {
        return None;
    }
    let t = (z - ray.origin.z) / ray.dir.z;
    if t < ray.near || t > ray.far {
        return None;
    }
    let point = Point3::from(ray.at(t));
    if point.x < xr[0] || point.x > xr[1] || point.y < yr[0] || point.y > yr[1] {
        return None;
    }
    let normal = Vector3::new(0.0, 0.0, -ray.dir.z.signum());
    Some(RayHit { t, point, normal })
}

// ---------------------------------------------------------------------------
// Procedural texture and backgrounds

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

fn lattice_value(ix: i64, iy: i64, iz: i64, seed: u64) -> f64 {
    let h = splitmix(
        seed ^ (ix as u64).wrapping_mul(0x8da6b343)
            ^ (iy as u64).wrapping_mul(0xd8163841)
            ^ (iz as u64).wrapping_mul(0xcb1ab31f),
    );
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn fade(t: f64) -> f64 {
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

/// Smooth 3D value noise in [0,1].
fn value_noise(p: Point3<f64>, seed: u64) -> f64 {
    let (fx, fy, fz) = (p.x.floor(), p.y.floor(), p.z.floor());
    let (ix, iy, iz) = (fx as i64, fy as i64, fz as i64);
    let (tx, ty, tz) = (fade(p.x - fx), fade(p.y - fy), fade(p.z - fz));
    let mut acc = 0.0;
    for (dx, wx) in [(0, 1.0 - tx), (1, tx)] {
        for (dy, wy) in [(0, 1.0 - ty), (1, ty)] {
            for (dz, wz) in [(0, 1.0 - tz), (1, tz)] {
                acc += wx * wy * wz * lattice_value(ix + dx, iy + dy, iz + dz, seed);
            }
        }
    }
    acc
}

/// Two-octave noise albedo per channel, kept inside [0.15, 0.95] so lighting
/// never clips it.
pub fn albedo(p: Point3<f64>, texture_seed: u64) -> [f64; 3] {
    let mut out = [0.0; 3];
    for (c, slot) in out.iter_mut().enumerate() {
        let s = texture_seed.wrapping_add(c as u64).wrapping_mul(0x2545f4914f6cdd1d);
        let n = 0.65 * value_noise(Point3::from(p.coords * 3.0), s)
            + 0.35 * value_noise(Point3::from(p.coords * 7.0), s ^ 0xabcd);
        *slot = 0.15 + 0.8 * n;
    }
    out
}

fn shade(p: Point3<f64>, normal: Vector3<f64>, texture_seed: u64) -> [f32; 3] {
    let l = LIGHT_DIR.normalize();
    let lambert = 0.35 + 0.65 * normal.dot(&l).abs();
    let a = albedo(p, texture_seed);
    [0, 1, 2].map(|c| (a[c] * lambert) as f32)
}

/// Per-view background noise: uncorrelated across views so off-surface
/// points are photo-inconsistent.
fn background(view: usize, x: u32, y: u32, seed: u64) -> [f32; 3] {
    let base = splitmix(seed ^ 0xb6e5_0000 ^ ((view as u64) << 40) ^ ((x as u64) << 20) ^ y as u64);
    [0, 1, 2].map(|c| {
        let h = splitmix(base ^ (c as u64).wrapping_mul(0x9e37));
        0.05 + 0.9 * ((h >> 11) as f32 / (1u64 << 53) as f32)
    })
}

// ---------------------------------------------------------------------------
// Cameras

/// `n` cameras on a circle of the given elevation looking at the origin,
/// z-up, azimuths 2πk/n.
pub fn ring_cameras(
    n: u32,
    elevation_deg: f64,
    focal_factor: f64,
    width: u32,
    height: u32,
) -> Result<Vec<Camera>, GeometryError> {
    let el = elevation_deg.to_radians();
    let (near, far) = (CAMERA_RADIUS - 1.8, CAMERA_RADIUS + 1.8);
    (0..n)
        .map(|k| {
            let az = std::f64::consts::TAU * k as f64 / n as f64;
            let pos = Vector3::new(
                CAMERA_RADIUS * az.cos() * el.cos(),
                CAMERA_RADIUS * az.sin() * el.cos(),
                CAMERA_RADIUS * el.sin(),
            );
            Camera::look_at(
                pos,
                Vector3::zeros(),
                Vector3::z(),
                focal_factor * width as f64,
                width,
                height,
                near,
                far,
            )
        })
        .collect()
}

/// Angles of an `n`-point arc over [-span/2, +span/2], ordered center-out
/// (0 or the innermost pair first, widest angles last, negative before
/// positive at equal magnitude). Prefixes of the list are themselves
/// narrower center-heavy arcs, which is what makes view-count comparisons
/// on the same scene geometrically nested.
pub fn arc_angles_deg(n: u32, span_deg: f64) -> Vec<f64> {
    let mut angles: Vec<f64> = (0..n)
        .map(|k| {
            if n == 1 {
                0.0
            } else {
                -span_deg / 2.0 + span_deg * k as f64 / (n - 1) as f64
            }
        })
        .collect();
    angles.sort_by(|a, b| {
        (a.abs(), *a).partial_cmp(&(b.abs(), *b)).expect("angles are finite")
    });
    angles
}

/// Cameras on an overhead arc in the x-z plane looking at the origin, y-up.
pub fn arc_cameras(
    n: u32,
    span_deg: f64,
    focal_factor: f64,
    width: u32,
    height: u32,
) -> Result<Vec<Camera>, GeometryError> {
    let (near, far) = (CAMERA_RADIUS - 1.8, CAMERA_RADIUS + 1.8);
    arc_angles_deg(n, span_deg)
        .into_iter()
        .map(|deg| {
            let phi = deg.to_radians();
            let pos = Vector3::new(CAMERA_RADIUS * phi.sin(), 0.0, CAMERA_RADIUS * phi.cos());
            Camera::look_at(
                pos,
                Vector3::zeros(),
                Vector3::y(),
                focal_factor * width as f64,
                width,
                height,
                near,
                far,
            )
        })
        .collect()
}

/// Per-shape camera layout: closed shapes get a ring, the plane scenes get
/// the overhead arcs their visibility constructions assume.
pub fn default_cameras(
    shape: Shape,
    n: u32,
    width: u32,
    height: u32,
) -> Result<Vec<Camera>, GeometryError> {
    match shape {
        Shape::Sphere | Shape::Cube => ring_cameras(n, 20.0, 1.0, width, height),
        Shape::TwoPlanes => arc_cameras(n, 80.0, 0.95, width, height),
        Shape::Plane => arc_cameras(n, 50.0, 0.7, width, height),
    }
}

// ---------------------------------------------------------------------------
// Dataset

/// One view set with scene bounds and the optional ground-truth extras a
/// synthetic generator emits.
#[derive(Debug, Clone)]
pub struct SceneDataset {
    pub images: Vec<Image>,
    pub cameras: Vec<Camera>,
    pub bbox_lo: Point3<f64>,
    pub bbox_hi: Point3<f64>,
    /// Per-view ray-parameter maps at image resolution; 0 marks a miss.
    pub gt_depth: Option<Vec<Vec<f32>>>,
    pub gt_points: Option<Vec<Point3<f64>>>,
    pub pseudo_points: Option<Vec<Point3<f64>>>,
}

impl SceneDataset {
    pub fn view_count(&self) -> usize {
        self.images.len()
    }

    pub fn resolution(&self) -> (u32, u32) {
        (self.images[0].width, self.images[0].height)
    }

    pub fn extent(&self) -> f64 {
        (0..3).map(|a| self.bbox_hi[a] - self.bbox_lo[a]).fold(0.0, f64::max)
    }

    /// Truncates to the first `n` views (camera layouts order views so that
    /// prefixes are sensible sub-arcs/sub-rings).
    pub fn take_views(mut self, n: usize) -> Self {
        self.images.truncate(n);
        self.cameras.truncate(n);
        if let Some(d) = &mut self.gt_depth {
            d.truncate(n);
        }
        self
    }

    pub fn save(&self, dir: &Path) -> Result<(), SceneError> {
        std::fs::create_dir_all(dir.join("images"))?;
        std::fs::create_dir_all(dir.join("cameras"))?;
        for (i, (img, cam)) in self.images.iter().zip(&self.cameras).enumerate() {
            formats::save_png_rgb8(&dir.join(format!("images/{i:03}.png")), img)?;
            formats::save_camera_txt(&dir.join(format!("cameras/{i:03}.txt")), cam)?;
        }
        formats::write_atomic(&dir.join("bbox.txt"), |f| {
            use std::io::Write;
            writeln!(
                f,
                "{} {} {} {} {} {}",
                self.bbox_lo.x,
                self.bbox_lo.y,
                self.bbox_lo.z,
                self.bbox_hi.x,
                self.bbox_hi.y,
                self.bbox_hi.z
            )
        })?;
        if let Some(depths) = &self.gt_depth {
            std::fs::create_dir_all(dir.join("gt_depth"))?;
            for (i, d) in depths.iter().enumerate() {
                let img = &self.images[i];
                formats::save_pfm(
                    &dir.join(format!("gt_depth/{i:03}.pfm")),
                    img.width,
                    img.height,
                    d,
                )?;
            }
        }
        if let Some(points) = &self.gt_points {
            formats::save_ply(&dir.join("gt_points.ply"), points, &[])?;
        }
        if let Some(points) = &self.pseudo_points {
            formats::save_ply(&dir.join("pseudo_points.ply"), points, &[])?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<SceneDataset, SceneError> {
        let mut images = Vec::new();
        let mut cameras = Vec::new();
        loop {
            let img_path = dir.join(format!("images/{:03}.png", images.len()));
            let cam_path = dir.join(format!("cameras/{:03}.txt", images.len()));
            if !img_path.exists() || !cam_path.exists() {
                break;
            }
            let img = formats::load_png_rgb8(&img_path)?;
            let cam = formats::load_camera_txt(&cam_path, img.width, img.height)?;
            images.push(img);
            cameras.push(cam);
        }
        if images.is_empty() {
            return Err(SceneError::NoViews(dir.display().to_string()));
        }
        if images.len() < 2 {
            return Err(SceneError::TooFewViews(images.len() as u32));
        }
        let expected = (images[0].width, images[0].height);
        for (view, img) in images.iter().enumerate() {
            if (img.width, img.height) != expected {
                return Err(SceneError::MixedResolutions {
                    view,
                    got: (img.width, img.height),
                    expected,
                });
            }
        }

        let bbox_text = std::fs::read_to_string(dir.join("bbox.txt"))?;
        let nums: Vec<f64> = bbox_text
            .split_whitespace()
            .map(|w| {
                w.parse::<f64>()
                    .map_err(|_| FormatError::Parse(format!("bad bbox entry {w:?}")))
            })
            .collect::<Result<_, _>>()?;
        if nums.len() != 6 {
            return Err(FormatError::Parse(format!(
                "bbox.txt needs 6 numbers, got {}",
                nums.len()
            ))
            .into());
        }
        let bbox_lo = Point3::new(nums[0], nums[1], nums[2]);
        let bbox_hi = Point3::new(nums[3], nums[4], nums[5]);

        let mut gt_depth = None;
        if dir.join("gt_depth/000.pfm").exists() {
            let mut maps = Vec::with_capacity(images.len());
            for i in 0..images.len() {
                let (w, h, data) = formats::load_pfm(&dir.join(format!("gt_depth/{i:03}.pfm")))?;
                if (w, h) != expected {
                    return Err(SceneError::MixedResolutions {
                        view: i,
                        got: (w, h),
                        expected,
                    });
                }
                maps.push(data);
            }
            gt_depth = Some(maps);
        }
        let gt_points = if dir.join("gt_points.ply").exists() {
            Some(formats::load_ply(&dir.join("gt_points.ply"))?.0)
        } else {
            None
        };
        let pseudo_points = if dir.join("pseudo_points.ply").exists() {
            Some(formats::load_ply(&dir.join("pseudo_points.ply"))?.0)
        } else {
            None
        };
        Ok(SceneDataset { images, cameras, bbox_lo, bbox_hi, gt_depth, gt_points, pseudo_points })
    }
}

/// Knobs of the synthetic generator.
#[derive(Debug, Clone)]
pub struct GenConfig {
    pub shape: Shape,
    pub views: u32,
    pub width: u32,
    pub height: u32,
    pub seed: u64,
    /// Ground-truth surface samples written to gt_points.ply.
    pub gt_point_count: usize,
    /// Noisy surface samples written to pseudo_points.ply.
    pub pseudo_count: usize,
    /// Pseudo-point noise, as a fraction of the scene extent.
    pub pseudo_noise: f64,
}

impl GenConfig {
    pub fn new(shape: Shape, views: u32, width: u32, height: u32, seed: u64) -> Self {
        Self {
            shape,
            views,
            width,
            height,
            seed,
            gt_point_count: 20_000,
            pseudo_count: 4_000,
            pseudo_noise: 0.003,
        }
    }
}

/// Renders the shape from `n` cameras by exact analytic ray casting.
pub fn gen_synthetic(cfg: &GenConfig) -> Result<SceneDataset, SceneError> {
    if cfg.views < 2 {
        return Err(SceneError::TooFewViews(cfg.views));
    }
    let cameras = default_cameras(cfg.shape, cfg.views, cfg.width, cfg.height)?;
    let texture_seed = splitmix(cfg.seed ^ 0x7e57);

    let mut images = Vec::with_capacity(cameras.len());
    let mut depths = Vec::with_capacity(cameras.len());
    for (view, cam) in cameras.iter().enumerate() {
        let rows: Vec<(Vec<f32>, Vec<f32>)> = (0..cfg.height)
            .into_par_iter()
            .map(|y| {
                let mut color_row = Vec::with_capacity(cfg.width as usize * 3);
                let mut depth_row = Vec::with_capacity(cfg.width as usize);
                for x in 0..cfg.width {
                    let ray = cam
                        .ray_through_pixel(x as f64, y as f64)
                        .expect("pixel inside image");
                    match cfg.shape.raycast(&ray) {
                        Some(hit) => {
                            let c = shade(hit.point, hit.normal, texture_seed);
                            color_row.extend(c.map(formats::quantize_unit));
                            depth_row.push(hit.t as f32);
                        }
                        None => {
                            let c = background(view, x, y, cfg.seed);
                            color_row.extend(c.map(formats::quantize_unit));
                            depth_row.push(0.0);
                        }
                    }
                }
                (color_row, depth_row)
            })
            .collect();
        let mut img = Image::new(cfg.width, cfg.height, 3)?;
        let mut depth = Vec::with_capacity((cfg.width * cfg.height) as usize);
        for (y, (color_row, depth_row)) in rows.into_iter().enumerate() {
            let base = y * cfg.width as usize * 3;
            img.data[base..base + color_row.len()].copy_from_slice(&color_row);
            depth.extend(depth_row);
        }
        images.push(img);
        depths.push(depth);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x90705);
    let gt_points = cfg.shape.surface_points(cfg.gt_point_count, &mut rng);
    let noise = cfg.pseudo_noise * (SCENE_HI.x - SCENE_LO.x);
    let pseudo_points: Vec<Point3<f64>> = cfg
        .shape
        .surface_points(cfg.pseudo_count, &mut rng)
        .into_iter()
        .map(|p| {
            let jitter = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ) * noise;
            let q = p + jitter;
            Point3::new(
                q.x.clamp(SCENE_LO.x, SCENE_HI.x),
                q.y.clamp(SCENE_LO.y, SCENE_HI.y),
                q.z.clamp(SCENE_LO.z, SCENE_HI.z),
            )
        })
        .collect();

    Ok(SceneDataset {
        images,
        cameras,
        bbox_lo: SCENE_LO,
        bbox_hi: SCENE_HI,
        gt_depth: Some(depths),
        gt_points: Some(gt_points),
        pseudo_points: Some(pseudo_points),
    })
}
