//! Pinhole cameras, rays, and bilinear image access.
//!
//! World points map to pixels through `q = pi(K * R^T * (v - t))` where `R`
//! rotates camera axes into world axes and `t` is the camera center. Pixel
//! coordinate `(u, v)` addresses the *center* of texel `(u, v)`; bilinear
//! lookups clamp their 4-neighborhood at image borders.

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

/// Points closer than this along the optical axis count as behind the camera.
pub const BEHIND_EPS: f64 = 1e-9;

/// Maximum allowed deviation of `R^T R` from identity before a rotation is
/// rejected instead of re-orthonormalized.
pub const ORTHO_TOL: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("intrinsics must be upper-triangular with positive diagonal, got {0:?}")]
    BadIntrinsics(Box<Matrix3<f64>>),
    #[error("rotation drift {drift:.3e} exceeds tolerance {ORTHO_TOL:.1e}")]
    NotOrthonormal { drift: f64 },
    #[error("rotation determinant {0:.6} is not positive (mirrored frame)")]
    MirroredRotation(f64),
    #[error("pixel ({u}, {v}) outside image {width}x{height}")]
    PixelOutOfBounds { u: f64, v: f64, width: u32, height: u32 },
    #[error("depth bounds must satisfy 0 < near < far, got [{near}, {far}]")]
    BadDepthBounds { near: f64, far: f64 },
    #[error("image dimensions {width}x{height}x{channels} are degenerate")]
    BadImageShape { width: u32, height: u32, channels: u32 },
}

/// Calibrated pinhole camera. `r` maps camera coordinates to world
/// coordinates (its columns are the camera axes in world space) and `t` is
/// the camera center in world space.
#[derive(Debug, Clone)]
pub struct Camera {
    pub k: Matrix3<f64>,
    pub r: Matrix3<f64>,
    pub t: Vector3<f64>,
    pub width: u32,
    pub height: u32,
    /// Scene depth bounds along rays, in ray-parameter units.
    pub near: f64,
    pub far: f64,
}

/// Result of projecting a world point.
#[derive(Debug, Clone, Copy)]
pub struct Projection {
    /// Pixel coordinates; meaningful only when `behind` is false.
    pub pixel: [f64; 2],
    /// Depth along the optical axis (third camera-frame coordinate).
    pub depth: f64,
    /// True when the point is in front of the camera and the pixel lies in
    /// `[0, width) x [0, height)`.
    pub in_image: bool,
    /// True when depth <= BEHIND_EPS. Flagged, never an error.
    pub behind: bool,
}

/// Half-open ray with a unit direction and traversal bounds.
#[derive(Debug, Clone, Copy)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub dir: Vector3<f64>,
    pub near: f64,
    pub far: f64,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vector3<f64> {
        self.origin + self.dir * t
    }

    /// Restrict `[near, far]` to the slab intersection with an axis-aligned
    /// box. Returns false when the ray misses the box entirely.
    pub fn clip_to_box(&mut self, lo: Vector3<f64>, hi: Vector3<f64>) -> bool {
        let mut t0 = self.near;
        let mut t1 = self.far;
        for a in 0..3 {
            let inv = 1.0 / self.dir[a];
            let (mut ta, mut tb) = ((lo[a] - self.origin[a]) * inv, (hi[a] - self.origin[a]) * inv);
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
        }
        if t0 < t1 {
            self.near = t0;
            self.far = t1;
            true
        } else {
            false
        }
    }
}

impl Camera {
    /// Validates intrinsics and depth bounds, and re-orthonormalizes `r` when
    /// its drift from orthonormality is below [`ORTHO_TOL`]. Mirrored frames
    /// (negative determinant) are rejected.
    pub fn new(
        k: Matrix3<f64>,
        r: Matrix3<f64>,
        t: Vector3<f64>,
        width: u32,
        height: u32,
        near: f64,
        far: f64,
    ) -> Result<Self, GeometryError> {
        let lower_ok = k[(1, 0)] == 0.0 && k[(2, 0)] == 0.0 && k[(2, 1)] == 0.0;
        if !lower_ok || k[(0, 0)] <= 0.0 || k[(1, 1)] <= 0.0 || k[(2, 2)] <= 0.0 {
            return Err(GeometryError::BadIntrinsics(Box::new(k)));
        }
        if width == 0 || height == 0 {
            return Err(GeometryError::BadImageShape { width, height, channels: 0 });
        }
        if !(0.0 < near && near < far) {
            return Err(GeometryError::BadDepthBounds { near, far });
        }
        let gram = r.transpose() * r;
        let drift = (gram - Matrix3::identity()).abs().max();
        if drift > ORTHO_TOL {
            return Err(GeometryError::NotOrthonormal { drift });
        }
        if r.determinant() <= 0.0 {
            return Err(GeometryError::MirroredRotation(r.determinant()));
        }
        let r = reorthonormalize(&r);
        Ok(Camera { k, r, t, width, height, near, far })
    }

    /// Camera at `pos` looking at `target`, with square pixels of focal
    /// length `focal` (in pixels) and the principal point at the image
    /// center.
    pub fn look_at(
        pos: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        focal: f64,
        width: u32,
        height: u32,
        near: f64,
        far: f64,
    ) -> Result<Self, GeometryError> {
        let z = (target - pos).normalize();
        let x = up.cross(&z).normalize();
        let y = z.cross(&x);
        let r = Matrix3::from_columns(&[x, y, z]);
        let k = Matrix3::new(
            focal,
            0.0,
            0.5 * (width as f64) - 0.5,
            0.0,
            focal,
            0.5 * (height as f64) - 0.5,
            0.0,
            0.0,
            1.0,
        );
        Camera::new(k, r, pos, width, height, near, far)
    }

    pub fn project(&self, v: &Vector3<f64>) -> Projection {
        let cam = self.r.transpose() * (v - self.t);
        let depth = cam.z;
        let behind = depth <= BEHIND_EPS;
        if behind {
            return Projection { pixel: [f64::NAN, f64::NAN], depth, in_image: false, behind };
        }
        let m = self.k * cam;
        let pixel = [m.x / m.z, m.y / m.z];
        let in_image = pixel[0] >= 0.0
            && pixel[0] < self.width as f64
            && pixel[1] >= 0.0
            && pixel[1] < self.height as f64;
        Projection { pixel, depth, in_image, behind }
    }

    /// World-space ray through continuous pixel coordinates `(u, v)`, with a
    /// unit direction and bounds copied from the camera's depth range.
    /// Accepts any coordinate within the texel span `[-0.5, dim - 0.5]`.
    pub fn ray_through_pixel(&self, u: f64, v: f64) -> Result<Ray, GeometryError> {
        let (w, h) = (self.width as f64, self.height as f64);
        if !(u >= -0.5 && u <= w - 0.5 && v >= -0.5 && v <= h - 0.5) {
            return Err(GeometryError::PixelOutOfBounds {
                u,
                v,
                width: self.width,
                height: self.height,
            });
        }
        // Back-substitution through the upper-triangular intrinsics.
        let dz = 1.0 / self.k[(2, 2)];
        let dy = (v - self.k[(1, 2)] * dz) / self.k[(1, 1)];
        let dx = (u - self.k[(0, 1)] * dy - self.k[(0, 2)] * dz) / self.k[(0, 0)];
        let dir = (self.r * Vector3::new(dx, dy, dz)).normalize();
        Ok(Ray { origin: self.t, dir, near: self.near, far: self.far })
    }

    /// Jacobian of the pixel coordinates with respect to the world point, for
    /// a point strictly in front of the camera. Rows are d(pixel)/d(world).
    pub fn project_jacobian(&self, v: &Vector3<f64>) -> Option<[Vector3<f64>; 2]> {
        let cam = self.r.transpose() * (v - self.t);
        if cam.z <= BEHIND_EPS {
            return None;
        }
        let m = self.k * cam;
        let inv_z = 1.0 / m.z;
        // d(pixel)/dm, then dm/dv = K * R^T.
        let kr = self.k * self.r.transpose();
        let row0 = inv_z * kr.row(0) - (m.x * inv_z * inv_z) * kr.row(2);
        let row1 = inv_z * kr.row(1) - (m.y * inv_z * inv_z) * kr.row(2);
        Some([row0.transpose(), row1.transpose()])
    }
}

fn reorthonormalize(r: &Matrix3<f64>) -> Matrix3<f64> {
    let mut x: Vector3<f64> = r.column(0).into();
    x.normalize_mut();
    let mut y: Vector3<f64> = r.column(1).into();
    y -= x * x.dot(&y);
    y.normalize_mut();
    let z = x.cross(&y);
    Matrix3::from_columns(&[x, y, z])
}

/// Row-major, channel-interleaved float image with values typically in
/// `[0, 1]`.
#[derive(Debug, Clone)]
pub struct Image {
    pub width: u32,
    pub height: u32,
    pub channels: u32,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: u32, height: u32, channels: u32) -> Result<Self, GeometryError> {
        if width == 0 || height == 0 || channels == 0 {
            return Err(GeometryError::BadImageShape { width, height, channels });
        }
        let len = width as usize * height as usize * channels as usize;
        Ok(Image { width, height, channels, data: vec![0.0; len] })
    }

    pub fn constant(width: u32, height: u32, channels: u32, value: f32) -> Self {
        let mut img = Image::new(width, height, channels).expect("non-degenerate shape");
        img.data.fill(value);
        img
    }

    #[inline]
    fn idx(&self, x: u32, y: u32) -> usize {
        (y as usize * self.width as usize + x as usize) * self.channels as usize
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32, c: u32) -> f32 {
        self.data[self.idx(x, y) + c as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, c: u32, value: f32) {
        let i = self.idx(x, y) + c as usize;
        self.data[i] = value;
    }

    #[inline]
    pub fn texel(&self, x: u32, y: u32) -> &[f32] {
        let i = self.idx(x, y);
        &self.data[i..i + self.channels as usize]
    }

    /// True when `(u, v)` lies within the convex hull of texel centers, the
    /// region where bilinear interpolation is well defined.
    #[inline]
    pub fn in_bilinear_bounds(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && u <= (self.width - 1) as f64 && v >= 0.0 && v <= (self.height - 1) as f64
    }

    /// Bilinear sample of all channels at continuous `(u, v)`. Writes one
    /// value per channel into `out` and returns the in-bounds flag;
    /// out-of-bounds samples leave `out` zeroed.
    pub fn sample_bilinear_into(&self, u: f64, v: f64, out: &mut [f64]) -> bool {
        assert_eq!(out.len(), self.channels as usize);
        out.fill(0.0);
        if !self.in_bilinear_bounds(u, v) {
            return false;
        }
        let (x0, y0, fx, fy) = self.bilinear_cell(u, v);
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let w00 = (1.0 - fx) * (1.0 - fy);
        let w10 = fx * (1.0 - fy);
        let w01 = (1.0 - fx) * fy;
        let w11 = fx * fy;
        let (p00, p10) = (self.texel(x0, y0), self.texel(x1, y0));
        let (p01, p11) = (self.texel(x0, y1), self.texel(x1, y1));
        for c in 0..self.channels as usize {
            out[c] = w00 * p00[c] as f64
                + w10 * p10[c] as f64
                + w01 * p01[c] as f64
                + w11 * p11[c] as f64;
        }
        true
    }

    pub fn sample_bilinear(&self, u: f64, v: f64) -> (Vec<f64>, bool) {
        let mut out = vec![0.0; self.channels as usize];
        let ok = self.sample_bilinear_into(u, v, &mut out);
        (out, ok)
    }

    /// Derivative of the bilinear sample with respect to `(u, v)`, one pair
    /// per channel. Matches the piecewise-linear interpolant away from cell
    /// boundaries; out-of-bounds returns false with zeroed outputs.
    pub fn sample_bilinear_grad_into(
        &self,
        u: f64,
        v: f64,
        du: &mut [f64],
        dv: &mut [f64],
    ) -> bool {
        assert_eq!(du.len(), self.channels as usize);
        assert_eq!(dv.len(), self.channels as usize);
        du.fill(0.0);
        dv.fill(0.0);
        if !self.in_bilinear_bounds(u, v) {
            return false;
        }
        let (x0, y0, fx, fy) = self.bilinear_cell(u, v);
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let (p00, p10) = (self.texel(x0, y0), self.texel(x1, y0));
        let (p01, p11) = (self.texel(x0, y1), self.texel(x1, y1));
        for c in 0..self.channels as usize {
            let (a, b) = (p00[c] as f64, p10[c] as f64);
            let (d, e) = (p01[c] as f64, p11[c] as f64);
            du[c] = (1.0 - fy) * (b - a) + fy * (e - d);
            dv[c] = (1.0 - fx) * (d - a) + fx * (e - b);
        }
        true
    }

    pub fn sample_bilinear_grad(&self, u: f64, v: f64) -> (Vec<f64>, Vec<f64>, bool) {
        let mut du = vec![0.0; self.channels as usize];
        let mut dv = vec![0.0; self.channels as usize];
        let ok = self.sample_bilinear_grad_into(u, v, &mut du, &mut dv);
        (du, dv, ok)
    }

    #[inline]
    fn bilinear_cell(&self, u: f64, v: f64) -> (u32, u32, f64, f64) {
        let x0 = (u.floor() as i64).clamp(0, (self.width - 1) as i64) as u32;
        let y0 = (v.floor() as i64).clamp(0, (self.height - 1) as i64) as u32;
        (x0, y0, u - x0 as f64, v - y0 as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_camera(rng: &mut ChaCha8Rng) -> Camera {
        let pos = Vector3::new(
            rng.gen_range(-3.0..3.0),
            rng.gen_range(-3.0..3.0),
            rng.gen_range(2.0..4.0),
        );
        let target = Vector3::new(rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), 0.0);
        let focal = rng.gen_range(200.0..500.0);
        Camera::look_at(pos, target, Vector3::y(), focal, 320, 240, 0.1, 10.0).unwrap()
    }

    #[test]
    fn identity_camera_projects_axis_point_to_origin_pixel() {
        let cam = Camera::new(
            Matrix3::identity(),
            Matrix3::identity(),
            Vector3::zeros(),
            4,
            4,
            0.1,
            10.0,
        )
        .unwrap();
        let p = cam.project(&Vector3::new(0.0, 0.0, 1.0));
        assert_eq!(p.pixel, [0.0, 0.0]);
        assert_eq!(p.depth, 1.0);
        assert!(p.in_image && !p.behind);
    }

    #[test]
    fn behind_camera_is_flagged_not_error() {
        let cam = Camera::new(
            Matrix3::identity(),
            Matrix3::identity(),
            Vector3::zeros(),
            4,
            4,
            0.1,
            10.0,
        )
        .unwrap();
        let p = cam.project(&Vector3::new(0.0, 0.0, -1.0));
        assert!(p.behind && !p.in_image);
    }

    #[test]
    fn ray_pixel_round_trip_many_cameras() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut worst: f64 = 0.0;
        for _ in 0..1000 {
            let cam = random_camera(&mut rng);
            let u = rng.gen_range(0.0..cam.width as f64 - 1.0);
            let v = rng.gen_range(0.0..cam.height as f64 - 1.0);
            let ray = cam.ray_through_pixel(u, v).unwrap();
            let s = rng.gen_range(0.5..5.0);
            let p = cam.project(&ray.at(s));
            assert!(!p.behind);
            worst = worst.max((p.pixel[0] - u).abs()).max((p.pixel[1] - v).abs());
        }
        assert!(worst < 1e-9, "round-trip error {worst}");
    }

    #[test]
    fn ray_direction_is_unit_and_bounds_copied() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cam = random_camera(&mut rng);
        let ray = cam.ray_through_pixel(10.0, 20.0).unwrap();
        assert!((ray.dir.norm() - 1.0).abs() < 1e-12);
        assert_eq!((ray.near, ray.far), (cam.near, cam.far));
    }

    #[test]
    fn out_of_bounds_pixel_is_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let cam = random_camera(&mut rng);
        assert!(cam.ray_through_pixel(-1.0, 0.0).is_err());
        assert!(cam.ray_through_pixel(0.0, cam.height as f64).is_err());
    }

    #[test]
    fn mirrored_rotation_rejected_and_drift_tolerated() {
        let mut r = Matrix3::<f64>::identity();
        r[(0, 0)] = -1.0;
        let res = Camera::new(Matrix3::identity(), r, Vector3::zeros(), 4, 4, 0.1, 1.0);
        assert!(matches!(res, Err(GeometryError::MirroredRotation(_))));

        let mut r = Matrix3::<f64>::identity();
        r[(0, 1)] = 5e-5; // within tolerance, must be re-orthonormalized
        let cam = Camera::new(Matrix3::identity(), r, Vector3::zeros(), 4, 4, 0.1, 1.0).unwrap();
        let gram = cam.r.transpose() * cam.r;
        assert!((gram - Matrix3::identity()).abs().max() < 1e-12);

        let mut r = Matrix3::<f64>::identity();
        r[(0, 1)] = 5e-3; // beyond tolerance
        assert!(Camera::new(Matrix3::identity(), r, Vector3::zeros(), 4, 4, 0.1, 1.0).is_err());
    }

    #[test]
    fn bilinear_hits_stored_values_at_integer_pixels() {
        let mut img = Image::new(4, 3, 2).unwrap();
        for y in 0..3 {
            for x in 0..4 {
                img.set(x, y, 0, (x + 10 * y) as f32);
                img.set(x, y, 1, 0.5 - x as f32);
            }
        }
        for y in 0..3 {
            for x in 0..4 {
                let (s, ok) = img.sample_bilinear(x as f64, y as f64);
                assert!(ok);
                assert_eq!(s[0], img.get(x, y, 0) as f64);
                assert_eq!(s[1], img.get(x, y, 1) as f64);
            }
        }
    }

    #[test]
    fn bilinear_midpoint_averages_neighbors() {
        let mut img = Image::new(2, 1, 1).unwrap();
        img.set(0, 0, 0, 0.0);
        img.set(1, 0, 0, 1.0);
        let (s, ok) = img.sample_bilinear(0.5, 0.0);
        assert!(ok);
        assert_eq!(s[0], 0.5);
    }

    #[test]
    fn bilinear_out_of_bounds_flags_false_and_zeroes() {
        let img = Image::constant(4, 4, 3, 1.0);
        let (s, ok) = img.sample_bilinear(-0.25, 1.0);
        assert!(!ok);
        assert!(s.iter().all(|&v| v == 0.0));
        assert!(img.sample_bilinear(3.0, 3.0).1);
        assert!(!img.sample_bilinear(3.01, 3.0).1);
    }

    // Independent per-channel oracle: scalar bilinear interpolation written
    // directly from the four-corner formula.
    fn bilinear_oracle(img: &Image, u: f64, v: f64, c: u32) -> f64 {
        let x0 = u.floor() as u32;
        let y0 = v.floor() as u32;
        let x1 = (x0 + 1).min(img.width - 1);
        let y1 = (y0 + 1).min(img.height - 1);
        let (fx, fy) = (u - x0 as f64, v - y0 as f64);
        let v00 = img.get(x0, y0, c) as f64;
        let v10 = img.get(x1, y0, c) as f64;
        let v01 = img.get(x0, y1, c) as f64;
        let v11 = img.get(x1, y1, c) as f64;
        (v00 * (1.0 - fx) + v10 * fx) * (1.0 - fy) + (v01 * (1.0 - fx) + v11 * fx) * fy
    }

    #[test]
    fn bilinear_matches_scalar_oracle_everywhere() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut img = Image::new(17, 13, 3).unwrap();
        for v in img.data.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        for _ in 0..10_000 {
            let u = rng.gen_range(0.0..16.0);
            let v = rng.gen_range(0.0..12.0);
            let (s, ok) = img.sample_bilinear(u, v);
            assert!(ok);
            for c in 0..3 {
                assert!((s[c as usize] - bilinear_oracle(&img, u, v, c)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn bilinear_grad_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut img = Image::new(9, 9, 2).unwrap();
        for v in img.data.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let h = 1e-4;
        for _ in 0..1000 {
            // Stay clear of cell boundaries so both FD probes share a cell.
            let u = rng.gen_range(0i64..8) as f64 + rng.gen_range(0.01..0.99);
            let v = rng.gen_range(0i64..8) as f64 + rng.gen_range(0.01..0.99);
            let (du, dv, ok) = img.sample_bilinear_grad(u, v);
            assert!(ok);
            let (sp, _) = img.sample_bilinear(u + h, v);
            let (sm, _) = img.sample_bilinear(u - h, v);
            let (tp, _) = img.sample_bilinear(u, v + h);
            let (tm, _) = img.sample_bilinear(u, v - h);
            for c in 0..2 {
                let fd_u = (sp[c] - sm[c]) / (2.0 * h);
                let fd_v = (tp[c] - tm[c]) / (2.0 * h);
                let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1e-6);
                assert!(rel(du[c], fd_u) < 1e-6, "du {} vs fd {}", du[c], fd_u);
                assert!(rel(dv[c], fd_v) < 1e-6, "dv {} vs fd {}", dv[c], fd_v);
            }
        }
    }

    #[test]
    fn projection_jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..200 {
            let cam = random_camera(&mut rng);
            let p = Vector3::new(
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
            );
            let proj = cam.project(&p);
            if proj.behind {
                continue;
            }
            let jac = cam.project_jacobian(&p).unwrap();
            let h = 1e-6;
            for a in 0..3 {
                let mut dp = Vector3::zeros();
                dp[a] = h;
                let pp = cam.project(&(p + dp)).pixel;
                let pm = cam.project(&(p - dp)).pixel;
                for r in 0..2 {
                    let fd = (pp[r] - pm[r]) / (2.0 * h);
                    assert!(
                        (jac[r][a] - fd).abs() < 1e-4 * fd.abs().max(1.0),
                        "jacobian ({r},{a}): {} vs {}",
                        jac[r][a],
                        fd
                    );
                }
            }
        }
    }
}
