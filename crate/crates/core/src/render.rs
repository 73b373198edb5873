//! Differentiable volume rendering against the multi-scale SDF.
//!
//! A ray is sampled inside per-scale surface regions, the SDF is evaluated
//! as the coarse base plus whatever residual scales are active at each
//! point, adjacent sample pairs are converted to opacities through a
//! sigmoid-ratio rule, and the result is alpha-composited front to back.
//! The conversion is built so that for an SDF decreasing through zero along
//! the ray, the compositing weight peaks at the zero crossing instead of in
//! front of it, at any sharpness.
//!
//! `render_ray_backward` is the hand-written adjoint of the whole chain; it
//! accumulates gradients with respect to the SDF vertex values of every
//! touched cell. Sample colors come from projecting the sample point into
//! the input views and do not depend on the SDF, so color gradients stop at
//! the compositing weights.

use nalgebra::{Point3, Vector3};
use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::{Camera, Image, Ray};
use crate::grid::SparseScalarGrid;
use crate::matching::SurfaceRegion;
use crate::pyramid::{fusion_weights, FusionMode, ImagePyramid, FEATURE_CHANNELS};

/// Samples closer than this fraction of the ray range collapse into one.
pub const MIN_SEPARATION_FACTOR: f64 = 1e-9;
/// Sigmoid values below this floor make the opacity ratio meaningless; the
/// interval is treated as fully transparent instead.
const PHI_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("need at least one SDF scale")]
    NoScales,
    #[error("scale {0} spans different bounds than the base grid")]
    MismatchedBounds(usize),
    #[error("sample counts must be positive and non-increasing, got {0:?}")]
    BadSampleCounts(Vec<usize>),
    #[error("sharpness must be positive and finite, got {0}")]
    BadSharpness(f64),
}

/// The scene SDF as a stack of grids: a coarse base defined everywhere
/// (clamped at the borders) plus sparse residual scales that contribute
/// only where their cells are active.
pub struct MultiScaleSdf<'a> {
    scales: Vec<&'a SparseScalarGrid>,
    lo: Point3<f64>,
    hi: Point3<f64>,
    /// Value reported where even the clamped base is inactive: one full
    /// scene extent, i.e. "far from any surface".
    empty_value: f64,
}

impl<'a> MultiScaleSdf<'a> {
    pub fn new(scales: Vec<&'a SparseScalarGrid>) -> Result<Self, RenderError> {
        let base = scales.first().ok_or(RenderError::NoScales)?;
        let (lo, hi) = (base.spec().lo, base.spec().hi);
        for (i, g) in scales.iter().enumerate().skip(1) {
            if g.spec().lo != lo || g.spec().hi != hi {
                return Err(RenderError::MismatchedBounds(i));
            }
        }
        let ext = (hi - lo).amax();
        Ok(MultiScaleSdf { scales, lo, hi, empty_value: ext })
    }

    pub fn num_scales(&self) -> usize {
        self.scales.len()
    }

    pub fn scales(&self) -> &[&'a SparseScalarGrid] {
        &self.scales
    }

    pub fn bounds(&self) -> (Point3<f64>, Point3<f64>) {
        (self.lo, self.hi)
    }

    pub fn extent(&self) -> f64 {
        self.empty_value
    }

    /// SDF value: clamped base plus residuals wherever they are active.
    pub fn value(&self, p: Point3<f64>) -> f64 {
        let mut f = match self.scales[0].value_at_clamped(p) {
            Some(v) => v,
            None => return self.empty_value,
        };
        for g in &self.scales[1..] {
            if let Some(v) = g.value_at(p) {
                f += v;
            }
        }
        f
    }

    /// Value and spatial gradient, each summed across contributing scales.
    pub fn value_and_grad(&self, p: Point3<f64>) -> (f64, Vector3<f64>) {
        let Some(base) = self.scales[0].sample_clamped(p) else {
            return (self.empty_value, Vector3::zeros());
        };
        let (mut f, mut grad) = (base.value, base.gradient);
        for g in &self.scales[1..] {
            if let Some(s) = g.sample(p) {
                f += s.value;
                grad += s.gradient;
            }
        }
        (f, grad)
    }

    /// Scatter `upstream * ∂value(p)/∂vertex` into per-scale gradient
    /// buffers, mirroring exactly the dependency structure of `value`.
    pub fn scatter_value_grad(&self, p: Point3<f64>, upstream: f64, grads: &mut [Vec<f64>]) {
        assert_eq!(grads.len(), self.scales.len());
        let Some(base) = self.scales[0].sample_clamped(p) else {
            return;
        };
        for (&vi, &w) in base.vertices.iter().zip(&base.weights) {
            grads[0][vi as usize] += upstream * w;
        }
        for (g, buf) in self.scales[1..].iter().zip(&mut grads[1..]) {
            if let Some(s) = g.sample(p) {
                for (&vi, &w) in s.vertices.iter().zip(&s.weights) {
                    buf[vi as usize] += upstream * w;
                }
            }
        }
    }

    /// Scatter `upstream · ∂(∇value(p))/∂vertex` into per-scale gradient
    /// buffers, mirroring exactly the dependency structure of
    /// `value_and_grad`'s gradient half.
    pub fn scatter_gradient_grad(
        &self,
        p: Point3<f64>,
        upstream: &Vector3<f64>,
        grads: &mut [Vec<f64>],
    ) {
        assert_eq!(grads.len(), self.scales.len());
        let Some(base) = self.scales[0].sample_clamped(p) else {
            return;
        };
        for (&vi, wg) in base.vertices.iter().zip(&base.weight_gradients) {
            grads[0][vi as usize] += upstream.dot(wg);
        }
        for (g, buf) in self.scales[1..].iter().zip(&mut grads[1..]) {
            if let Some(s) = g.sample(p) {
                for (&vi, wg) in s.vertices.iter().zip(&s.weight_gradients) {
                    buf[vi as usize] += upstream.dot(wg);
                }
            }
        }
    }

    /// Zeroed gradient buffers shaped like the vertex tables of each scale.
    pub fn zero_grads(&self) -> Vec<Vec<f64>> {
        self.scales.iter().map(|g| vec![0.0; g.values().len()]).collect()
    }
}

/// Ray samples merged from all per-scale surface regions.
#[derive(Debug, Clone, Default)]
pub struct SampleSet {
    /// Strictly increasing ray parameters.
    pub ts: Vec<f64>,
    /// Bit j set when scale j's region contains the sample.
    pub masks: Vec<u32>,
    pub points: Vec<Point3<f64>>,
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.ts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ts.is_empty()
    }
}

/// Uniform midpoint samples per scale region, merged and deduplicated.
/// Regions are clamped to the ray's `[near, far]`; empty intersections
/// contribute nothing. Deduplicated samples keep the union of scale masks
/// because membership is decided by containment, not provenance.
pub fn surface_sample(ray: &Ray, regions: &[SurfaceRegion], counts: &[usize]) -> SampleSet {
    assert_eq!(regions.len(), counts.len());
    let clamped: Vec<Option<(f64, f64)>> = regions
        .iter()
        .map(|r| {
            let lo = r.lo.max(ray.near);
            let hi = r.hi.min(ray.far);
            (hi > lo).then_some((lo, hi))
        })
        .collect();
    let mut ts = Vec::with_capacity(counts.iter().sum());
    for (interval, &count) in clamped.iter().zip(counts) {
        let Some((lo, hi)) = interval else { continue };
        let h = (hi - lo) / count.max(1) as f64;
        for i in 0..count {
            ts.push(lo + (i as f64 + 0.5) * h);
        }
    }
    ts.sort_by(f64::total_cmp);
    let min_sep = MIN_SEPARATION_FACTOR * (ray.far - ray.near);
    let mut set = SampleSet::default();
    for t in ts {
        if set.ts.last().is_some_and(|&last| t - last < min_sep) {
            continue;
        }
        let mut mask = 0u32;
        for (j, interval) in clamped.iter().enumerate() {
            if interval.is_some_and(|(lo, hi)| t >= lo && t <= hi) {
                mask |= 1 << j;
            }
        }
        set.ts.push(t);
        set.masks.push(mask);
        set.points.push(Point3::from(ray.at(t)));
    }
    set
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Opacity of the interval between two consecutive SDF samples.
///
/// The ratio form makes the compositing weight peak at the zero crossing of
/// a monotonically decreasing SDF regardless of sharpness; intervals where
/// the SDF grows (leaving the surface) clamp to zero.
pub fn sdf_to_alpha(f_k: f64, f_k1: f64, s: f64) -> f64 {
    let phi0 = sigmoid(s * f_k);
    if phi0 < PHI_FLOOR {
        return 0.0;
    }
    ((phi0 - sigmoid(s * f_k1)) / phi0).max(0.0)
}

#[derive(Debug, Clone)]
pub struct Composite {
    pub color: Vector3<f64>,
    /// Per-interval rendering weights `w_k = T_k α_k`.
    pub weights: Vec<f64>,
    /// Transmittance left after the last interval.
    pub transmittance: f64,
}

/// Front-to-back alpha compositing. Updating the transmittance by
/// subtracting the emitted weight keeps `Σ w_k + T` at exactly 1 up to
/// rounding, which downstream tests pin at 1e-12.
pub fn composite(alphas: &[f64], colors: &[Vector3<f64>]) -> Composite {
    assert_eq!(alphas.len(), colors.len());
    let mut t = 1.0f64;
    let mut color = Vector3::zeros();
    let mut weights = Vec::with_capacity(alphas.len());
    for (&a, c) in alphas.iter().zip(colors) {
        let w = t * a;
        color += w * c;
        weights.push(w);
        t -= w;
    }
    Composite { color, weights, transmittance: t }
}

/// Blend per-view colors with weights that are zero on invalid views and
/// form a simplex over the valid ones. `None` when no view is valid.
pub fn blend_colors(
    colors: &[Vector3<f64>],
    valid: &[bool],
    weights: &[f64],
) -> Option<Vector3<f64>> {
    assert!(colors.len() == valid.len() && valid.len() == weights.len());
    if !valid.iter().any(|&v| v) {
        return None;
    }
    let mut c = Vector3::zeros();
    for ((col, &ok), &w) in colors.iter().zip(valid).zip(weights) {
        if ok {
            c += w * col;
        }
    }
    Some(c)
}

#[derive(Debug, Clone)]
pub struct RenderConfig {
    /// Samples drawn per scale region, coarse to fine.
    pub sample_counts: Vec<usize>,
    /// Sigmoid sharpness; grows over training to tighten the surface.
    pub s: f64,
    pub background: Vector3<f64>,
    pub blend: FusionMode,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            sample_counts: vec![64, 32, 16, 8],
            s: 8.0,
            background: Vector3::zeros(),
            blend: FusionMode::Uniform,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<(), RenderError> {
        let c = &self.sample_counts;
        if c.is_empty() || c.iter().any(|&n| n == 0) || c.windows(2).any(|w| w[1] > w[0]) {
            return Err(RenderError::BadSampleCounts(c.clone()));
        }
        if !(self.s > 0.0 && self.s.is_finite()) {
            return Err(RenderError::BadSharpness(self.s));
        }
        Ok(())
    }
}

/// Exponential sharpness schedule: doubles every `period` steps.
pub fn annealed_sharpness(s0: f64, step: usize, period: f64) -> f64 {
    assert!(s0 > 0.0 && period > 0.0);
    s0 * (step as f64 / period).exp2()
}

/// The image set a ray is rendered against. Pyramids are only consulted by
/// similarity blending and may be omitted otherwise.
pub struct RenderViews<'a> {
    pub cameras: &'a [Camera],
    pub images: &'a [Image],
    pub pyramids: Option<&'a [ImagePyramid]>,
}

impl RenderViews<'_> {
    fn check(&self, blend: FusionMode) {
        assert_eq!(self.cameras.len(), self.images.len());
        if let Some(p) = self.pyramids {
            assert_eq!(p.len(), self.cameras.len());
        } else {
            assert!(
                blend == FusionMode::Uniform,
                "similarity blending needs image pyramids"
            );
        }
    }
}

#[derive(Debug, Clone)]
pub struct RayRender {
    pub color: Vector3<f64>,
    /// Per-interval rendering weights; empty when the ray misses the bounds
    /// or has fewer than two samples.
    pub weights: Vec<f64>,
    pub samples: SampleSet,
    /// Weight-averaged ray parameter; `far` when nothing was hit.
    pub t_expectation: f64,
    pub transmittance: f64,
}

fn miss(ray: &Ray, cfg: &RenderConfig, samples: SampleSet) -> RayRender {
    RayRender {
        color: cfg.background,
        weights: Vec::new(),
        samples,
        t_expectation: ray.far,
        transmittance: 1.0,
    }
}

/// Color of one sample point as seen by the views: project, bilinearly
/// sample each image, and blend. Samples seen by no view fall back to the
/// background color.
fn sample_color(p: Point3<f64>, views: &RenderViews, cfg: &RenderConfig) -> Vector3<f64> {
    let n = views.cameras.len();
    let mut colors = vec![Vector3::zeros(); n];
    let mut valid = vec![false; n];
    let mut pixels = vec![[0.0f64; 2]; n];
    let mut rgb = [0.0f64; 3];
    for (i, (cam, img)) in views.cameras.iter().zip(views.images).enumerate() {
        let proj = cam.project(&p.coords);
        if proj.behind || !proj.in_image {
            continue;
        }
        if img.sample_bilinear_into(proj.pixel[0], proj.pixel[1], &mut rgb) {
            colors[i] = Vector3::new(rgb[0], rgb[1], rgb[2]);
            pixels[i] = proj.pixel;
            valid[i] = true;
        }
    }
    let n_valid = valid.iter().filter(|&&v| v).count();
    if n_valid == 0 {
        return cfg.background;
    }
    let mut weights = vec![0.0; n];
    match cfg.blend {
        FusionMode::Uniform => {
            let w = 1.0 / n_valid as f64;
            for (wi, &ok) in weights.iter_mut().zip(&valid) {
                if ok {
                    *wi = w;
                }
            }
        }
        FusionMode::Similarity => {
            let pyramids = views.pyramids.expect("checked in render entry points");
            let mut feats = Vec::with_capacity(n_valid);
            let mut owners = Vec::with_capacity(n_valid);
            let mut buf = vec![0.0f64; FEATURE_CHANNELS as usize];
            for i in 0..n {
                if !valid[i] {
                    continue;
                }
                if pyramids[i].sample_residual_features_into(pixels[i][0], pixels[i][1], &mut buf)
                {
                    feats.push(buf.clone());
                    owners.push(i);
                } else {
                    valid[i] = false;
                }
            }
            if owners.is_empty() {
                return cfg.background;
            }
            let ws = fusion_weights(&feats, FusionMode::Similarity)
                .expect("non-empty feature set");
            for (&i, w) in owners.iter().zip(ws) {
                weights[i] = w;
            }
        }
    }
    blend_colors(&colors, &valid, &weights).unwrap_or(cfg.background)
}

struct ForwardPass {
    ray: Ray,
    samples: SampleSet,
    fs: Vec<f64>,
    alphas: Vec<f64>,
    colors: Vec<Vector3<f64>>,
    comp: Composite,
}

fn forward(
    sdf: &MultiScaleSdf,
    views: &RenderViews,
    ray: &Ray,
    regions: &[SurfaceRegion],
    cfg: &RenderConfig,
) -> Result<ForwardPass, RayRender> {
    views.check(cfg.blend);
    assert_eq!(regions.len(), cfg.sample_counts.len());
    let (lo, hi) = sdf.bounds();
    let mut clipped = *ray;
    if !clipped.clip_to_box(lo.coords, hi.coords) {
        return Err(miss(ray, cfg, SampleSet::default()));
    }
    let samples = surface_sample(&clipped, regions, &cfg.sample_counts);
    if samples.len() < 2 {
        return Err(miss(ray, cfg, samples));
    }
    let fs: Vec<f64> = samples.points.iter().map(|&p| sdf.value(p)).collect();
    let alphas: Vec<f64> =
        fs.windows(2).map(|w| sdf_to_alpha(w[0], w[1], cfg.s)).collect();
    let colors: Vec<Vector3<f64>> = samples.points[..samples.len() - 1]
        .iter()
        .map(|&p| sample_color(p, views, cfg))
        .collect();
    let comp = composite(&alphas, &colors);
    Ok(ForwardPass { ray: clipped, samples, fs, alphas, colors, comp })
}

fn finish(pass: ForwardPass, cfg: &RenderConfig) -> RayRender {
    let ForwardPass { ray, samples, alphas: _, fs: _, colors: _, comp } = pass;
    let color = comp.color + comp.transmittance * cfg.background;
    let hit_mass: f64 = comp.weights.iter().sum();
    let t_expectation = if hit_mass > 1e-12 {
        comp.weights.iter().zip(&samples.ts).map(|(w, t)| w * t).sum::<f64>() / hit_mass
    } else {
        ray.far
    };
    RayRender {
        color,
        weights: comp.weights,
        samples,
        t_expectation,
        transmittance: comp.transmittance,
    }
}

/// Render one ray. Rays missing the SDF bounds return the background with
/// transmittance 1; escaping transmittance likewise pours into the
/// background color.
pub fn render_ray(
    sdf: &MultiScaleSdf,
    views: &RenderViews,
    ray: &Ray,
    regions: &[SurfaceRegion],
    cfg: &RenderConfig,
) -> RayRender {
    match forward(sdf, views, ray, regions, cfg) {
        Ok(pass) => finish(pass, cfg),
        Err(miss) => miss,
    }
}

/// Render one ray and accumulate `∂(upstream·color)/∂vertex` into the
/// per-scale gradient buffers (shaped like `MultiScaleSdf::zero_grads`).
/// Returns the forward result.
pub fn render_ray_backward(
    sdf: &MultiScaleSdf,
    views: &RenderViews,
    ray: &Ray,
    regions: &[SurfaceRegion],
    cfg: &RenderConfig,
    upstream: Vector3<f64>,
    grads: &mut [Vec<f64>],
) -> RayRender {
    let pass = match forward(sdf, views, ray, regions, cfg) {
        Ok(pass) => pass,
        Err(miss) => return miss,
    };
    let n = pass.alphas.len();
    // d(upstream·color)/dα_j = upstream·(T_j c_j − S_j/(1−α_j)) with
    // S_j the color mass emitted after interval j, background included.
    // Whenever 1−α_j underflows to zero the entire suffix is zero too, so
    // the correction term is dropped rather than divided.
    let mut d_alpha = vec![0.0f64; n];
    let mut suffix = pass.comp.transmittance * cfg.background;
    let mut t_k = 1.0f64;
    let prefix_t: Vec<f64> = pass
        .alphas
        .iter()
        .map(|&a| {
            let t = t_k;
            t_k -= t * a;
            t
        })
        .collect();
    for j in (0..n).rev() {
        let correction = if 1.0 - pass.alphas[j] > 0.0 {
            suffix / (1.0 - pass.alphas[j])
        } else {
            Vector3::zeros()
        };
        d_alpha[j] = upstream.dot(&(prefix_t[j] * pass.colors[j] - correction));
        suffix += pass.comp.weights[j] * pass.colors[j];
    }
    // Chain through the sigmoid-ratio opacity into the two SDF samples of
    // each interval, then scatter into the trilinear vertex weights.
    let mut d_f = vec![0.0f64; pass.fs.len()];
    let s = cfg.s;
    for j in 0..n {
        if pass.alphas[j] == 0.0 {
            continue;
        }
        let phi0 = sigmoid(s * pass.fs[j]);
        let phi1 = sigmoid(s * pass.fs[j + 1]);
        d_f[j] += d_alpha[j] * s * phi1 * (1.0 - phi0) / phi0;
        d_f[j + 1] -= d_alpha[j] * s * phi1 * (1.0 - phi1) / phi0;
    }
    for (k, &g) in d_f.iter().enumerate() {
        if g != 0.0 {
            sdf.scatter_value_grad(pass.samples.points[k], g, grads);
        }
    }
    finish(pass, cfg)
}

/// Render a full view. Regions come from a per-pixel provider so callers
/// can center them on surface maps or fall back to the whole ray range.
pub fn render_image<F>(
    sdf: &MultiScaleSdf,
    views: &RenderViews,
    cam: &Camera,
    cfg: &RenderConfig,
    regions_for: F,
) -> Image
where
    F: Fn(u32, u32, &Ray) -> Vec<SurfaceRegion> + Sync,
{
    let mut out = Image::new(cam.width, cam.height, 3).expect("positive dimensions");
    let rows: Vec<Vec<f32>> = (0..cam.height)
        .into_par_iter()
        .map(|y| {
            let mut row = vec![0.0f32; (cam.width * 3) as usize];
            for x in 0..cam.width {
                let ray = cam
                    .ray_through_pixel(x as f64, y as f64)
                    .expect("pixel inside image");
                let regions = regions_for(x, y, &ray);
                let r = render_ray(sdf, views, &ray, &regions, cfg);
                for c in 0..3 {
                    row[(x * 3 + c as u32) as usize] = r.color[c] as f32;
                }
            }
            row
        })
        .collect();
    for (y, row) in rows.into_iter().enumerate() {
        let base = y * (cam.width * 3) as usize;
        out.data[base..base + row.len()].copy_from_slice(&row);
    }
    out
}
