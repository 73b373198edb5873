//! Loss terms driving the per-scene optimization: the multi-view warping
//! loss on surface maps, the rendered-color loss, and the eikonal and
//! pseudo-point SDF regularizers, plus the weighted total.
//!
//! The warping loss compares, per map texel, the reference view against each
//! source view *both* sampled at the projection of the texel's surface-point
//! estimate. Sampling the reference through the same projection (instead of
//! at the raw texel center) makes the comparison exact when the estimate is
//! correct and keeps the loss meaningful for estimates off the texel's own
//! ray. A view whose warp leaves almost no valid pixels scores infinity, so
//! the K-smallest selection drops occluded or out-of-frame views before they
//! can poison the average.
//!
//! All reductions are sequential over fixed iteration orders; only the
//! per-pixel warping work fans out to threads. Results are bit-stable
//! across worker counts.

use nalgebra::{Point3, Vector3};
use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::{Camera, Image};
use crate::matching::SurfaceMap;
use crate::render::MultiScaleSdf;

/// SSIM stabilizers for unit-range images: (0.01)^2 and (0.03)^2.
pub const SSIM_C1: f64 = 1.0e-4;
pub const SSIM_C2: f64 = 9.0e-4;

/// Blend between the structural and absolute photometric terms:
/// WL = 0.8 * (1 - SSIM)/2 + 0.2 * |diff|.
pub const WL_SSIM_WEIGHT: f64 = 0.8;
pub const WL_ABS_WEIGHT: f64 = 0.2;

/// A source view whose warp covers less than this fraction of the map is
/// treated as unusable (its per-view loss becomes +inf).
pub const MIN_WARP_VALID_FRACTION: f64 = 0.01;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("ssim window is {0}x{1}, needs at least 3x3")]
    WindowTooSmall(u32, u32),
    #[error("images have mismatched shapes")]
    MismatchedImages,
    #[error("warping loss needs 3-channel images, got {0} channels")]
    NotRgb(u32),
    #[error("no source views")]
    NoSources,
    #[error("warping view count {0} must be between 1 and the source count")]
    BadViewCount(usize),
    #[error("every source view warps fully invalid")]
    AllViewsInvalid,
    #[error("{0} rendered colors vs {1} observed")]
    MismatchedSamples(usize, usize),
    #[error("empty sample set")]
    EmptySamples,
    #[error("empty point set")]
    EmptyPoints,
    #[error("loss weight {name} = {value} must be finite and >= 0")]
    BadWeight { name: &'static str, value: f64 },
    #[error("per-scale warping weights must be non-decreasing, got {0:?}")]
    DecreasingScaleWeights(Vec<f64>),
    #[error("{terms} warping terms but only {weights} per-scale weights")]
    MismatchedScales { terms: usize, weights: usize },
}

/// Scalar weights combining the individual terms into the training loss.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    /// Eikonal regularizer weight.
    pub eikonal: f64,
    /// Pseudo-point SDF supervision weight.
    pub pseudo: f64,
    /// Matching-feature consistency weight; zero disables the term.
    pub mfc: f64,
    /// Per-scale warping weights, coarse to fine, non-decreasing: later
    /// scales localize sharper surfaces and deserve more trust.
    pub warp_per_scale: Vec<f64>,
    /// How many best source views the warping loss averages; `None` picks
    /// max(1, ceil(N/2)) from the source count N at evaluation time.
    pub warp_views: Option<usize>,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            eikonal: 0.1,
            pseudo: 1.0,
            mfc: 0.0,
            warp_per_scale: vec![0.25, 0.5, 0.75, 1.0],
            warp_views: None,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        let named = [
            ("eikonal", self.eikonal),
            ("pseudo", self.pseudo),
            ("mfc", self.mfc),
        ];
        for (name, value) in named {
            if !value.is_finite() || value < 0.0 {
                return Err(LossError::BadWeight { name, value });
            }
        }
        for &w in &self.warp_per_scale {
            if !w.is_finite() || w < 0.0 {
                return Err(LossError::BadWeight { name: "warp_per_scale", value: w });
            }
        }
        if self.warp_per_scale.windows(2).any(|p| p[1] < p[0]) {
            return Err(LossError::DecreasingScaleWeights(self.warp_per_scale.clone()));
        }
        if self.warp_views == Some(0) {
            return Err(LossError::BadViewCount(0));
        }
        Ok(())
    }

    /// Effective K for `sources` source views.
    pub fn warp_views_for(&self, sources: usize) -> usize {
        self.warp_views.unwrap_or(sources.div_ceil(2)).max(1)
    }
}

/// Raw per-term values, before weighting. `warping[j]` pairs with
/// `warp_per_scale[j]`.
#[derive(Debug, Clone, Default, serde::Serialize)]
pub struct LossTerms {
    pub color: f64,
    pub mfc: f64,
    pub eikonal: f64,
    pub pseudo: f64,
    pub warping: Vec<f64>,
}

/// Weighted breakdown: `total = surface + matching`.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct LossReport {
    pub surface: f64,
    pub matching: f64,
    pub total: f64,
}

pub fn total_loss(terms: &LossTerms, weights: &LossWeights) -> Result<LossReport, LossError> {
    weights.validate()?;
    if terms.warping.len() > weights.warp_per_scale.len() {
        return Err(LossError::MismatchedScales {
            terms: terms.warping.len(),
            weights: weights.warp_per_scale.len(),
        });
    }
    let surface = terms.color
        + weights.mfc * terms.mfc
        + weights.eikonal * terms.eikonal
        + weights.pseudo * terms.pseudo;
    let mut matching = 0.0;
    for (j, &wl) in terms.warping.iter().enumerate() {
        matching += weights.warp_per_scale[j] * wl;
    }
    Ok(LossReport { surface, matching, total: surface + matching })
}

/// Structural similarity of one channel over paired samples, uniform window.
fn channel_ssim(a: &[f64], b: &[f64]) -> f64 {
    let m = a.len() as f64;
    let (mut ma, mut mb) = (0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        ma += x;
        mb += y;
    }
    ma /= m;
    mb /= m;
    let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
        cov += (x - ma) * (y - mb);
    }
    va /= m;
    vb /= m;
    cov /= m;
    (2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2)
        / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2))
}

/// `channel_ssim` plus its derivative with respect to each `b` sample.
fn channel_ssim_grad(a: &[f64], b: &[f64], grad_b: &mut [f64]) -> f64 {
    let m = a.len() as f64;
    let (mut ma, mut mb) = (0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        ma += x;
        mb += y;
    }
    ma /= m;
    mb /= m;
    let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
        cov += (x - ma) * (y - mb);
    }
    va /= m;
    vb /= m;
    cov /= m;
    let n1 = 2.0 * ma * mb + SSIM_C1;
    let n2 = 2.0 * cov + SSIM_C2;
    let d1 = ma * ma + mb * mb + SSIM_C1;
    let d2 = va + vb + SSIM_C2;
    let s = n1 * n2 / (d1 * d2);
    for (i, (&x, &y)) in a.iter().zip(b).enumerate() {
        // d(mb) = 1/m, d(vb) = 2(y - mb)/m, d(cov) = (x - ma)/m.
        let dn1 = 2.0 * ma / m;
        let dn2 = 2.0 * (x - ma) / m;
        let dd1 = 2.0 * mb / m;
        let dd2 = 2.0 * (y - mb) / m;
        grad_b[i] = (dn1 * n2 + n1 * dn2) / (d1 * d2) - s * (dd1 / d1 + dd2 / d2);
    }
    s
}

/// Whole-window SSIM of two same-shape images, at least 3x3: per-channel
/// statistics over every pixel, averaged across channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64, LossError> {
    if a.width != b.width || a.height != b.height || a.channels != b.channels {
        return Err(LossError::MismatchedImages);
    }
    if a.width < 3 || a.height < 3 {
        return Err(LossError::WindowTooSmall(a.width, a.height));
    }
    let n = (a.width * a.height) as usize;
    let c = a.channels as usize;
    let mut sum = 0.0;
    let mut av = Vec::with_capacity(n);
    let mut bv = Vec::with_capacity(n);
    for ch in 0..c {
        av.clear();
        bv.clear();
        for i in 0..n {
            av.push(a.data[i * c + ch] as f64);
            bv.push(b.data[i * c + ch] as f64);
        }
        sum += channel_ssim(&av, &bv);
    }
    Ok(sum / c as f64)
}

/// One warping-loss window (usually 3x3) and its gradient with respect to
/// the warped colors. Positions flagged invalid contribute nothing and get
/// zero gradient.
#[derive(Debug, Clone)]
pub struct WindowWarpLoss {
    pub value: f64,
    pub grad: Vec<Vector3<f64>>,
}

fn window_ssim_inputs(
    reference: &[Vector3<f64>],
    warped: &[Vector3<f64>],
    valid: &[bool],
    channel: usize,
) -> (Vec<f64>, Vec<f64>) {
    let mut av = Vec::with_capacity(valid.len());
    let mut bv = Vec::with_capacity(valid.len());
    for i in 0..valid.len() {
        if valid[i] {
            av.push(reference[i][channel]);
            bv.push(warped[i][channel]);
        }
    }
    (av, bv)
}

/// Per-pixel warping loss: SSIM over the window's valid pixels plus the
/// absolute difference at `center`. Returns `None` when the center pixel is
/// invalid (no loss is defined there).
pub fn window_warp_loss(
    reference: &[Vector3<f64>],
    warped: &[Vector3<f64>],
    valid: &[bool],
    center: usize,
) -> Option<WindowWarpLoss> {
    assert_eq!(reference.len(), warped.len());
    assert_eq!(reference.len(), valid.len());
    if !valid.get(center).copied().unwrap_or(false) {
        return None;
    }
    let mut grad = vec![Vector3::zeros(); warped.len()];
    let mut ssim_sum = 0.0;
    let mut abs_sum = 0.0;
    let mut db = vec![0.0; valid.len()];
    for ch in 0..3 {
        let (av, bv) = window_ssim_inputs(reference, warped, valid, ch);
        db.truncate(bv.len());
        let s = channel_ssim_grad(&av, &bv, &mut db[..bv.len()]);
        ssim_sum += s;
        let mut k = 0;
        for i in 0..valid.len() {
            if valid[i] {
                grad[i][ch] -= WL_SSIM_WEIGHT / 2.0 * db[k] / 3.0;
                k += 1;
            }
        }
        let diff = warped[center][ch] - reference[center][ch];
        abs_sum += diff.abs();
        grad[center][ch] += WL_ABS_WEIGHT * diff.signum() / 3.0;
        db.resize(valid.len(), 0.0);
    }
    let value =
        WL_SSIM_WEIGHT * (1.0 - ssim_sum / 3.0) / 2.0 + WL_ABS_WEIGHT * abs_sum / 3.0;
    Some(WindowWarpLoss { value, grad })
}

/// Value-only twin of `window_warp_loss`.
fn window_warp_value(
    reference: &[Vector3<f64>],
    warped: &[Vector3<f64>],
    valid: &[bool],
    center: usize,
) -> Option<f64> {
    if !valid.get(center).copied().unwrap_or(false) {
        return None;
    }
    let mut ssim_sum = 0.0;
    let mut abs_sum = 0.0;
    for ch in 0..3 {
        let (av, bv) = window_ssim_inputs(reference, warped, valid, ch);
        ssim_sum += channel_ssim(&av, &bv);
        abs_sum += (warped[center][ch] - reference[center][ch]).abs();
    }
    Some(WL_SSIM_WEIGHT * (1.0 - ssim_sum / 3.0) / 2.0 + WL_ABS_WEIGHT * abs_sum / 3.0)
}

/// Projects every valid map point into `source_cam` and bilinearly samples
/// `source` there, producing a map-resolution image plus a validity mask.
/// Texels whose point lands behind the camera or outside the bilinear
/// footprint come back invalid.
pub fn warp_image(source: &Image, source_cam: &Camera, map: &SurfaceMap) -> (Image, Vec<bool>) {
    let (w, h) = (map.width, map.height);
    let c = source.channels as usize;
    let rows: Vec<(Vec<f32>, Vec<bool>)> = (0..h)
        .into_par_iter()
        .map(|my| {
            let mut colors = vec![0.0f32; w as usize * c];
            let mut ok = vec![false; w as usize];
            let mut buf = vec![0.0f64; c];
            for mx in 0..w {
                let i = map.idx(mx, my);
                if !map.valid[i] {
                    continue;
                }
                let proj = source_cam.project(&map.points[i].coords);
                if proj.behind {
                    continue;
                }
                if !source.sample_bilinear_into(proj.pixel[0], proj.pixel[1], &mut buf) {
                    continue;
                }
                for (k, &v) in buf.iter().enumerate() {
                    colors[mx as usize * c + k] = v as f32;
                }
                ok[mx as usize] = true;
            }
            (colors, ok)
        })
        .collect();
    let mut out = Image::new(w, h, source.channels).expect("surface map has nonzero dims");
    let mut mask = Vec::with_capacity((w * h) as usize);
    for (my, (colors, ok)) in rows.into_iter().enumerate() {
        let base = my * w as usize * c;
        out.data[base..base + colors.len()].copy_from_slice(&colors);
        mask.extend(ok);
    }
    (out, mask)
}

fn texel3(img: &Image, x: u32, y: u32) -> Vector3<f64> {
    let t = img.texel(x, y);
    Vector3::new(t[0] as f64, t[1] as f64, t[2] as f64)
}

/// Mean per-pixel warping loss of one warped view against the warped
/// reference, over mutually valid texels (3x3 windows, truncated at the
/// map border).
fn view_warp_loss(ref_img: &Image, warped: &Image, mutual: &[bool]) -> f64 {
    let (w, h) = (ref_img.width, ref_img.height);
    let mut sum = 0.0;
    let mut count = 0usize;
    let mut rv: Vec<Vector3<f64>> = Vec::with_capacity(9);
    let mut wv: Vec<Vector3<f64>> = Vec::with_capacity(9);
    let mut ok: Vec<bool> = Vec::with_capacity(9);
    for my in 0..h {
        for mx in 0..w {
            if !mutual[(my * w + mx) as usize] {
                continue;
            }
            rv.clear();
            wv.clear();
            ok.clear();
            let mut center = 0;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (nx, ny) = (mx as i64 + dx, my as i64 + dy);
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    if dx == 0 && dy == 0 {
                        center = rv.len();
                    }
                    ok.push(mutual[(ny as u32 * w + nx as u32) as usize]);
                    rv.push(texel3(ref_img, nx as u32, ny as u32));
                    wv.push(texel3(warped, nx as u32, ny as u32));
                }
            }
            sum += window_warp_value(&rv, &wv, &ok, center).expect("center texel is valid");
            count += 1;
        }
    }
    sum / count as f64
}

fn k_smallest_mean(values: &[f64], k: usize) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted[..k].iter().sum::<f64>() / k as f64
}

/// Multi-view warping loss for one reference view.
#[derive(Debug, Clone)]
pub struct WarpingLoss {
    /// Mean of the K smallest per-view losses.
    pub value: f64,
    /// Per source view, in input order; +inf marks an unusable view.
    pub per_view: Vec<f64>,
}

/// Warps every source view onto the reference's surface map and scores it
/// against the reference sampled through the same projections. `k` selects
/// how many best views are averaged; views with under
/// [`MIN_WARP_VALID_FRACTION`] of the map valid score +inf and lose to any
/// usable view in the selection.
pub fn warping_loss(
    reference: &Image,
    reference_cam: &Camera,
    sources: &[(&Image, &Camera)],
    map: &SurfaceMap,
    k: usize,
) -> Result<WarpingLoss, LossError> {
    if sources.is_empty() {
        return Err(LossError::NoSources);
    }
    if k == 0 || k > sources.len() {
        return Err(LossError::BadViewCount(k));
    }
    if reference.channels != 3 {
        return Err(LossError::NotRgb(reference.channels));
    }
    for (img, _) in sources {
        if img.channels != 3 {
            return Err(LossError::NotRgb(img.channels));
        }
    }
    let (ref_img, ref_mask) = warp_image(reference, reference_cam, map);
    let texels = (map.width * map.height) as f64;
    let per_view: Vec<f64> = sources
        .iter()
        .map(|(img, cam)| {
            let (warped, mask) = warp_image(img, cam, map);
            let mutual: Vec<bool> =
                ref_mask.iter().zip(&mask).map(|(&a, &b)| a && b).collect();
            let count = mutual.iter().filter(|&&b| b).count();
            if (count as f64) < MIN_WARP_VALID_FRACTION * texels {
                return f64::INFINITY;
            }
            view_warp_loss(&ref_img, &warped, &mutual)
        })
        .collect();
    if per_view.iter().all(|v| v.is_infinite()) {
        return Err(LossError::AllViewsInvalid);
    }
    Ok(WarpingLoss { value: k_smallest_mean(&per_view, k), per_view })
}

/// Mean absolute color error over ray samples, averaged across channels.
pub fn color_loss(
    rendered: &[Vector3<f64>],
    observed: &[Vector3<f64>],
) -> Result<f64, LossError> {
    if rendered.len() != observed.len() {
        return Err(LossError::MismatchedSamples(rendered.len(), observed.len()));
    }
    if rendered.is_empty() {
        return Err(LossError::EmptySamples);
    }
    let mut sum = 0.0;
    for (r, o) in rendered.iter().zip(observed) {
        sum += (r.x - o.x).abs() + (r.y - o.y).abs() + (r.z - o.z).abs();
    }
    Ok(sum / (3 * rendered.len()) as f64)
}

/// Mean squared deviation of the SDF gradient norm from one.
pub fn eikonal_loss(field: &MultiScaleSdf, points: &[Point3<f64>]) -> Result<f64, LossError> {
    if points.is_empty() {
        return Err(LossError::EmptyPoints);
    }
    let mut sum = 0.0;
    for &p in points {
        let (_, g) = field.value_and_grad(p);
        let d = g.norm() - 1.0;
        sum += d * d;
    }
    Ok(sum / points.len() as f64)
}

/// `eikonal_loss` and its vertex gradient, scaled by `upstream` and
/// accumulated into `grads` (one buffer per scale, as from
/// [`MultiScaleSdf::zero_grads`]). Gradient-free points (norm ~ 0, where
/// the square root is not differentiable) are skipped in the backward pass
/// but still counted in the loss.
pub fn eikonal_loss_backward(
    field: &MultiScaleSdf,
    points: &[Point3<f64>],
    upstream: f64,
    grads: &mut [Vec<f64>],
) -> Result<f64, LossError> {
    if points.is_empty() {
        return Err(LossError::EmptyPoints);
    }
    let m = points.len() as f64;
    let mut sum = 0.0;
    for &p in points {
        let (_, g) = field.value_and_grad(p);
        let norm = g.norm();
        let d = norm - 1.0;
        sum += d * d;
        if norm > 1e-12 {
            let up = g * (upstream * 2.0 * d / (norm * m));
            field.scatter_gradient_grad(p, &up, grads);
        }
    }
    Ok(sum / m)
}

/// Mean absolute SDF value at the pseudo points; an empty set disables the
/// term (zero loss) rather than erroring, since clouds are optional input.
pub fn pseudo_loss(field: &MultiScaleSdf, points: &[Point3<f64>]) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    points.iter().map(|&p| field.value(p).abs()).sum::<f64>() / points.len() as f64
}

/// `pseudo_loss` and its vertex gradient (sign subgradient, zero exactly on
/// the surface), scaled by `upstream` and accumulated into `grads`.
pub fn pseudo_loss_backward(
    field: &MultiScaleSdf,
    points: &[Point3<f64>],
    upstream: f64,
    grads: &mut [Vec<f64>],
) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    let m = points.len() as f64;
    let mut sum = 0.0;
    for &p in points {
        let f = field.value(p);
        sum += f.abs();
        let sign = f.signum();
        if f != 0.0 {
            field.scatter_value_grad(p, upstream * sign / m, grads);
        }
    }
    sum / m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{GridSpec, SparseScalarGrid};
    use crate::scene::{gen_synthetic, GenConfig, SceneDataset, Shape, PLANE_Z};
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn rgb_image(w: u32, h: u32, f: impl Fn(u32, u32) -> [f32; 3]) -> Image {
        let mut img = Image::new(w, h, 3).unwrap();
        for y in 0..h {
            for x in 0..w {
                let c = f(x, y);
                for ch in 0..3 {
                    img.set(x, y, ch, c[ch as usize]);
                }
            }
        }
        img
    }

    fn random_image(w: u32, h: u32, rng: &mut ChaCha8Rng) -> Image {
        let mut img = Image::new(w, h, 3).unwrap();
        for v in img.data.iter_mut() {
            *v = rng.gen_range(0.0..1.0);
        }
        img
    }

    fn sphere_scene(views: u32, res: u32, seed: u64) -> SceneDataset {
        gen_synthetic(&GenConfig::new(Shape::Sphere, views, res, res, seed)).unwrap()
    }

    fn grid_from_sdf(n: u32, f: impl Fn(Point3<f64>) -> f64) -> SparseScalarGrid {
        let spec = GridSpec::new(
            [n, n, n],
            Point3::new(-1.0, -1.0, -1.0),
            Point3::new(1.0, 1.0, 1.0),
        )
        .unwrap();
        let mut g = SparseScalarGrid::dense(spec, 0.0);
        let coords: Vec<[u32; 3]> = g.vertex_coords().to_vec();
        let values: Vec<f64> = coords.iter().map(|&c| f(spec.vertex_world(c))).collect();
        g.values_mut().copy_from_slice(&values);
        g
    }

    #[test]
    fn ssim_reference_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_image(8, 8, &mut rng);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-15);

        let c0 = rgb_image(5, 5, |_, _| [0.42, 0.42, 0.42]);
        let c1 = rgb_image(5, 5, |_, _| [0.42, 0.42, 0.42]);
        assert!((ssim(&c0, &c1).unwrap() - 1.0).abs() < 1e-15);

        // Contrast inversion around 0.5: means match, covariance is minus
        // the (large) variance, so the structural factor goes negative.
        let hi = rgb_image(6, 6, |x, y| {
            let v = if (x + y) % 2 == 0 { 0.9 } else { 0.1 };
            [v, v, v]
        });
        let flipped = rgb_image(6, 6, |x, y| {
            let v = if (x + y) % 2 == 0 { 0.1 } else { 0.9 };
            [v, v, v]
        });
        assert!(ssim(&hi, &flipped).unwrap() < 0.0);

        let tiny = rgb_image(2, 5, |_, _| [0.5; 3]);
        assert!(matches!(
            ssim(&tiny, &tiny),
            Err(LossError::WindowTooSmall(2, 5))
        ));
        let other = rgb_image(5, 6, |_, _| [0.5; 3]);
        assert!(matches!(
            ssim(&c0, &other),
            Err(LossError::MismatchedImages)
        ));
    }

    #[test]
    fn ssim_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = random_image(5, 7, &mut rng);
        let b = random_image(5, 7, &mut rng);
        let got = ssim(&a, &b).unwrap();

        // Independent arrangement: raw moments instead of centered sums.
        let mut expected = 0.0;
        let n = (5 * 7) as f64;
        for ch in 0..3 {
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..(5 * 7) {
                let x = a.data[i * 3 + ch] as f64;
                let y = b.data[i * 3 + ch] as f64;
                sa += x;
                sb += y;
                saa += x * x;
                sbb += y * y;
                sab += x * y;
            }
            let (ma, mb) = (sa / n, sb / n);
            let va = saa / n - ma * ma;
            let vb = sbb / n - mb * mb;
            let cov = sab / n - ma * mb;
            expected += (2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2)
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
        }
        assert_relative_eq!(got, expected / 3.0, max_relative = 1e-10);
    }

    #[test]
    fn window_loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut probes = 0;
        for _ in 0..6 {
            let n = 9;
            let reference: Vec<Vector3<f64>> =
                (0..n).map(|_| Vector3::from_fn(|_, _| rng.gen_range(0.0..1.0))).collect();
            let warped: Vec<Vector3<f64>> =
                (0..n).map(|_| Vector3::from_fn(|_, _| rng.gen_range(0.0..1.0))).collect();
            let mut valid: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.8)).collect();
            let center = 4;
            valid[center] = true;

            let base = window_warp_loss(&reference, &warped, &valid, center).unwrap();
            let h = 1e-6;
            for i in 0..n {
                for ch in 0..3 {
                    // The |diff| term kinks at zero; random colors keep the
                    // center difference clear of it, but skip just in case.
                    if i == center
                        && (warped[i][ch] - reference[i][ch]).abs() < 1e-3
                    {
                        continue;
                    }
                    let mut plus = warped.clone();
                    plus[i][ch] += h;
                    let mut minus = warped.clone();
                    minus[i][ch] -= h;
                    let fp = window_warp_loss(&reference, &plus, &valid, center)
                        .unwrap()
                        .value;
                    let fm = window_warp_loss(&reference, &minus, &valid, center)
                        .unwrap()
                        .value;
                    let fd = (fp - fm) / (2.0 * h);
                    let an = base.grad[i][ch];
                    assert!(
                        (fd - an).abs() <= 1e-5 * an.abs().max(1e-4),
                        "grad[{i}][{ch}]: analytic {an} vs fd {fd}"
                    );
                    probes += 1;
                }
            }
        }
        assert!(probes >= 20, "only {probes} informative probes");
    }

    #[test]
    fn identity_warp_reproduces_reference() {
        let scene = sphere_scene(4, 96, 7);
        let cam = &scene.cameras[0];
        let depth = &scene.gt_depth.as_ref().unwrap()[0];
        let map = SurfaceMap::from_depth_map(cam, depth, 4);
        assert!(map.valid_fraction() > 0.1);

        let (warped, mask) = warp_image(&scene.images[0], cam, &map);
        assert_eq!(mask, map.valid);
        for my in 0..map.height {
            for mx in 0..map.width {
                let i = map.idx(mx, my);
                if !map.valid[i] {
                    continue;
                }
                // The map point sits on a nearest-pixel ray, so it projects
                // back onto that exact texel center.
                let (u, v) = map.texel_pixel(mx, my);
                let px = (u.round() as i64).clamp(0, cam.width as i64 - 1) as u32;
                let py = (v.round() as i64).clamp(0, cam.height as i64 - 1) as u32;
                let want = scene.images[0].texel(px, py);
                let got = warped.texel(mx, my);
                for ch in 0..3 {
                    assert!((want[ch] - got[ch]).abs() < 1e-6);
                }
            }
        }

        let wl = warping_loss(
            &scene.images[0],
            cam,
            &[(&scene.images[0], cam)],
            &map,
            1,
        )
        .unwrap();
        assert!(wl.value < 1e-6, "identity warp loss {}", wl.value);
    }

    #[test]
    fn plane_warp_agrees_with_analytic_intersection() {
        let scene = gen_synthetic(&GenConfig::new(Shape::Plane, 3, 128, 128, 11)).unwrap();
        let (ref_cam, src_cam) = (&scene.cameras[0], &scene.cameras[1]);
        let depth = &scene.gt_depth.as_ref().unwrap()[0];
        let map = SurfaceMap::from_depth_map(ref_cam, depth, 4);
        let (warped, mask) = warp_image(&scene.images[1], src_cam, &map);

        let mut checked = 0;
        for my in 0..map.height {
            for mx in 0..map.width {
                let i = map.idx(mx, my);
                if !map.valid[i] || !mask[i] {
                    continue;
                }
                // Independent geometry: intersect the stored pixel ray with
                // the analytic plane instead of trusting the depth value.
                let (u, v) = map.texel_pixel(mx, my);
                let px = u.round().clamp(0.0, 127.0);
                let py = v.round().clamp(0.0, 127.0);
                let ray = ref_cam.ray_through_pixel(px, py).unwrap();
                let t = (PLANE_Z - ray.origin.z) / ray.dir.z;
                let hit = ray.at(t);
                assert!((hit - map.points[i].coords).norm() < 1e-5);

                let proj = src_cam.project(&hit);
                assert!(!proj.behind);
                let (expected, ok) =
                    scene.images[1].sample_bilinear(proj.pixel[0], proj.pixel[1]);
                assert!(ok);
                let got = warped.texel(mx, my);
                for ch in 0..3 {
                    assert!((expected[ch] - got[ch] as f64).abs() < 1e-3);
                }
                checked += 1;
            }
        }
        assert!(checked > 200, "only {checked} texels checked");

        // Lambertian plane: the two views see the same surface colors, so
        // the warped source matches the warped reference up to bilinear
        // and 8-bit quantization error.
        let (ref_small, ref_mask) = warp_image(&scene.images[0], ref_cam, &map);
        let mut diff = 0.0;
        let mut count = 0;
        for i in 0..(map.width * map.height) as usize {
            if !(mask[i] && ref_mask[i]) {
                continue;
            }
            let (x, y) = (i as u32 % map.width, i as u32 / map.width);
            let a = warped.texel(x, y);
            let b = ref_small.texel(x, y);
            for ch in 0..3 {
                diff += (a[ch] - b[ch]).abs() as f64;
                count += 1;
            }
        }
        assert!(count > 600);
        let mean = diff / count as f64;
        assert!(mean < 0.01, "mean warp discrepancy {mean}");
    }

    #[test]
    fn points_behind_camera_are_masked() {
        let cam = Camera::look_at(
            Vector3::new(0.0, 0.0, 2.5),
            Vector3::zeros(),
            Vector3::new(0.0, 1.0, 0.0),
            60.0,
            16,
            16,
            0.1,
            10.0,
        )
        .unwrap();
        let source = rgb_image(16, 16, |_, _| [0.5; 3]);
        let mut map = SurfaceMap::invalid(2, 2, 16, 16);
        map.points[0] = Point3::new(0.0, 0.0, 0.0); // in front
        map.valid[0] = true;
        map.points[1] = Point3::new(0.0, 0.0, 4.0); // behind the eye
        map.valid[1] = true;

        let (_, mask) = warp_image(&source, &cam, &map);
        assert_eq!(mask, vec![true, false, false, false]);
    }

    #[test]
    fn unusable_views_lose_the_selection() {
        let scene = sphere_scene(5, 96, 13);
        let cam0 = &scene.cameras[0];
        let depth = &scene.gt_depth.as_ref().unwrap()[0];
        let map = SurfaceMap::from_depth_map(cam0, depth, 4);

        // A camera looking away from the scene warps everything behind.
        let pos = scene.cameras[2].t;
        let away = Camera::look_at(
            pos,
            pos * 2.0,
            Vector3::new(0.0, 1.0, 0.0),
            100.0,
            96,
            96,
            0.1,
            10.0,
        )
        .unwrap();

        let sources: Vec<(&Image, &Camera)> = vec![
            (&scene.images[1], &scene.cameras[1]),
            (&scene.images[2], &away),
            (&scene.images[3], &scene.cameras[3]),
            (&scene.images[4], &scene.cameras[4]),
        ];
        let n = sources.len();
        let wl = warping_loss(&scene.images[0], cam0, &sources, &map, n - 1).unwrap();
        assert!(wl.per_view[1].is_infinite());
        assert!(wl.value.is_finite(), "k = n-1 must skip the dead view");
        let all = warping_loss(&scene.images[0], cam0, &sources, &map, n).unwrap();
        assert!(all.value.is_infinite(), "k = n keeps the dead view");

        let dead: Vec<(&Image, &Camera)> =
            vec![(&scene.images[1], &away), (&scene.images[2], &away)];
        assert!(matches!(
            warping_loss(&scene.images[0], cam0, &dead, &map, 1),
            Err(LossError::AllViewsInvalid)
        ));
    }

    #[test]
    fn k_selection_means_the_smallest() {
        assert_relative_eq!(k_smallest_mean(&[0.3, 0.1, 0.2], 3), 0.2, epsilon = 1e-15);
        assert_relative_eq!(k_smallest_mean(&[0.3, 0.1, 0.2], 1), 0.1, epsilon = 1e-15);
        assert_relative_eq!(
            k_smallest_mean(&[0.3, f64::INFINITY, 0.1], 2),
            0.2,
            epsilon = 1e-15
        );

        // Dropping views never increases the loss.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let vals: Vec<f64> = (0..8).map(|_| rng.gen_range(0.0..2.0)).collect();
            for k in 1..vals.len() {
                assert!(
                    k_smallest_mean(&vals, k) <= k_smallest_mean(&vals, k + 1) + 1e-12
                );
            }
        }
    }

    #[test]
    fn warping_loss_is_order_invariant_and_bounded() {
        let scene = sphere_scene(5, 96, 17);
        let cam0 = &scene.cameras[0];
        let depth = &scene.gt_depth.as_ref().unwrap()[0];
        let map = SurfaceMap::from_depth_map(cam0, depth, 4);

        let order_a: Vec<(&Image, &Camera)> =
            (1..5).map(|i| (&scene.images[i], &scene.cameras[i])).collect();
        let order_b: Vec<(&Image, &Camera)> =
            [3, 1, 4, 2].iter().map(|&i| (&scene.images[i], &scene.cameras[i])).collect();

        let a = warping_loss(&scene.images[0], cam0, &order_a, &map, 2).unwrap();
        let b = warping_loss(&scene.images[0], cam0, &order_b, &map, 2).unwrap();
        assert_eq!(a.value.to_bits(), b.value.to_bits());
        for (i, &j) in [3usize, 1, 4, 2].iter().enumerate() {
            assert_eq!(a.per_view[j - 1].to_bits(), b.per_view[i].to_bits());
        }

        // Colors live in [0,1] and SSIM >= -1, so each per-view loss is in
        // [0, 0.8 + 0.2 * max|diff|] ⊆ [0, 1].
        for &v in &a.per_view {
            assert!((0.0..=1.0).contains(&v), "per-view loss {v} out of range");
        }

        // Two evaluations are bit-identical (parallel warp, stable sums).
        let again = warping_loss(&scene.images[0], cam0, &order_a, &map, 2).unwrap();
        assert_eq!(a.value.to_bits(), again.value.to_bits());
    }

    #[test]
    fn color_loss_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let rendered: Vec<Vector3<f64>> =
            (0..300).map(|_| Vector3::from_fn(|_, _| rng.gen_range(0.0..1.0))).collect();
        let observed: Vec<Vector3<f64>> =
            (0..300).map(|_| Vector3::from_fn(|_, _| rng.gen_range(0.0..1.0))).collect();
        let got = color_loss(&rendered, &observed).unwrap();

        let mut per_channel = [0.0; 3];
        for (r, o) in rendered.iter().zip(&observed) {
            for c in 0..3 {
                per_channel[c] += (r[c] - o[c]).abs();
            }
        }
        let expected = per_channel.iter().sum::<f64>() / 900.0;
        assert!((got - expected).abs() < 1e-12);

        assert!(matches!(color_loss(&[], &[]), Err(LossError::EmptySamples)));
        assert!(matches!(
            color_loss(&rendered, &observed[..10]),
            Err(LossError::MismatchedSamples(300, 10))
        ));
    }

    #[test]
    fn eikonal_loss_reference_fields() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let mut points = Vec::new();
        while points.len() < 400 {
            let p = Point3::new(
                rng.gen_range(-0.9..0.9),
                rng.gen_range(-0.9..0.9),
                rng.gen_range(-0.9..0.9),
            );
            // Keep clear of the sphere SDF's cone apex, where the continuum
            // gradient itself is undefined.
            if p.coords.norm() > 0.15 {
                points.push(p);
            }
        }

        let plane = grid_from_sdf(16, |p| p.z - 0.1);
        let f = MultiScaleSdf::new(vec![&plane]).unwrap();
        assert!(eikonal_loss(&f, &points).unwrap() < 1e-10);

        let constant = grid_from_sdf(8, |_| 0.3);
        let f = MultiScaleSdf::new(vec![&constant]).unwrap();
        assert!((eikonal_loss(&f, &points).unwrap() - 1.0).abs() < 1e-15);

        let sphere = grid_from_sdf(64, |p| Shape::Sphere.sdf(p));
        let f = MultiScaleSdf::new(vec![&sphere]).unwrap();
        let loss = eikonal_loss(&f, &points).unwrap();
        assert!(loss < 5e-3, "sphere discretization eikonal {loss}");

        assert!(matches!(eikonal_loss(&f, &[]), Err(LossError::EmptyPoints)));
    }

    #[test]
    fn pseudo_loss_matches_brute_force() {
        let sphere = grid_from_sdf(16, |p| Shape::Sphere.sdf(p));
        let f = MultiScaleSdf::new(vec![&sphere]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let points: Vec<Point3<f64>> = (0..200)
            .map(|_| {
                Point3::new(
                    rng.gen_range(-0.95..0.95),
                    rng.gen_range(-0.95..0.95),
                    rng.gen_range(-0.95..0.95),
                )
            })
            .collect();
        let got = pseudo_loss(&f, &points);
        let mut expected = 0.0;
        for &p in &points {
            expected += f.value(p).abs();
        }
        expected /= points.len() as f64;
        assert!((got - expected).abs() < 1e-12);
        assert_eq!(pseudo_loss(&f, &[]), 0.0);
    }

    #[test]
    fn regularizer_gradients_match_finite_differences() {
        let mut base = grid_from_sdf(8, |p| Shape::Sphere.sdf(p));
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let mut residual = grid_from_sdf(12, |_| 0.0);
        for v in residual.values_mut() {
            *v = rng.gen_range(-0.05..0.05);
        }

        let mut points = Vec::new();
        {
            let f = MultiScaleSdf::new(vec![&base, &residual]).unwrap();
            while points.len() < 40 {
                let p = Point3::new(
                    rng.gen_range(-0.85..0.85),
                    rng.gen_range(-0.85..0.85),
                    rng.gen_range(-0.85..0.85),
                );
                // |f| kinks at zero; keep probes away so central FD is clean.
                if p.coords.norm() > 0.2 && f.value(p).abs() > 1e-2 {
                    points.push(p);
                }
            }
        }

        let eik = |b: &SparseScalarGrid, r: &SparseScalarGrid| {
            let f = MultiScaleSdf::new(vec![b, r]).unwrap();
            eikonal_loss(&f, &points).unwrap()
        };
        let pse = |b: &SparseScalarGrid, r: &SparseScalarGrid| {
            let f = MultiScaleSdf::new(vec![b, r]).unwrap();
            pseudo_loss(&f, &points)
        };

        let (eik_grads, pse_grads) = {
            let f = MultiScaleSdf::new(vec![&base, &residual]).unwrap();
            let mut ge = f.zero_grads();
            eikonal_loss_backward(&f, &points, 1.0, &mut ge).unwrap();
            let mut gp = f.zero_grads();
            pseudo_loss_backward(&f, &points, 1.0, &mut gp);
            (ge, gp)
        };

        type LossFn<'a> = &'a dyn Fn(&SparseScalarGrid, &SparseScalarGrid) -> f64;
        let h = 1e-5;
        let mut probes = 0;
        for scale in 0..2 {
            let touched: Vec<usize> = eik_grads[scale]
                .iter()
                .enumerate()
                .filter(|(_, g)| g.abs() > 1e-6)
                .map(|(i, _)| i)
                .take(12)
                .collect();
            assert!(touched.len() >= 5, "scale {scale} has too few touched vertices");
            for vi in touched {
                let cases: [(&Vec<Vec<f64>>, LossFn); 2] =
                    [(&eik_grads, &eik), (&pse_grads, &pse)];
                for (grads, f) in cases {
                    let an = grads[scale][vi];
                    let bump = |b: &mut SparseScalarGrid, r: &mut SparseScalarGrid, d: f64| {
                        if scale == 0 {
                            b.values_mut()[vi] += d;
                        } else {
                            r.values_mut()[vi] += d;
                        }
                    };
                    bump(&mut base, &mut residual, h);
                    let fp = f(&base, &residual);
                    bump(&mut base, &mut residual, -2.0 * h);
                    let fm = f(&base, &residual);
                    bump(&mut base, &mut residual, h);
                    let fd = (fp - fm) / (2.0 * h);
                    assert!(
                        (fd - an).abs() <= 1e-4 * an.abs().max(1e-4),
                        "scale {scale} vertex {vi}: analytic {an} vs fd {fd}"
                    );
                    probes += 1;
                }
            }
        }
        assert!(probes >= 20, "only {probes} informative probes");
    }

    #[test]
    fn total_loss_combines_weighted_terms() {
        let weights = LossWeights::default();
        let terms = LossTerms {
            color: 0.1,
            mfc: 0.0,
            eikonal: 0.2,
            pseudo: 0.05,
            warping: vec![],
        };
        let report = total_loss(&terms, &weights).unwrap();
        assert_relative_eq!(report.surface, 0.17, epsilon = 1e-12);
        assert_relative_eq!(report.total, 0.17, epsilon = 1e-12);

        let terms = LossTerms { warping: vec![0.1, 0.2], ..terms };
        let report = total_loss(&terms, &weights).unwrap();
        assert_relative_eq!(report.matching, 0.25 * 0.1 + 0.5 * 0.2, epsilon = 1e-12);
        assert_relative_eq!(report.total, report.surface + report.matching, epsilon = 1e-12);

        let too_many = LossTerms { warping: vec![0.1; 5], ..terms.clone() };
        assert!(matches!(
            total_loss(&too_many, &weights),
            Err(LossError::MismatchedScales { terms: 5, weights: 4 })
        ));
    }

    #[test]
    fn weight_validation_and_view_count_defaults() {
        assert!(LossWeights::default().validate().is_ok());

        let negative = LossWeights { eikonal: -0.1, ..Default::default() };
        assert!(matches!(
            negative.validate(),
            Err(LossError::BadWeight { name: "eikonal", .. })
        ));

        let decreasing =
            LossWeights { warp_per_scale: vec![0.5, 0.25], ..Default::default() };
        assert!(matches!(
            decreasing.validate(),
            Err(LossError::DecreasingScaleWeights(_))
        ));

        let zero_k = LossWeights { warp_views: Some(0), ..Default::default() };
        assert!(matches!(zero_k.validate(), Err(LossError::BadViewCount(0))));

        let w = LossWeights::default();
        assert_eq!(w.warp_views_for(1), 1);
        assert_eq!(w.warp_views_for(4), 2);
        assert_eq!(w.warp_views_for(5), 3);
        assert_eq!(w.warp_views_for(9), 5);
        let fixed = LossWeights { warp_views: Some(3), ..Default::default() };
        assert_eq!(fixed.warp_views_for(9), 3);
    }
}
