//! Multi-resolution feature pyramids and cross-view feature fusion.
//!
//! Each pyramid level stores a handcrafted 6-channel feature image — RGB,
//! finite-difference gradient magnitudes along x and y, and luminance —
//! computed at that level's resolution. Level `L` is full resolution and
//! level `j` has resolution `ceil(dim / 2^(L-j))`, produced by repeated 2x2
//! box-filter downsampling (edge blocks average the texels they actually
//! cover). A pixel's multi-scale feature is the sum of bilinear samples over
//! all levels, treating finer levels as detail residuals on coarser ones.

use crate::geometry::Image;
use thiserror::Error;

/// Channels per feature image: RGB, |d/dx|, |d/dy|, luminance.
pub const FEATURE_CHANNELS: u32 = 6;

#[derive(Debug, Error)]
pub enum PyramidError {
    #[error("pyramid needs at least one level")]
    NoLevels,
    #[error("expected an RGB or grayscale image, got {0} channels")]
    BadChannelCount(u32),
    #[error("feature fusion needs at least one view")]
    NoViews,
    #[error("fusion weights must form a probability simplex (sum {0})")]
    BadWeights(f64),
}

/// Feature pyramid of one view, coarsest level first.
#[derive(Debug, Clone)]
pub struct ImagePyramid {
    pub levels: Vec<Image>,
}

/// Weighted first and second moments of per-view features, one entry per
/// channel.
#[derive(Debug, Clone)]
pub struct FusedFeature {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

/// How per-view fusion weights are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum FusionMode {
    /// Every contributing view weighs `1/N`.
    Uniform,
    /// Softmax over negative L2 distance to the unweighted mean, so outlier
    /// views are down-weighted.
    Similarity,
}

/// Builds the feature pyramid of an RGB (or grayscale, replicated) image.
pub fn build_pyramid(image: &Image, levels: u32) -> Result<ImagePyramid, PyramidError> {
    if levels == 0 {
        return Err(PyramidError::NoLevels);
    }
    let rgb = match image.channels {
        3 => image.clone(),
        1 => {
            let mut out = Image::new(image.width, image.height, 3).expect("shape checked");
            for y in 0..image.height {
                for x in 0..image.width {
                    let g = image.get(x, y, 0);
                    for c in 0..3 {
                        out.set(x, y, c, g);
                    }
                }
            }
            out
        }
        c => return Err(PyramidError::BadChannelCount(c)),
    };

    let mut rgb_chain = vec![rgb];
    for _ in 1..levels {
        let next = box_downsample(rgb_chain.last().expect("non-empty"));
        rgb_chain.push(next);
    }
    rgb_chain.reverse(); // coarsest first
    Ok(ImagePyramid { levels: rgb_chain.iter().map(features_of).collect() })
}

impl ImagePyramid {
    pub fn level_count(&self) -> u32 {
        self.levels.len() as u32
    }

    /// Sum of bilinear feature samples over all levels at a full-resolution
    /// pixel coordinate. Coarser-level coordinates are center-aligned
    /// rescalings and clamp at level borders; returns false (zeroing `out`)
    /// only when the full-resolution coordinate itself is out of bounds.
    pub fn sample_residual_features_into(&self, u: f64, v: f64, out: &mut [f64]) -> bool {
        assert_eq!(out.len(), FEATURE_CHANNELS as usize);
        out.fill(0.0);
        let full = self.levels.last().expect("non-empty pyramid");
        if !full.in_bilinear_bounds(u, v) {
            return false;
        }
        let (fw, fh) = (full.width as f64, full.height as f64);
        let mut tmp = [0.0f64; FEATURE_CHANNELS as usize];
        for level in &self.levels {
            let lu = (u + 0.5) * (level.width as f64 / fw) - 0.5;
            let lv = (v + 0.5) * (level.height as f64 / fh) - 0.5;
            let lu = lu.clamp(0.0, (level.width - 1) as f64);
            let lv = lv.clamp(0.0, (level.height - 1) as f64);
            level.sample_bilinear_into(lu, lv, &mut tmp);
            for c in 0..out.len() {
                out[c] += tmp[c];
            }
        }
        true
    }

    pub fn sample_residual_features(&self, u: f64, v: f64) -> (Vec<f64>, bool) {
        let mut out = vec![0.0; FEATURE_CHANNELS as usize];
        let ok = self.sample_residual_features_into(u, v, &mut out);
        (out, ok)
    }
}

fn box_downsample(src: &Image) -> Image {
    let dw = src.width.div_ceil(2);
    let dh = src.height.div_ceil(2);
    let mut dst = Image::new(dw, dh, src.channels).expect("non-degenerate");
    for y in 0..dh {
        for x in 0..dw {
            let x1 = (2 * x + 1).min(src.width - 1);
            let y1 = (2 * y + 1).min(src.height - 1);
            let xs = if x1 > 2 * x { 2 } else { 1 };
            let ys = if y1 > 2 * y { 2 } else { 1 };
            let norm = 1.0 / (xs * ys) as f32;
            for c in 0..src.channels {
                let mut acc = 0.0f32;
                for sy in (2 * y)..=y1 {
                    for sx in (2 * x)..=x1 {
                        acc += src.get(sx, sy, c);
                    }
                }
                dst.set(x, y, c, acc * norm);
            }
        }
    }
    dst
}

fn features_of(rgb: &Image) -> Image {
    let (w, h) = (rgb.width, rgb.height);
    let mut out = Image::new(w, h, FEATURE_CHANNELS).expect("non-degenerate");
    for y in 0..h {
        for x in 0..w {
            let t = rgb.texel(x, y);
            let (mut gx2, mut gy2) = (0.0f64, 0.0f64);
            for c in 0..3 {
                gx2 += diff_along(rgb, x, y, c, true).powi(2);
                gy2 += diff_along(rgb, x, y, c, false).powi(2);
            }
            out.set(x, y, 0, t[0]);
            out.set(x, y, 1, t[1]);
            out.set(x, y, 2, t[2]);
            out.set(x, y, 3, gx2.sqrt() as f32);
            out.set(x, y, 4, gy2.sqrt() as f32);
            let luma = 0.2126 * t[0] + 0.7152 * t[1] + 0.0722 * t[2];
            out.set(x, y, 5, luma);
        }
    }
    out
}

/// Central difference along one axis, one-sided at the borders.
fn diff_along(img: &Image, x: u32, y: u32, c: u32, along_x: bool) -> f64 {
    let (dim, pos) = if along_x { (img.width, x) } else { (img.height, y) };
    let lo = pos.saturating_sub(1);
    let hi = (pos + 1).min(dim - 1);
    if hi == lo {
        return 0.0;
    }
    let read = |p: u32| -> f64 {
        if along_x {
            img.get(p, y, c) as f64
        } else {
            img.get(x, p, c) as f64
        }
    };
    (read(hi) - read(lo)) / (hi - lo) as f64
}

/// Per-view fusion weights for a set of per-view feature vectors.
pub fn fusion_weights(features: &[Vec<f64>], mode: FusionMode) -> Result<Vec<f64>, PyramidError> {
    if features.is_empty() {
        return Err(PyramidError::NoViews);
    }
    let n = features.len();
    match mode {
        FusionMode::Uniform => Ok(vec![1.0 / n as f64; n]),
        FusionMode::Similarity => {
            let dim = features[0].len();
            let mut mean = vec![0.0; dim];
            for f in features {
                for (m, v) in mean.iter_mut().zip(f) {
                    *m += v / n as f64;
                }
            }
            let dists: Vec<f64> = features
                .iter()
                .map(|f| {
                    f.iter().zip(&mean).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
                })
                .collect();
            let max_neg = dists.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = dists.iter().map(|d| (max_neg - d).exp()).collect();
            let total: f64 = exps.iter().sum();
            Ok(exps.into_iter().map(|e| e / total).collect())
        }
    }
}

/// Weighted mean and variance across views, per channel.
pub fn fuse_views(features: &[Vec<f64>], weights: &[f64]) -> Result<FusedFeature, PyramidError> {
    if features.is_empty() {
        return Err(PyramidError::NoViews);
    }
    assert_eq!(features.len(), weights.len());
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > 1e-6 || weights.iter().any(|&w| w < 0.0) {
        return Err(PyramidError::BadWeights(sum));
    }
    let dim = features[0].len();
    let mut mean = vec![0.0; dim];
    for (f, &w) in features.iter().zip(weights) {
        assert_eq!(f.len(), dim);
        for (m, v) in mean.iter_mut().zip(f) {
            *m += w * v;
        }
    }
    let mut variance = vec![0.0; dim];
    for (f, &w) in features.iter().zip(weights) {
        for ((var, v), m) in variance.iter_mut().zip(f).zip(&mean) {
            *var += w * (v - m).powi(2);
        }
    }
    Ok(FusedFeature { mean, variance })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn noise_image(w: u32, h: u32, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut img = Image::new(w, h, 3).unwrap();
        for v in img.data.iter_mut() {
            *v = rng.gen_range(0.0..1.0);
        }
        img
    }

    #[test]
    fn level_resolutions_follow_ceil_halving() {
        let img = noise_image(8, 8, 1);
        let pyr = build_pyramid(&img, 4).unwrap();
        let dims: Vec<u32> = pyr.levels.iter().map(|l| l.width).collect();
        assert_eq!(dims, vec![1, 2, 4, 8]);
        let pyr = build_pyramid(&noise_image(10, 6, 2), 3).unwrap();
        let dims: Vec<(u32, u32)> = pyr.levels.iter().map(|l| (l.width, l.height)).collect();
        assert_eq!(dims, vec![(3, 2), (5, 3), (10, 6)]);
    }

    #[test]
    fn constant_gray_image_has_zero_gradient_channels() {
        let img = Image::constant(16, 16, 3, 0.5);
        let pyr = build_pyramid(&img, 4).unwrap();
        for level in &pyr.levels {
            for y in 0..level.height {
                for x in 0..level.width {
                    assert_eq!(level.get(x, y, 3), 0.0);
                    assert_eq!(level.get(x, y, 4), 0.0);
                }
            }
        }
    }

    #[test]
    fn constant_image_features_are_pixel_independent() {
        let img = Image::constant(16, 16, 3, 0.25);
        let pyr = build_pyramid(&img, 3).unwrap();
        let (base, ok) = pyr.sample_residual_features(4.2, 7.9);
        assert!(ok);
        for &(u, v) in &[(0.0, 0.0), (15.0, 15.0), (8.5, 3.25)] {
            let (f, ok) = pyr.sample_residual_features(u, v);
            assert!(ok);
            for c in 0..f.len() {
                assert!((f[c] - base[c]).abs() < 1e-9);
            }
        }
        // Three levels of a constant image stack to 3x the per-level feature.
        assert!((base[0] - 3.0 * 0.25).abs() < 1e-6);
    }

    #[test]
    fn smooth_ramp_survives_down_up_round_trip() {
        let mut img = Image::new(32, 32, 3).unwrap();
        for y in 0..32 {
            for x in 0..32 {
                for c in 0..3 {
                    img.set(x, y, c, (x as f32 + y as f32) / 64.0);
                }
            }
        }
        let down = box_downsample(&img);
        // Upsample by bilinear lookup at center-aligned coordinates.
        let mut worst = 0.0f64;
        for y in 0..32 {
            for x in 0..32 {
                let lu = (x as f64 + 0.5) * (down.width as f64 / 32.0) - 0.5;
                let lv = (y as f64 + 0.5) * (down.height as f64 / 32.0) - 0.5;
                let (s, _) =
                    down.sample_bilinear(lu.clamp(0.0, 15.0), lv.clamp(0.0, 15.0));
                for c in 0..3u32 {
                    worst = worst.max((s[c as usize] - img.get(x, y, c) as f64).abs());
                }
            }
        }
        assert!(worst < 0.02, "round-trip error {worst}");
    }

    #[test]
    fn single_level_pyramid_equals_feature_bilinear() {
        let img = noise_image(12, 9, 3);
        let pyr = build_pyramid(&img, 1).unwrap();
        let feats = features_of(&img);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let u = rng.gen_range(0.0..11.0);
            let v = rng.gen_range(0.0..8.0);
            let (a, ok_a) = pyr.sample_residual_features(u, v);
            let (b, ok_b) = feats.sample_bilinear(u, v);
            assert_eq!(ok_a, ok_b);
            for c in 0..a.len() {
                assert!((a[c] - b[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn residual_sum_matches_direct_per_level_oracle() {
        let img = noise_image(33, 21, 5);
        let pyr = build_pyramid(&img, 4).unwrap();
        let full = pyr.levels.last().unwrap();
        let (fw, fh) = (full.width as f64, full.height as f64);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..500 {
            let u = rng.gen_range(0.0..fw - 1.0);
            let v = rng.gen_range(0.0..fh - 1.0);
            let (got, ok) = pyr.sample_residual_features(u, v);
            assert!(ok);
            // Oracle: explicit per-level bilinear sum with its own rescale.
            let mut want = vec![0.0f64; FEATURE_CHANNELS as usize];
            for level in &pyr.levels {
                let lu = ((u + 0.5) * level.width as f64 / fw - 0.5)
                    .clamp(0.0, (level.width - 1) as f64);
                let lv = ((v + 0.5) * level.height as f64 / fh - 0.5)
                    .clamp(0.0, (level.height - 1) as f64);
                let (s, _) = level.sample_bilinear(lu, lv);
                for c in 0..want.len() {
                    want[c] += s[c];
                }
            }
            for c in 0..want.len() {
                assert!((got[c] - want[c]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn single_view_fusion_is_trivial() {
        let f = vec![vec![0.3, -0.7, 2.0]];
        let w = fusion_weights(&f, FusionMode::Uniform).unwrap();
        assert_eq!(w, vec![1.0]);
        let fused = fuse_views(&f, &w).unwrap();
        assert_eq!(fused.mean, f[0]);
        assert!(fused.variance.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fusion_matches_moment_formulas() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let n = rng.gen_range(2..6);
            let dim = 4;
            let feats: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect())
                .collect();
            let mut w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..1.0)).collect();
            let s: f64 = w.iter().sum();
            w.iter_mut().for_each(|x| *x /= s);
            let fused = fuse_views(&feats, &w).unwrap();
            for c in 0..dim {
                let mean: f64 = feats.iter().zip(&w).map(|(f, &wi)| wi * f[c]).sum();
                let var: f64 =
                    feats.iter().zip(&w).map(|(f, &wi)| wi * (f[c] - mean).powi(2)).sum();
                assert!((fused.mean[c] - mean).abs() < 1e-12);
                assert!((fused.variance[c] - var).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn similarity_mode_downweights_outlier() {
        let feats = vec![
            vec![1.0, 1.0, 1.0],
            vec![1.0, 1.0, 1.0],
            vec![-1.0, 2.0, 0.0], // outlier
        ];
        let w = fusion_weights(&feats, FusionMode::Similarity).unwrap();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(w[2] < 1.0 / 3.0, "outlier weight {} not below uniform", w[2]);
        assert!(w[0] > w[2] && w[1] > w[2]);
        assert!((w[0] - w[1]).abs() < 1e-12);
    }

    #[test]
    fn fusion_rejects_bad_inputs() {
        assert!(fuse_views(&[], &[]).is_err());
        let feats = vec![vec![1.0], vec![2.0]];
        assert!(fuse_views(&feats, &[0.9, 0.3]).is_err());
    }

    #[test]
    fn fusion_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let feats: Vec<Vec<f64>> =
            (0..5).map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let w = fusion_weights(&feats, FusionMode::Similarity).unwrap();
        let fused = fuse_views(&feats, &w).unwrap();

        let perm = [3usize, 0, 4, 1, 2];
        let pf: Vec<Vec<f64>> = perm.iter().map(|&i| feats[i].clone()).collect();
        let pw = fusion_weights(&pf, FusionMode::Similarity).unwrap();
        let pfused = fuse_views(&pf, &pw).unwrap();
        for c in 0..3 {
            assert!((fused.mean[c] - pfused.mean[c]).abs() < 1e-12);
            assert!((fused.variance[c] - pfused.variance[c]).abs() < 1e-12);
        }
        for (i, &p) in perm.iter().enumerate() {
            assert!((pw[i] - w[p]).abs() < 1e-12);
        }
    }
}
