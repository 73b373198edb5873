//! Run configuration: every schedule knob of the coarse-to-fine pipeline in
//! one flat struct, readable from a plain `key = value` text file.
//!
//! Recognized keys (all optional; omitted keys keep their defaults):
//!
//! ```text
//! scales            = 4                  # number of grid scales L
//! base_resolution   = 64                 # coarsest grid, cells per axis
//! eps_ratios        = 1,0.3,0.1,0.01     # region widths per scale, x extent
//! matching_counts   = 128,64,32,16       # localization samples per scale
//! render_counts     = 64,32,16,8         # render samples per scale region
//! rays_per_step     = 512
//! matching_steps    = 150,150,150,150    # matching updates per scale
//! sdf_steps         = 500,500,500,500    # SDF updates per scale
//! matching_lr       = 0.03
//! sdf_lr            = 0.005
//! eikonal_weight    = 0.1
//! pseudo_weight     = 1.0
//! mfc_weight        = 0.0
//! warp_weights      = 0.25,0.5,0.75,1.0  # per-scale warping loss weights
//! warp_views        = 3                  # best-K views kept (default N/2)
//! map_scale         = 4                  # surface maps at 1/4 resolution
//! tau               = 1.0                # localization softmax temperature
//! s_initial         = 8.0                # opacity sharpness at step 0
//! s_double_every    = 300                # steps per sharpness doubling
//! fusion            = uniform            # or: similarity
//! background        = 0.5,0.5,0.5       # matches the synthetic corpus mean
//! sdf_init          = sphere             # or: pseudo_points
//! seed              = 0
//! ```
//!
//! Lines starting with `#` and blank lines are ignored. Unknown or repeated
//! keys are errors that cite the offending line.

use std::collections::HashSet;
use std::path::Path;

use nalgebra::Vector3;
use thiserror::Error;

use crate::loss::LossWeights;
use crate::matching::{MatchingError, RegionSchedule};
use crate::pyramid::FusionMode;
use crate::render::RenderConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got {text:?}")]
    BadLine { line: usize, text: String },
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: duplicate key {key:?}")]
    DuplicateKey { line: usize, key: String },
    #[error("line {line}, key {key:?}: {msg}")]
    BadValue { line: usize, key: String, msg: String },
    #[error("key {key:?}: {msg}")]
    Invalid { key: &'static str, msg: String },
    #[error(transparent)]
    Schedule(#[from] MatchingError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// How the SDF grid starts before any optimization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SdfInit {
    /// Analytic sphere of radius 0.45 x extent around the bbox center.
    Sphere,
    /// Signed nearest-neighbor distance to the dataset's pseudo points.
    PseudoPoints,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct PipelineConfig {
    /// Number of grid scales; resolution doubles per scale.
    pub scales: usize,
    /// Cells per axis of the coarsest grid.
    pub base_resolution: u32,
    /// Surface-region width per scale as a fraction of the scene extent.
    /// The first entry is nominal: scale 1 always searches the whole ray.
    pub eps_ratios: Vec<f64>,
    /// Matching-field sample counts per scale.
    pub matching_counts: Vec<usize>,
    /// Render sample counts per scale region.
    pub render_counts: Vec<usize>,
    pub rays_per_step: usize,
    pub matching_steps: Vec<usize>,
    pub sdf_steps: Vec<usize>,
    pub matching_lr: f64,
    pub sdf_lr: f64,
    pub weights: LossWeights,
    /// Surface maps are built at 1/map_scale of image resolution.
    pub map_scale: u32,
    /// Softmax temperature of surface localization.
    pub tau: f64,
    /// Opacity sharpness at step 0; doubles every `s_double_every` steps.
    pub s_initial: f64,
    pub s_double_every: f64,
    pub fusion: FusionMode,
    pub background: [f64; 3],
    pub sdf_init: SdfInit,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            scales: 4,
            base_resolution: 64,
            eps_ratios: vec![1.0, 0.3, 0.1, 0.01],
            matching_counts: vec![128, 64, 32, 16],
            render_counts: vec![64, 32, 16, 8],
            rays_per_step: 512,
            matching_steps: vec![150; 4],
            sdf_steps: vec![500; 4],
            matching_lr: 0.03,
            sdf_lr: 0.005,
            weights: LossWeights::default(),
            map_scale: 4,
            tau: 1.0,
            s_initial: 8.0,
            s_double_every: 300.0,
            fusion: FusionMode::Uniform,
            background: [0.5; 3],
            sdf_init: SdfInit::Sphere,
            seed: 0,
        }
    }
}

fn invalid(key: &'static str, msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { key, msg: msg.into() }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.scales == 0 {
            return Err(invalid("scales", "must be at least 1".to_string()));
        }
        let per_scale: [(&'static str, usize); 5] = [
            ("eps_ratios", self.eps_ratios.len()),
            ("matching_counts", self.matching_counts.len()),
            ("render_counts", self.render_counts.len()),
            ("matching_steps", self.matching_steps.len()),
            ("sdf_steps", self.sdf_steps.len()),
        ];
        for (key, len) in per_scale {
            if len != self.scales {
                return Err(invalid(key, format!("needs {} entries, got {len}", self.scales)));
            }
        }
        if self.weights.warp_per_scale.len() != self.scales {
            return Err(invalid(
                "warp_weights",
                format!("needs {} entries, got {}", self.scales, self.weights.warp_per_scale.len()),
            ));
        }
        self.weights.validate().map_err(|e| invalid("weights", e.to_string()))?;
        // Schedule construction re-checks monotone widths and counts >= 2.
        self.region_schedule()?;
        if self.base_resolution < 2 {
            return Err(invalid("base_resolution", "needs at least 2 cells per axis"));
        }
        if self.rays_per_step == 0 {
            return Err(invalid("rays_per_step", "must be positive"));
        }
        if self.render_counts.iter().any(|&c| c == 0) {
            return Err(invalid("render_counts", "counts must be positive"));
        }
        if self.map_scale == 0 {
            return Err(invalid("map_scale", "must be at least 1"));
        }
        for (key, v) in [
            ("matching_lr", self.matching_lr),
            ("sdf_lr", self.sdf_lr),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(invalid(key, format!("must be finite and >= 0, got {v}")));
            }
        }
        for (key, v) in [
            ("tau", self.tau),
            ("s_initial", self.s_initial),
            ("s_double_every", self.s_double_every),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(invalid(key, format!("must be finite and positive, got {v}")));
            }
        }
        Ok(())
    }

    /// Grid vertices per axis at 1-based scale `j`.
    pub fn resolution_at(&self, scale: usize) -> u32 {
        self.base_resolution << (scale - 1)
    }

    /// Total render samples per ray when every scale region is present.
    pub fn total_render_samples(&self) -> usize {
        self.render_counts.iter().sum()
    }

    pub fn region_schedule(&self) -> Result<RegionSchedule, MatchingError> {
        RegionSchedule::new(self.matching_counts.clone(), self.eps_ratios.clone())
    }

    pub fn render_config(&self, s: f64, scales_present: usize) -> RenderConfig {
        RenderConfig {
            sample_counts: self.render_counts[..scales_present].to_vec(),
            s,
            background: self.background_vec(),
            blend: self.fusion,
        }
    }

    pub fn background_vec(&self) -> Vector3<f64> {
        Vector3::from_row_slice(&self.background)
    }

    pub fn from_file(path: &Path) -> Result<PipelineConfig, ConfigError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn parse(text: &str) -> Result<PipelineConfig, ConfigError> {
        let mut cfg = PipelineConfig::default();
        let mut seen: HashSet<String> = HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            // Strip trailing comments, then whitespace.
            let stripped = raw.split('#').next().unwrap_or("").trim();
            if stripped.is_empty() {
                continue;
            }
            let Some((key, value)) = stripped.split_once('=') else {
                return Err(ConfigError::BadLine { line, text: raw.trim().to_string() });
            };
            let key = key.trim();
            let value = value.trim();
            if !seen.insert(key.to_string()) {
                return Err(ConfigError::DuplicateKey { line, key: key.to_string() });
            }
            cfg.apply(line, key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, line: usize, key: &str, value: &str) -> Result<(), ConfigError> {
        let bad = |msg: String| ConfigError::BadValue { line, key: key.to_string(), msg };
        fn scalar<T: std::str::FromStr>(value: &str) -> Result<T, String> {
            value.parse::<T>().map_err(|_| format!("cannot parse {value:?}"))
        }
        fn list<T: std::str::FromStr>(value: &str) -> Result<Vec<T>, String> {
            value
                .split(',')
                .map(str::trim)
                .map(|w| w.parse::<T>().map_err(|_| format!("cannot parse entry {w:?}")))
                .collect()
        }
        match key {
            "scales" => self.scales = scalar(value).map_err(bad)?,
            "base_resolution" => self.base_resolution = scalar(value).map_err(bad)?,
            "eps_ratios" => self.eps_ratios = list(value).map_err(bad)?,
            "matching_counts" => self.matching_counts = list(value).map_err(bad)?,
            "render_counts" => self.render_counts = list(value).map_err(bad)?,
            "rays_per_step" => self.rays_per_step = scalar(value).map_err(bad)?,
            "matching_steps" => self.matching_steps = list(value).map_err(bad)?,
            "sdf_steps" => self.sdf_steps = list(value).map_err(bad)?,
            "matching_lr" => self.matching_lr = scalar(value).map_err(bad)?,
            "sdf_lr" => self.sdf_lr = scalar(value).map_err(bad)?,
            "eikonal_weight" => self.weights.eikonal = scalar(value).map_err(bad)?,
            "pseudo_weight" => self.weights.pseudo = scalar(value).map_err(bad)?,
            "mfc_weight" => self.weights.mfc = scalar(value).map_err(bad)?,
            "warp_weights" => self.weights.warp_per_scale = list(value).map_err(bad)?,
            "warp_views" => self.weights.warp_views = Some(scalar(value).map_err(bad)?),
            "map_scale" => self.map_scale = scalar(value).map_err(bad)?,
            "tau" => self.tau = scalar(value).map_err(bad)?,
            "s_initial" => self.s_initial = scalar(value).map_err(bad)?,
            "s_double_every" => self.s_double_every = scalar(value).map_err(bad)?,
            "fusion" => {
                self.fusion = match value {
                    "uniform" => FusionMode::Uniform,
                    "similarity" => FusionMode::Similarity,
                    other => return Err(bad(format!("expected uniform or similarity, got {other:?}"))),
                }
            }
            "background" => {
                let v: Vec<f64> = list(value).map_err(bad)?;
                let arr: [f64; 3] =
                    v.try_into().map_err(|v: Vec<f64>| bad(format!("needs 3 entries, got {}", v.len())))?;
                self.background = arr;
            }
            "sdf_init" => {
                self.sdf_init = match value {
                    "sphere" => SdfInit::Sphere,
                    "pseudo_points" => SdfInit::PseudoPoints,
                    other => return Err(bad(format!("expected sphere or pseudo_points, got {other:?}"))),
                }
            }
            "seed" => self.seed = scalar(value).map_err(bad)?,
            _ => return Err(ConfigError::UnknownKey { line, key: key.to_string() }),
        }
        Ok(())
    }
}
