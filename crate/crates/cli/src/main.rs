//! `voxrec`: generate synthetic scenes, reconstruct them, and inspect the
//! results. Every subcommand is deterministic for a fixed `--seed` and every
//! file write is atomic, so an interrupted run never leaves a half-written
//! snapshot behind.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use voxrec_core::config::PipelineConfig;
use voxrec_core::formats::{load_ply, save_png_rgb8, write_atomic};
use voxrec_core::matching::SurfaceRegion;
use voxrec_core::mesh::{chamfer, marching_cubes, sample_mesh, Mesh};
use voxrec_core::optim::run_pipeline;
use voxrec_core::render::{render_image, MultiScaleSdf, RenderConfig, RenderViews};
use voxrec_core::scene::{gen_synthetic, GenConfig};
use voxrec_core::{SceneDataset, Shape, SparseScalarGrid};

#[derive(Parser)]
#[command(name = "voxrec", version, about = "Sparse-voxel multi-view surface reconstruction")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic calibrated scene with ground truth.
    Gen {
        /// Shape to render: sphere, cube, or two_planes.
        #[arg(long)]
        shape: String,
        #[arg(long)]
        views: u32,
        /// Image resolution as WxH, e.g. 256x256.
        #[arg(long)]
        res: String,
        #[arg(long)]
        out: PathBuf,
        /// Texture and sampling seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Reconstruct a scene directory into a mesh plus grid snapshots.
    Reconstruct {
        #[arg(long)]
        scene: PathBuf,
        /// Flat key=value config file; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Use only the first N views of the scene.
        #[arg(long)]
        views: Option<usize>,
    },
    /// Extract the zero level set of saved grid snapshots as a mesh.
    ExtractMesh {
        /// Directory holding scale1.ssgv, scale2.ssgv, ...
        #[arg(long)]
        grids: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render one calibrated view of saved grid snapshots.
    Render {
        #[arg(long)]
        grids: PathBuf,
        /// Scene directory providing the cameras and source images.
        #[arg(long)]
        scene: PathBuf,
        /// View index to render.
        #[arg(long)]
        view: usize,
        #[arg(long)]
        out: PathBuf,
        /// Sigmoid sharpness of the render.
        #[arg(long, default_value_t = 64.0)]
        sharpness: f64,
    },
    /// Chamfer distance between a mesh and a reference point cloud.
    EvalChamfer {
        #[arg(long)]
        mesh: PathBuf,
        /// Reference point cloud (PLY).
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Surface samples drawn from the mesh.
        #[arg(long, default_value_t = 50_000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Per-scale occupancy and byte footprint of saved grid snapshots.
    ReportOccupancy {
        #[arg(long)]
        grids: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Gen { shape, views, res, out, seed } => {
            let shape = Shape::parse(&shape)?;
            let (w, h) = parse_res(&res)?;
            let data = gen_synthetic(&GenConfig::new(shape, views, w, h, seed))?;
            data.save(&out)?;
            println!("wrote {} {} views to {}", data.view_count(), shape.name(), out.display());
        }
        Cmd::Reconstruct { scene, config, out, seed, views } => {
            let mut data =
                SceneDataset::load(&scene).with_context(|| format!("loading {}", scene.display()))?;
            if let Some(n) = views {
                if n > data.view_count() {
                    bail!("--views {n} exceeds the {} views in the scene", data.view_count());
                }
                data = data.take_views(n);
            }
            let mut cfg = match &config {
                Some(p) => PipelineConfig::from_file(p)
                    .with_context(|| format!("loading {}", p.display()))?,
                None => PipelineConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let started = Instant::now();
            let result = run_pipeline(&cfg, &data, Some(&out))?;
            let finest = result.sdf_grids.last().expect("pipeline returns >= 1 scale");
            let finest_spec = *finest.spec();
            let field = MultiScaleSdf::new(result.sdf_grids.iter().collect())?;
            let mesh = marching_cubes(&field, &finest_spec, 0.0);
            drop(field);
            mesh.save_ply(&out.join("mesh.ply"))?;
            let report = serde_json::json!({
                "config": cfg,
                "views": data.view_count(),
                "steps": result.records.len(),
                "final": result.records.last(),
                "occupancy": occupancy_rows(&result.sdf_grids),
                "mesh": {
                    "vertices": mesh.vertices.len(),
                    "triangles": mesh.triangles.len(),
                },
                "elapsed_s": started.elapsed().as_secs_f64(),
            });
            write_json(&out.join("report.json"), &report)?;
            println!(
                "reconstructed {} scales, {} triangles, {:.1}s -> {}",
                result.sdf_grids.len(),
                mesh.triangles.len(),
                started.elapsed().as_secs_f64(),
                out.display()
            );
        }
        Cmd::ExtractMesh { grids, out } => {
            let grids = load_grids(&grids)?;
            let field = MultiScaleSdf::new(grids.iter().collect())?;
            let mesh = marching_cubes(&field, grids.last().unwrap().spec(), 0.0);
            if mesh.is_empty() {
                bail!("the zero level set is empty; nothing to extract");
            }
            mesh.save_ply(&out)?;
            println!("{} vertices, {} triangles -> {}", mesh.vertices.len(), mesh.triangles.len(), out.display());
        }
        Cmd::Render { grids, scene, view, out, sharpness } => {
            let grids = load_grids(&grids)?;
            let data = SceneDataset::load(&scene)?;
            let cam = data
                .cameras
                .get(view)
                .with_context(|| format!("view {view} of {} views", data.view_count()))?;
            let field = MultiScaleSdf::new(grids.iter().collect())?;
            let views = RenderViews { cameras: &data.cameras, images: &data.images, pyramids: None };
            let cfg = RenderConfig {
                sample_counts: vec![120],
                s: sharpness,
                background: nalgebra::Vector3::new(0.5, 0.5, 0.5),
                blend: voxrec_core::pyramid::FusionMode::Uniform,
            };
            cfg.validate()?;
            let img = render_image(&field, &views, cam, &cfg, |_, _, ray| {
                vec![SurfaceRegion::full(ray)]
            });
            save_png_rgb8(&out, &img)?;
            println!("rendered view {view} -> {}", out.display());
        }
        Cmd::EvalChamfer { mesh, reference, out, samples, seed } => {
            let (vertices, triangles) = load_ply(&mesh)?;
            let mesh = Mesh { vertices, triangles };
            let from_mesh = if mesh.triangles.is_empty() {
                mesh.vertices.clone()
            } else {
                sample_mesh(&mesh, samples, seed)?
            };
            let (reference, _) = load_ply(&reference)?;
            let report = chamfer(&from_mesh, &reference)?;
            write_json(&out, &serde_json::to_value(report)?)?;
            println!(
                "accuracy {:.6}  completeness {:.6}  overall {:.6}",
                report.accuracy, report.completeness, report.overall
            );
        }
        Cmd::ReportOccupancy { grids, out } => {
            let grids = load_grids(&grids)?;
            let volume_bytes: u64 = grids.iter().map(|g| g.occupancy_report().bytes).sum();
            let report = serde_json::json!({
                "scales": occupancy_rows(&grids),
                "volume_bytes": volume_bytes,
            });
            write_json(&out, &report)?;
            println!("{} scales, {volume_bytes} volume bytes -> {}", grids.len(), out.display());
        }
    }
    Ok(())
}

fn parse_res(res: &str) -> Result<(u32, u32)> {
    let (w, h) = res.split_once(['x', 'X']).context("--res must look like 256x256")?;
    Ok((
        w.trim().parse().with_context(|| format!("bad width {w:?}"))?,
        h.trim().parse().with_context(|| format!("bad height {h:?}"))?,
    ))
}

/// Loads `scale1.ssgv`, `scale2.ssgv`, ... until a gap.
fn load_grids(dir: &Path) -> Result<Vec<SparseScalarGrid>> {
    let mut grids = Vec::new();
    loop {
        let path = dir.join(format!("scale{}.ssgv", grids.len() + 1));
        if !path.exists() {
            break;
        }
        grids.push(
            SparseScalarGrid::load_snapshot(&path)
                .with_context(|| format!("loading {}", path.display()))?,
        );
    }
    if grids.is_empty() {
        bail!("no scale1.ssgv under {}", dir.display());
    }
    Ok(grids)
}

fn occupancy_rows(grids: &[SparseScalarGrid]) -> Vec<serde_json::Value> {
    grids
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let r = g.occupancy_report();
            serde_json::json!({
                "scale": i + 1,
                "resolution": g.spec().resolution,
                "active_cells": r.active,
                "total_cells": r.total,
                "fraction": r.fraction,
                "bytes": r.bytes,
            })
        })
        .collect()
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    write_atomic(path, |f| writeln!(f, "{text}"))?;
    Ok(())
}
