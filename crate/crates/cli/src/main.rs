//! Command-line driver: scene generation, training, mesh export, and
//! mesh-based evaluation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use splatmesh::eval::{chamfer, f1_score, fit_color_field, mesh_nvs_psnr, MeshStats, MetricsReport};
use splatmesh::meshing::{export_mesh, import_mesh, interior_components, MeshFormat};
use splatmesh::optim::{parse_kv_file, train, write_loss_csv, TrainConfig};
use splatmesh::pivots::sample_pivots;
use splatmesh::render::{dump_color_png, dump_depth_png, dump_normal_png, render_gaussians};
use splatmesh::scene::{
    load_scene, make_synthetic_scene, parse_shape, save_cameras, save_scene, Camera,
    SyntheticScene,
};

/// Every 8th view is held out for mesh-based novel view synthesis.
const TEST_VIEW_STRIDE: usize = 8;
const COLOR_GRID_N: usize = 64;
const COLOR_FIT_ITERS: usize = 2000;
const CHAMFER_SAMPLES: usize = 20000;
/// F1 threshold as a fraction of the ground-truth shape radius.
const F1_THRESHOLD_SCALE: f64 = 0.02;

#[derive(Parser)]
#[command(
    name = "splatmesh",
    about = "Gaussian splatting surface reconstruction with an in-training mesh"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full pipeline from a config file.
    Run { config: PathBuf },
    /// Evaluate a mesh against a run directory (color field + metrics).
    Eval {
        #[arg(long)]
        mesh: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        /// Output path for the metrics JSON (default: <scene>/eval_metrics.json).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Extract and export a mesh from a scene checkpoint.
    Export {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "ply")]
        format: String,
    },
}

/// Scene-generation keys; everything else in the config file belongs to
/// TrainConfig.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct SceneSpec {
    shape: String,
    n_gaussians: usize,
    n_cameras: usize,
    resolution: usize,
    seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            shape: "sphere 1.0".into(),
            n_gaussians: 300,
            n_cameras: 16,
            resolution: 64,
            seed: 0,
        }
    }
}

#[derive(Serialize)]
struct RunManifest {
    config: BTreeMap<String, String>,
    seed: u64,
    git_describe: String,
    timings_sec: BTreeMap<String, f64>,
    outputs: BTreeMap<String, String>,
}

fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .unwrap_or_else(|| "unknown".into())
}

fn output_root() -> PathBuf {
    std::env::var_os("SPLATMESH_OUTPUT_ROOT")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn train_test_split(n: usize) -> (Vec<usize>, Vec<usize>) {
    let test: Vec<usize> = (0..n).filter(|i| i % TEST_VIEW_STRIDE == 0).collect();
    let train: Vec<usize> = (0..n).filter(|i| i % TEST_VIEW_STRIDE != 0).collect();
    (train, test)
}

fn compute_metrics(
    mesh: &splatmesh::meshing::ExtractedMesh,
    synth: &SyntheticScene,
    seed: u64,
) -> Result<MetricsReport> {
    let (train_idx, test_idx) = train_test_split(synth.cameras.len());
    let pick = |idx: &[usize]| -> (Vec<Camera>, Vec<splatmesh::math::Grid<splatmesh::math::V3>>) {
        (
            idx.iter().map(|&i| synth.cameras[i].clone()).collect(),
            idx.iter().map(|&i| synth.targets[i].clone()).collect(),
        )
    };
    let (train_cams, train_targets) = pick(&train_idx);
    let (test_cams, test_targets) = pick(&test_idx);
    let field = fit_color_field(mesh, &train_cams, &train_targets, COLOR_GRID_N, COLOR_FIT_ITERS)
        .context("stage: color field fit")?;
    let per_view_psnr = mesh_nvs_psnr(mesh, &field, &test_cams, &test_targets);
    let mean_psnr = per_view_psnr.iter().sum::<f64>() / per_view_psnr.len().max(1) as f64;
    let ch = chamfer(mesh, &synth.gt_samples, CHAMFER_SAMPLES, seed).context("stage: chamfer")?;
    let threshold = F1_THRESHOLD_SCALE * synth.shape.bounding_radius();
    let f1 =
        f1_score(mesh, &synth.gt_samples, threshold, CHAMFER_SAMPLES, seed).context("stage: f1")?;
    let report = interior_components(mesh);
    Ok(MetricsReport {
        chamfer: ch,
        f1,
        per_view_psnr,
        mean_psnr,
        mesh_stats: MeshStats {
            n_vertices: mesh.vertices.len(),
            n_faces: mesh.faces.len(),
            n_interior_components: report.n_interior,
        },
    })
}

fn cmd_run(config_path: &Path) -> Result<()> {
    let text = std::fs::read_to_string(config_path)
        .with_context(|| format!("stage: config read ({})", config_path.display()))?;
    let kvs = parse_kv_file(&text).context("stage: config parse")?;

    let mut spec = SceneSpec::default();
    let mut cfg = TrainConfig::default();
    let mut dump_images = false;
    let mut mesh_format = MeshFormat::Ply;
    for (k, v) in &kvs {
        match k.as_str() {
            "shape" => spec.shape = v.clone(),
            "n_gaussians" => spec.n_gaussians = v.parse().context("stage: config parse")?,
            "n_cameras" => spec.n_cameras = v.parse().context("stage: config parse")?,
            "resolution" => spec.resolution = v.parse().context("stage: config parse")?,
            "dump_images" => dump_images = v.parse().context("stage: config parse")?,
            "mesh_format" => mesh_format = MeshFormat::parse(v).context("stage: config parse")?,
            _ => {
                if !cfg.apply_kv(k, v).context("stage: config parse")? {
                    bail!("stage: config parse: unknown key '{k}'");
                }
            }
        }
    }
    spec.seed = cfg.seed;
    cfg.validate(spec.n_gaussians).context("stage: config validation")?;

    let run_name = config_path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("run")
        .to_string();
    let out_dir = output_root().join(&run_name);
    std::fs::create_dir_all(&out_dir).context("stage: output dir")?;
    if cfg.checkpoint_every > 0 {
        cfg.checkpoint_dir = Some(out_dir.clone());
    }

    let mut timings = BTreeMap::new();

    let t0 = Instant::now();
    let shape = parse_shape(&spec.shape).context("stage: scene generation")?;
    let (synth, scene0) =
        make_synthetic_scene(&shape, spec.n_gaussians, spec.n_cameras, spec.resolution, spec.seed)
            .context("stage: scene generation")?;
    timings.insert("scene_gen".to_string(), t0.elapsed().as_secs_f64());

    let t1 = Instant::now();
    let out = train(scene0, &synth, &cfg).context("stage: train")?;
    timings.insert("train".to_string(), t1.elapsed().as_secs_f64());

    let t2 = Instant::now();
    let mesh_path = out_dir.join(match mesh_format {
        MeshFormat::Ply => "mesh.ply",
        MeshFormat::Obj => "mesh.obj",
    });
    export_mesh(&out.mesh, &mesh_path, mesh_format).context("stage: mesh export")?;
    let scene_path = out_dir.join("scene.bin");
    save_scene(&out.scene, &scene_path).context("stage: scene export")?;
    let cams_path = out_dir.join("cameras.json");
    save_cameras(&synth.cameras, &cams_path).context("stage: scene export")?;
    let spec_path = out_dir.join("scene.json");
    std::fs::write(&spec_path, serde_json::to_string_pretty(&spec)?)
        .context("stage: scene export")?;
    let csv_path = out_dir.join("loss.csv");
    write_loss_csv(&csv_path, &out.history).context("stage: loss csv")?;
    timings.insert("export".to_string(), t2.elapsed().as_secs_f64());

    let t3 = Instant::now();
    let metrics = compute_metrics(&out.mesh, &synth, cfg.seed).context("stage: metrics")?;
    let metrics_path = out_dir.join("metrics.json");
    std::fs::write(&metrics_path, serde_json::to_string_pretty(&metrics)?)
        .context("stage: metrics")?;
    timings.insert("metrics".to_string(), t3.elapsed().as_secs_f64());

    let mut outputs: BTreeMap<String, String> = BTreeMap::new();
    for (k, p) in [
        ("mesh", &mesh_path),
        ("scene", &scene_path),
        ("cameras", &cams_path),
        ("scene_spec", &spec_path),
        ("loss_csv", &csv_path),
        ("metrics", &metrics_path),
    ] {
        outputs.insert(k.to_string(), p.display().to_string());
    }

    if dump_images {
        let img_dir = out_dir.join("images");
        std::fs::create_dir_all(&img_dir).context("stage: image dump")?;
        let cam = &synth.cameras[0];
        let (buf, _) = render_gaussians(&out.scene, cam).context("stage: image dump")?;
        dump_depth_png(&buf.depth, &img_dir.join("gauss_depth.png"))
            .context("stage: image dump")?;
        dump_normal_png(&buf.normal, &img_dir.join("gauss_normal.png"))
            .context("stage: image dump")?;
        dump_color_png(&buf.color, &img_dir.join("gauss_color.png"))
            .context("stage: image dump")?;
        let (mbuf, _) = splatmesh::render::rasterize_mesh(&out.mesh, cam);
        dump_depth_png(&mbuf.depth, &img_dir.join("mesh_depth.png"))
            .context("stage: image dump")?;
        dump_normal_png(&mbuf.normal, &img_dir.join("mesh_normal.png"))
            .context("stage: image dump")?;
        outputs.insert("images".to_string(), img_dir.display().to_string());
    }

    let manifest = RunManifest {
        config: kvs.into_iter().collect(),
        seed: cfg.seed,
        git_describe: git_describe(),
        timings_sec: timings,
        outputs,
    };
    std::fs::write(out_dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)
        .context("stage: manifest")?;

    println!(
        "run complete: chamfer {:.6}, f1 {:.4}, mean psnr {:.2} dB, {} vertices, outputs in {}",
        metrics.chamfer,
        metrics.f1,
        metrics.mean_psnr,
        out.mesh.vertices.len(),
        out_dir.display()
    );
    Ok(())
}

fn cmd_eval(mesh_path: &Path, scene_dir: &Path, out: Option<&Path>) -> Result<()> {
    let mesh = import_mesh(mesh_path)
        .with_context(|| format!("stage: mesh import ({})", mesh_path.display()))?;
    let spec_text = std::fs::read_to_string(scene_dir.join("scene.json"))
        .with_context(|| format!("stage: scene spec read ({})", scene_dir.display()))?;
    let spec: SceneSpec = serde_json::from_str(&spec_text).context("stage: scene spec parse")?;
    let shape = parse_shape(&spec.shape).context("stage: scene regeneration")?;
    let (synth, _) =
        make_synthetic_scene(&shape, spec.n_gaussians, spec.n_cameras, spec.resolution, spec.seed)
            .context("stage: scene regeneration")?;
    let metrics = compute_metrics(&mesh, &synth, spec.seed)?;
    let out_path = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| scene_dir.join("eval_metrics.json"));
    std::fs::write(&out_path, serde_json::to_string_pretty(&metrics)?)
        .context("stage: metrics write")?;
    println!(
        "eval complete: chamfer {:.6}, f1 {:.4}, mean psnr {:.2} dB -> {}",
        metrics.chamfer,
        metrics.f1,
        metrics.mean_psnr,
        out_path.display()
    );
    Ok(())
}

fn cmd_export(scene_path: &Path, out: &Path, format: &str) -> Result<()> {
    let format = MeshFormat::parse(format).context("stage: args")?;
    let scene = load_scene(scene_path)
        .with_context(|| format!("stage: scene load ({})", scene_path.display()))?;
    // Every Gaussian acts as a pivot: the checkpoint stores no selection.
    let selected: Vec<usize> = (0..scene.len()).collect();
    let pivots = sample_pivots(&scene, &selected, 1.0).context("stage: pivots")?;
    let (tets, _) =
        splatmesh::delaunay::triangulate(&pivots.sites, 0).context("stage: delaunay")?;
    let sdf: Vec<f64> = pivots
        .provenance
        .iter()
        .map(|&(k, ci)| scene.gaussians[k].sdf(ci))
        .collect();
    let mesh = splatmesh::meshing::marching_tetrahedra(&tets, &pivots.sites, &sdf)
        .context("stage: marching tetrahedra")?;
    export_mesh(&mesh, out, format).context("stage: mesh export")?;
    println!(
        "exported {} vertices / {} faces to {}",
        mesh.vertices.len(),
        mesh.faces.len(),
        out.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run { config } => cmd_run(config),
        Command::Eval { mesh, scene, out } => cmd_eval(mesh, scene, out.as_deref()),
        Command::Export { scene, out, format } => cmd_export(scene, out, format),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
