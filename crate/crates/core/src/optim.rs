//! Adam and the mesh-in-the-loop training driver.
//!
//! Training runs in two stages: a volumetric-only warmup (photometric loss,
//! later joined by the depth-derived normal consistency term), then the
//! mesh stage where pivots are selected once, SDF values are initialized by
//! depth fusion, and every iteration extracts a mesh through marching
//! tetrahedra over connectivity that refreshes on a fixed cadence.

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::delaunay::{triangulate, DelaunayError, Tetrahedralization};
use crate::losses::{
    compute_occupancy, init_sdf, total_loss, LossError, LossParts, LossWeights, MeshStage,
    TotalLossConfig,
};
use crate::meshing::{export_mesh, marching_tetrahedra, ExtractedMesh, MeshError, MeshFormat};
use crate::pivots::{
    compute_importance, prune_to_selection, sample_pivots, select_pivot_gaussians, PivotError,
};
use crate::scene::{save_scene, GaussianScene, SceneError, SyntheticScene};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("non-finite gradient in parameter group '{0}'")]
    NanGradient(&'static str),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Pivot(#[from] PivotError),
    #[error(transparent)]
    Delaunay(#[from] DelaunayError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Scene(#[from] SceneError),
}

// --- Adam ---

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-15;

/// First/second moment accumulators for one parameter group.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState { m: vec![0.0; len], v: vec![0.0; len], step: 0 }
    }
}

/// Standard bias-corrected Adam update in place.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    lr: f64,
    group: &'static str,
) -> Result<(), TrainError> {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.m.len());
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(TrainError::NanGradient(group));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    for i in 0..params.len() {
        state.m[i] = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * grads[i];
        state.v[i] = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * grads[i] * grads[i];
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
    Ok(())
}

// --- configuration ---

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PivotMode {
    /// Prune the scene down to the selected Gaussians.
    Base,
    /// Keep the full scene; only pivot sites come from the selection.
    Dense,
}

/// Per-group learning rates. `position` is per unit of scene bounding-box
/// diagonal and decays exponentially to 1% of its start over the run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LearningRates {
    pub position: f64,
    pub rotation: f64,
    pub scale: f64,
    pub opacity: f64,
    pub color: f64,
    pub sdf: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        LearningRates {
            position: 1.6e-4,
            rotation: 1e-3,
            scale: 5e-3,
            opacity: 5e-2,
            color: 2.5e-3,
            sdf: 0.025,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub iters_total: u64,
    pub iter_mesh_start: u64,
    pub delaunay_refresh_every: u64,
    pub occupancy_refresh_every: u64,
    /// Iteration at which the volumetric normal term switches on; defaults
    /// to iter_mesh_start / 3 when unset.
    pub normal_loss_start: Option<u64>,
    pub lr: LearningRates,
    pub weights: LossWeights,
    pub mode: PivotMode,
    /// 0 means "all Gaussians".
    pub pivot_budget: usize,
    pub corner_mult: f64,
    pub mesh_depth_aa: bool,
    pub seed: u64,
    /// Scene + mesh checkpoint cadence; 0 disables.
    pub checkpoint_every: u64,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iters_total: 2000,
            iter_mesh_start: 800,
            delaunay_refresh_every: 500,
            occupancy_refresh_every: 200,
            normal_loss_start: None,
            lr: LearningRates::default(),
            weights: LossWeights::default(),
            mode: PivotMode::Base,
            pivot_budget: 0,
            corner_mult: 1.0,
            mesh_depth_aa: true,
            seed: 0,
            checkpoint_every: 0,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, n_gaussians: usize) -> Result<(), TrainError> {
        if self.iters_total == 0 {
            return Err(TrainError::InvalidSchedule("iters_total must be positive".into()));
        }
        if self.iter_mesh_start > self.iters_total {
            return Err(TrainError::InvalidSchedule(
                "iter_mesh_start must not exceed iters_total".into(),
            ));
        }
        if self.delaunay_refresh_every == 0 || self.occupancy_refresh_every == 0 {
            return Err(TrainError::InvalidSchedule("refresh cadences must be >= 1".into()));
        }
        let budget = self.effective_budget(n_gaussians);
        if budget == 0 || budget > n_gaussians {
            return Err(TrainError::InvalidConfig(format!(
                "pivot budget {budget} out of range for {n_gaussians} gaussians"
            )));
        }
        if self.corner_mult <= 0.0 {
            return Err(TrainError::InvalidConfig("corner_mult must be positive".into()));
        }
        Ok(())
    }

    pub fn effective_budget(&self, n_gaussians: usize) -> usize {
        if self.pivot_budget == 0 {
            n_gaussians
        } else {
            self.pivot_budget
        }
    }

    /// Applies one `key = value` pair; returns false for unknown keys.
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<bool, TrainError> {
        let bad = |k: &str, v: &str| TrainError::InvalidConfig(format!("bad value '{v}' for {k}"));
        macro_rules! parse {
            ($t:ty) => {
                value.parse::<$t>().map_err(|_| bad(key, value))?
            };
        }
        match key {
            "iters_total" => self.iters_total = parse!(u64),
            "iter_mesh_start" => self.iter_mesh_start = parse!(u64),
            "delaunay_refresh_every" => self.delaunay_refresh_every = parse!(u64),
            "occupancy_refresh_every" => self.occupancy_refresh_every = parse!(u64),
            "normal_loss_start" => self.normal_loss_start = Some(parse!(u64)),
            "lr_position" => self.lr.position = parse!(f64),
            "lr_rotation" => self.lr.rotation = parse!(f64),
            "lr_scale" => self.lr.scale = parse!(f64),
            "lr_opacity" => self.lr.opacity = parse!(f64),
            "lr_color" => self.lr.color = parse!(f64),
            "lr_sdf" => self.lr.sdf = parse!(f64),
            "lambda_rgb" => self.weights.lambda_rgb = parse!(f64),
            "lambda_n" => self.weights.lambda_n = parse!(f64),
            "lambda_md" => self.weights.lambda_md = parse!(f64),
            "lambda_mn" => self.weights.lambda_mn = parse!(f64),
            "lambda_erosion" => self.weights.lambda_erosion = parse!(f64),
            "lambda_interior" => self.weights.lambda_interior = parse!(f64),
            "mode" => {
                self.mode = match value {
                    "base" => PivotMode::Base,
                    "dense" => PivotMode::Dense,
                    _ => return Err(bad(key, value)),
                }
            }
            "pivot_budget" => self.pivot_budget = parse!(usize),
            "corner_mult" => self.corner_mult = parse!(f64),
            "mesh_depth_aa" => self.mesh_depth_aa = parse!(bool),
            "seed" => self.seed = parse!(u64),
            "checkpoint_every" => self.checkpoint_every = parse!(u64),
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Parses a `key = value` config file; '#' starts a comment.
pub fn parse_kv_file(text: &str) -> Result<Vec<(String, String)>, TrainError> {
    let mut out = Vec::new();
    for (ln, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(TrainError::InvalidConfig(format!(
                "line {}: expected 'key = value', got '{line}'",
                ln + 1
            )));
        };
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

// --- scene optimizer ---

struct SceneOptimizer {
    mu: AdamState,
    quat: AdamState,
    log_scale: AdamState,
    logit_opacity: AdamState,
    rgb: AdamState,
    sdf: AdamState,
}

impl SceneOptimizer {
    fn new(n: usize) -> Self {
        SceneOptimizer {
            mu: AdamState::new(n * 3),
            quat: AdamState::new(n * 4),
            log_scale: AdamState::new(n * 3),
            logit_opacity: AdamState::new(n),
            rgb: AdamState::new(n * 3),
            sdf: AdamState::new(n * 9),
        }
    }

    fn step(
        &mut self,
        scene: &mut GaussianScene,
        grads: &crate::losses::SceneGrads,
        lr: &LearningRates,
        lr_position_abs: f64,
    ) -> Result<(), TrainError> {
        let mut buf = Vec::new();
        let mut gbuf = Vec::new();

        for (g, d) in scene.gaussians.iter().zip(&grads.params.mu) {
            buf.extend_from_slice(g.mu.as_slice());
            gbuf.extend_from_slice(d.as_slice());
        }
        adam_step(&mut buf, &gbuf, &mut self.mu, lr_position_abs, "position")?;
        for (i, g) in scene.gaussians.iter_mut().enumerate() {
            g.mu.copy_from_slice(&buf[i * 3..i * 3 + 3]);
        }

        buf.clear();
        gbuf.clear();
        for (g, d) in scene.gaussians.iter().zip(&grads.params.quat) {
            buf.extend_from_slice(g.quat.as_slice());
            gbuf.extend_from_slice(d.as_slice());
        }
        adam_step(&mut buf, &gbuf, &mut self.quat, lr.rotation, "rotation")?;
        for (i, g) in scene.gaussians.iter_mut().enumerate() {
            g.quat.copy_from_slice(&buf[i * 4..i * 4 + 4]);
            g.quat /= g.quat.norm();
        }

        buf.clear();
        gbuf.clear();
        for (g, d) in scene.gaussians.iter().zip(&grads.params.log_scale) {
            buf.extend_from_slice(g.log_scale.as_slice());
            gbuf.extend_from_slice(d.as_slice());
        }
        adam_step(&mut buf, &gbuf, &mut self.log_scale, lr.scale, "scale")?;
        for (i, g) in scene.gaussians.iter_mut().enumerate() {
            g.log_scale.copy_from_slice(&buf[i * 3..i * 3 + 3]);
        }

        buf.clear();
        for g in scene.gaussians.iter() {
            buf.push(g.logit_opacity);
        }
        adam_step(
            &mut buf,
            &grads.params.logit_opacity,
            &mut self.logit_opacity,
            lr.opacity,
            "opacity",
        )?;
        for (i, g) in scene.gaussians.iter_mut().enumerate() {
            g.logit_opacity = buf[i];
        }

        buf.clear();
        gbuf.clear();
        for (g, d) in scene.gaussians.iter().zip(&grads.params.rgb) {
            buf.extend_from_slice(g.rgb.as_slice());
            gbuf.extend_from_slice(d.as_slice());
        }
        adam_step(&mut buf, &gbuf, &mut self.rgb, lr.color, "color")?;
        for (i, g) in scene.gaussians.iter_mut().enumerate() {
            g.rgb.copy_from_slice(&buf[i * 3..i * 3 + 3]);
        }

        buf.clear();
        gbuf.clear();
        for (g, d) in scene.gaussians.iter().zip(&grads.sdf_pre) {
            buf.extend_from_slice(&g.sdf_pre);
            gbuf.extend_from_slice(d);
        }
        adam_step(&mut buf, &gbuf, &mut self.sdf, lr.sdf, "sdf")?;
        for (i, g) in scene.gaussians.iter_mut().enumerate() {
            g.sdf_pre.copy_from_slice(&buf[i * 9..i * 9 + 9]);
        }
        Ok(())
    }
}

// --- training ---

#[derive(Debug, Clone, Copy)]
pub struct LossRecord {
    pub iter: u64,
    pub parts: LossParts,
    pub total: f64,
}

pub fn write_loss_csv(path: &Path, records: &[LossRecord]) -> std::io::Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "iter,l1,dssim,l_n,l_md,l_mn,l_erosion,l_interior,total")?;
    for r in records {
        writeln!(
            f,
            "{},{},{},{},{},{},{},{},{}",
            r.iter,
            r.parts.l1,
            r.parts.dssim,
            r.parts.l_n,
            r.parts.l_md,
            r.parts.l_mn,
            r.parts.l_erosion,
            r.parts.l_interior,
            r.total
        )?;
    }
    f.flush()
}

pub struct TrainOutput {
    pub scene: GaussianScene,
    pub mesh: ExtractedMesh,
    pub history: Vec<LossRecord>,
    /// Pivot selection into the final scene's indices.
    pub selected: Vec<usize>,
}

/// Runs the two-stage optimization. Deterministic under the config seed.
pub fn train(
    scene: GaussianScene,
    data: &SyntheticScene,
    cfg: &TrainConfig,
) -> Result<TrainOutput, TrainError> {
    cfg.validate(scene.len())?;
    if data.cameras.len() < 2 {
        return Err(TrainError::InvalidConfig("need at least 2 cameras".into()));
    }
    let mut scene = scene;
    let n_cams = data.cameras.len();
    let normal_start = cfg.normal_loss_start.unwrap_or(cfg.iter_mesh_start / 3);
    let mut optimizer = SceneOptimizer::new(scene.len());
    let mut history = Vec::with_capacity(cfg.iters_total as usize);

    let decay = |iter: u64| {
        let t = iter as f64 / cfg.iters_total.max(1) as f64;
        0.01_f64.powf(t)
    };

    // Volumetric warmup.
    for iter in 0..cfg.iter_mesh_start {
        let cam = &data.cameras[(iter as usize) % n_cams];
        let target = &data.targets[(iter as usize) % n_cams];
        let loss_cfg = TotalLossConfig {
            weights: cfg.weights,
            bbox_diag: data.bbox_diag,
            normal_loss: iter >= normal_start,
            mesh_depth_aa: cfg.mesh_depth_aa,
        };
        let (parts, grads, _) = total_loss(&scene, cam, target, None, &loss_cfg)?;
        let lr_pos = cfg.lr.position * data.bbox_diag * decay(iter);
        optimizer.step(&mut scene, &grads, &cfg.lr, lr_pos)?;
        history.push(LossRecord { iter, parts, total: parts.total(&cfg.weights) });
    }

    if cfg.iter_mesh_start >= cfg.iters_total {
        return Ok(TrainOutput { scene, mesh: ExtractedMesh::default(), history, selected: vec![] });
    }

    // Mesh stage setup: pick pivots, initialize SDF values by depth fusion.
    let budget = cfg.effective_budget(scene.len());
    let scores = compute_importance(&scene, &data.cameras)?;
    let sampled = select_pivot_gaussians(&scores, budget, cfg.seed)?;
    let selected: Vec<usize> = match cfg.mode {
        PivotMode::Base => {
            scene = prune_to_selection(&scene, &sampled);
            optimizer = SceneOptimizer::new(scene.len());
            (0..scene.len()).collect()
        }
        PivotMode::Dense => sampled,
    };

    let pivots0 = sample_pivots(&scene, &selected, cfg.corner_mult)?;
    let sdf_pre = init_sdf(&scene, &pivots0, &data.cameras, data.bbox_diag)?;
    for (i, &(k, ci)) in pivots0.provenance.iter().enumerate() {
        scene.gaussians[k].sdf_pre[ci] = sdf_pre[i];
    }

    let mut tets: Tetrahedralization = triangulate(&pivots0.sites, cfg.seed)?.0;
    let mut occupancy = {
        let sdf: Vec<f64> = pivots0
            .provenance
            .iter()
            .map(|&(k, ci)| scene.gaussians[k].sdf(ci))
            .collect();
        let mesh0 = marching_tetrahedra(&tets, &pivots0.sites, &sdf)?;
        compute_occupancy(&mesh0, &data.cameras, &pivots0.sites, data.bbox_diag)
    };

    let mut last_mesh = ExtractedMesh::default();
    for iter in cfg.iter_mesh_start..cfg.iters_total {
        let it = iter - cfg.iter_mesh_start;
        let pivots = sample_pivots(&scene, &selected, cfg.corner_mult)?;
        if it > 0 && it % cfg.delaunay_refresh_every == 0 {
            tets = triangulate(&pivots.sites, cfg.seed)?.0;
        }
        let cam = &data.cameras[(iter as usize) % n_cams];
        let target = &data.targets[(iter as usize) % n_cams];
        let loss_cfg = TotalLossConfig {
            weights: cfg.weights,
            bbox_diag: data.bbox_diag,
            normal_loss: iter >= normal_start,
            mesh_depth_aa: cfg.mesh_depth_aa,
        };
        let stage = MeshStage { pivots: &pivots, tets: &tets, occupancy: &occupancy };
        let (parts, grads, mesh) = total_loss(&scene, cam, target, Some(&stage), &loss_cfg)?;
        let lr_pos = cfg.lr.position * data.bbox_diag * decay(iter);
        optimizer.step(&mut scene, &grads, &cfg.lr, lr_pos)?;
        history.push(LossRecord { iter, parts, total: parts.total(&cfg.weights) });

        if it % cfg.occupancy_refresh_every == 0 {
            occupancy = compute_occupancy(&mesh, &data.cameras, &pivots.sites, data.bbox_diag);
            occupancy.last_update_iter = iter;
        }
        last_mesh = mesh;

        if cfg.checkpoint_every > 0 && (iter + 1) % cfg.checkpoint_every == 0 {
            if let Some(dir) = &cfg.checkpoint_dir {
                save_scene(&scene, &dir.join(format!("ckpt_{:06}.scene", iter + 1)))?;
                export_mesh(
                    &last_mesh,
                    &dir.join(format!("ckpt_{:06}.ply", iter + 1)),
                    MeshFormat::Ply,
                )?;
            }
        }
    }

    // Final extraction with the latest parameters over the last connectivity.
    let pivots = sample_pivots(&scene, &selected, cfg.corner_mult)?;
    let sdf: Vec<f64> = pivots
        .provenance
        .iter()
        .map(|&(k, ci)| scene.gaussians[k].sdf(ci))
        .collect();
    let mesh = marching_tetrahedra(&tets, &pivots.sites, &sdf)?;
    Ok(TrainOutput { scene, mesh, history, selected })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{make_synthetic_scene, Shape};

    #[test]
    fn adam_zero_gradient_is_fixed_point() {
        let mut params = vec![1.0, -2.0, 3.0];
        let grads = vec![0.0; 3];
        let mut state = AdamState::new(3);
        adam_step(&mut params, &grads, &mut state, 0.1, "test").unwrap();
        assert_eq!(params, vec![1.0, -2.0, 3.0]);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut params = vec![0.0];
        let mut state = AdamState::new(1);
        adam_step(&mut params, &[1.0], &mut state, 0.1, "test").unwrap();
        assert!((params[0] + 0.1).abs() < 1e-12, "{}", params[0]);
    }

    #[test]
    fn adam_converges_on_quadratic() {
        // Minimize x^2/2: gradient is x.
        let mut params = vec![1.0];
        let mut state = AdamState::new(1);
        for _ in 0..500 {
            let g = vec![params[0]];
            adam_step(&mut params, &g, &mut state, 0.1, "test").unwrap();
        }
        assert!(params[0].abs() < 1e-3, "{}", params[0]);
    }

    #[test]
    fn adam_rejects_nan_gradients() {
        let mut params = vec![0.0];
        let mut state = AdamState::new(1);
        let err = adam_step(&mut params, &[f64::NAN], &mut state, 0.1, "rotation").unwrap_err();
        assert!(err.to_string().contains("rotation"));
    }

    #[test]
    fn config_parsing_and_validation() {
        let text = "iters_total = 100\n# comment\nlr_sdf = 0.05\nmode = dense\n";
        let kvs = parse_kv_file(text).unwrap();
        let mut cfg = TrainConfig::default();
        for (k, v) in &kvs {
            assert!(cfg.apply_kv(k, v).unwrap(), "unknown key {k}");
        }
        assert_eq!(cfg.iters_total, 100);
        assert_eq!(cfg.lr.sdf, 0.05);
        assert_eq!(cfg.mode, PivotMode::Dense);

        let mut bad = TrainConfig { iters_total: 0, ..TrainConfig::default() };
        assert!(matches!(bad.validate(10), Err(TrainError::InvalidSchedule(_))));
        bad.iters_total = 10;
        bad.iter_mesh_start = 20;
        assert!(matches!(bad.validate(10), Err(TrainError::InvalidSchedule(_))));
    }

    #[test]
    fn degenerate_schedule_is_plain_splatting() {
        let shape = Shape::Sphere { radius: 1.0 };
        let (synth, scene) = make_synthetic_scene(&shape, 40, 4, 24, 3).unwrap();
        let cfg = TrainConfig {
            iters_total: 40,
            iter_mesh_start: 40,
            seed: 3,
            ..TrainConfig::default()
        };
        let out = train(scene, &synth, &cfg).unwrap();
        assert!(out.mesh.is_empty());
        assert_eq!(out.history.len(), 40);
        // Photometric loss drops over the warmup.
        let first = out.history[0].parts.l1 + out.history[0].parts.dssim;
        let last_rec = out.history.last().unwrap();
        let last = last_rec.parts.l1 + last_rec.parts.dssim;
        assert!(last < first, "{last} vs {first}");
    }

    #[test]
    fn short_mesh_stage_runs_and_is_deterministic() {
        let shape = Shape::Sphere { radius: 1.0 };
        let (synth, scene) = make_synthetic_scene(&shape, 40, 4, 24, 5).unwrap();
        let cfg = TrainConfig {
            iters_total: 30,
            iter_mesh_start: 15,
            delaunay_refresh_every: 10,
            occupancy_refresh_every: 10,
            pivot_budget: 30,
            seed: 5,
            ..TrainConfig::default()
        };
        let a = train(scene.clone(), &synth, &cfg).unwrap();
        let b = train(scene, &synth, &cfg).unwrap();
        assert_eq!(a.history.len(), 30);
        // Base mode prunes to the budget.
        assert_eq!(a.scene.len(), 30);
        assert!(!a.mesh.is_empty());
        for (x, y) in a.history.iter().zip(&b.history) {
            assert_eq!(x.total, y.total);
        }
        for (ga, gb) in a.scene.gaussians.iter().zip(&b.scene.gaussians) {
            assert_eq!(ga, gb);
        }
    }

    #[test]
    fn dense_mode_preserves_gaussian_count() {
        let shape = Shape::Sphere { radius: 1.0 };
        let (synth, scene) = make_synthetic_scene(&shape, 40, 4, 24, 7).unwrap();
        let cfg = TrainConfig {
            iters_total: 20,
            iter_mesh_start: 10,
            delaunay_refresh_every: 5,
            occupancy_refresh_every: 5,
            pivot_budget: 25,
            mode: PivotMode::Dense,
            seed: 7,
            ..TrainConfig::default()
        };
        let out = train(scene, &synth, &cfg).unwrap();
        assert_eq!(out.scene.len(), 40);
        assert_eq!(out.selected.len(), 25);
    }

    #[test]
    fn quaternions_stay_normalized() {
        let shape = Shape::Sphere { radius: 1.0 };
        let (synth, scene) = make_synthetic_scene(&shape, 20, 4, 16, 11).unwrap();
        let cfg = TrainConfig {
            iters_total: 12,
            iter_mesh_start: 6,
            delaunay_refresh_every: 3,
            occupancy_refresh_every: 3,
            seed: 11,
            ..TrainConfig::default()
        };
        let out = train(scene, &synth, &cfg).unwrap();
        for g in &out.scene.gaussians {
            assert!((g.quat.norm() - 1.0).abs() < 1e-12);
        }
    }
}
