//! Loss terms coupling the splatted and mesh renderings, SDF initialization
//! by depth fusion, occupancy labeling of Delaunay sites, and the assembled
//! training objective with its full backward chain.
//!
//! All pixel and site sums are normalized by the number of contributing
//! entries, which keeps the loss weights resolution-independent.

use thiserror::Error;

use crate::delaunay::Tetrahedralization;
use crate::math::{sigmoid, softplus, Grid, V3};
use crate::meshing::{marching_tetrahedra, mt_gradients, ExtractedMesh, MeshError};
use crate::pivots::PivotSet;
use crate::render::{
    depth_to_normal, rasterize_mesh, render_gaussians, smooth_depth, smooth_depth_backward,
    GaussianParamGrads, RenderError,
};
use crate::scene::{Camera, GaussianScene};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("buffer shapes differ: {0}x{1} vs {2}x{3}")]
    ShapeMismatch(usize, usize, usize, usize),
    #[error("occupancy length {0} != site count {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least {need} cameras, got {got}")]
    TooFewCameras { need: usize, got: usize },
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_rgb: f64,
    pub lambda_n: f64,
    pub lambda_md: f64,
    pub lambda_mn: f64,
    pub lambda_erosion: f64,
    pub lambda_interior: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_rgb: 0.2,
            lambda_n: 0.05,
            lambda_md: 0.05,
            lambda_mn: 0.05,
            lambda_erosion: 0.005,
            lambda_interior: 0.005,
        }
    }
}

/// Binary inside/outside label per Delaunay site.
#[derive(Debug, Clone, Default)]
pub struct OccupancyLabels {
    pub o: Vec<u8>,
    pub last_update_iter: u64,
}

/// Sign with a zero subgradient at zero (f64::signum(0.0) is 1.0).
fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn check_shape<A, B>(a: &Grid<A>, b: &Grid<B>) -> Result<(), LossError> {
    if a.width != b.width || a.height != b.height {
        return Err(LossError::ShapeMismatch(a.width, a.height, b.width, b.height));
    }
    Ok(())
}

// --- photometric: (1 - lambda) L1 + lambda (1 - SSIM)/2 ---

const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;
const SSIM_RADIUS: i64 = 5;

fn ssim_kernel() -> [f64; 11] {
    let mut k = [0.0; 11];
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - SSIM_RADIUS as f64;
        *v = (-d * d / (2.0 * 1.5 * 1.5)).exp();
    }
    k
}

/// Separable Gaussian filter with per-pixel renormalization at the borders.
fn blur(src: &[f64], w: usize, h: usize) -> Vec<f64> {
    let k = ssim_kernel();
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            let mut z = 0.0;
            for t in -SSIM_RADIUS..=SSIM_RADIUS {
                let xx = x as i64 + t;
                if xx < 0 || xx >= w as i64 {
                    continue;
                }
                let kv = k[(t + SSIM_RADIUS) as usize];
                acc += kv * src[y * w + xx as usize];
                z += kv;
            }
            tmp[y * w + x] = acc / z;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            let mut z = 0.0;
            for t in -SSIM_RADIUS..=SSIM_RADIUS {
                let yy = y as i64 + t;
                if yy < 0 || yy >= h as i64 {
                    continue;
                }
                let kv = k[(t + SSIM_RADIUS) as usize];
                acc += kv * tmp[yy as usize * w + x];
                z += kv;
            }
            out[y * w + x] = acc / z;
        }
    }
    out
}

/// Adjoint of `blur`: divide by the per-pixel normalizer, then correlate.
fn blur_adjoint(grad: &[f64], w: usize, h: usize) -> Vec<f64> {
    let k = ssim_kernel();
    let znorm_x: Vec<f64> = (0..w)
        .map(|x| {
            (-SSIM_RADIUS..=SSIM_RADIUS)
                .filter(|t| x as i64 + t >= 0 && x as i64 + t < w as i64)
                .map(|t| k[(t + SSIM_RADIUS) as usize])
                .sum()
        })
        .collect();
    let znorm_y: Vec<f64> = (0..h)
        .map(|y| {
            (-SSIM_RADIUS..=SSIM_RADIUS)
                .filter(|t| y as i64 + t >= 0 && y as i64 + t < h as i64)
                .map(|t| k[(t + SSIM_RADIUS) as usize])
                .sum()
        })
        .collect();
    // Reverse order: adjoint of (blur_x then blur_y) is adj_y then adj_x.
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for t in -SSIM_RADIUS..=SSIM_RADIUS {
                let yy = y as i64 + t;
                if yy < 0 || yy >= h as i64 {
                    continue;
                }
                let kv = k[(t + SSIM_RADIUS) as usize];
                acc += kv * grad[yy as usize * w + x] / znorm_y[yy as usize];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for t in -SSIM_RADIUS..=SSIM_RADIUS {
                let xx = x as i64 + t;
                if xx < 0 || xx >= w as i64 {
                    continue;
                }
                let kv = k[(t + SSIM_RADIUS) as usize];
                acc += kv * tmp[y * w + xx as usize] / znorm_x[xx as usize];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// (1 - lambda_rgb) L1 + lambda_rgb (1 - SSIM)/2 between rendered and target,
/// with the gradient on the rendered image. SSIM uses 11x11 Gaussian windows
/// (sigma 1.5) per channel.
pub fn loss_photometric(
    rendered: &Grid<V3>,
    target: &Grid<V3>,
    lambda_rgb: f64,
) -> Result<(f64, f64, Grid<V3>), LossError> {
    check_shape(rendered, target)?;
    let (w, h) = (rendered.width, rendered.height);
    let n = (w * h) as f64;
    let mut grad = Grid::fill(w, h, V3::zeros());

    let mut l1 = 0.0;
    for i in 0..w * h {
        for c in 0..3 {
            let diff = rendered.data[i][c] - target.data[i][c];
            l1 += diff.abs();
            grad.data[i][c] += (1.0 - lambda_rgb) * sign0(diff) / (3.0 * n);
        }
    }
    l1 /= 3.0 * n;

    let mut mean_ssim = 0.0;
    for c in 0..3 {
        let x: Vec<f64> = rendered.data.iter().map(|v| v[c]).collect();
        let y: Vec<f64> = target.data.iter().map(|v| v[c]).collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a * b).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let mu_x = blur(&x, w, h);
        let mu_y = blur(&y, w, h);
        let s_xx = blur(&xx, w, h);
        let s_xy = blur(&xy, w, h);
        let s_yy = blur(&yy, w, h);

        let mut d_mu_x = vec![0.0; w * h];
        let mut d_s_xx = vec![0.0; w * h];
        let mut d_s_xy = vec![0.0; w * h];
        for i in 0..w * h {
            let var_x = s_xx[i] - mu_x[i] * mu_x[i];
            let var_y = s_yy[i] - mu_y[i] * mu_y[i];
            let cov = s_xy[i] - mu_x[i] * mu_y[i];
            let a1 = 2.0 * mu_x[i] * mu_y[i] + SSIM_C1;
            let a2 = 2.0 * cov + SSIM_C2;
            let b1 = mu_x[i] * mu_x[i] + mu_y[i] * mu_y[i] + SSIM_C1;
            let b2 = var_x + var_y + SSIM_C2;
            let ssim = a1 * a2 / (b1 * b2);
            mean_ssim += ssim;

            // d loss / d ssim for loss = mean (1 - ssim)/2.
            let ds = -0.5 * lambda_rgb / (3.0 * n);
            let ds_a1 = ds * a2 / (b1 * b2);
            let ds_a2 = ds * a1 / (b1 * b2);
            let ds_b1 = -ds * a1 * a2 / (b1 * b1 * b2);
            let ds_b2 = -ds * a1 * a2 / (b1 * b2 * b2);
            d_mu_x[i] = ds_a1 * 2.0 * mu_y[i] + ds_a2 * (-2.0 * mu_y[i])
                + ds_b1 * 2.0 * mu_x[i]
                + ds_b2 * (-2.0 * mu_x[i]);
            d_s_xx[i] = ds_b2;
            d_s_xy[i] = ds_a2 * 2.0;
        }
        let g_mu = blur_adjoint(&d_mu_x, w, h);
        let g_xx = blur_adjoint(&d_s_xx, w, h);
        let g_xy = blur_adjoint(&d_s_xy, w, h);
        for i in 0..w * h {
            grad.data[i][c] += g_mu[i] + 2.0 * x[i] * g_xx[i] + y[i] * g_xy[i];
        }
    }
    mean_ssim /= 3.0 * n;
    let dssim = (1.0 - mean_ssim) / 2.0;
    let value = (1.0 - lambda_rgb) * l1 + lambda_rgb * dssim;
    Ok((value, dssim, grad))
}

// --- normal consistency ---

/// Mean of (1 - a . b) over pixels where both normals are non-background.
/// Returns gradients on both buffers.
pub fn loss_normal_consistency(
    a: &Grid<V3>,
    b: &Grid<V3>,
) -> Result<(f64, Grid<V3>, Grid<V3>), LossError> {
    check_shape(a, b)?;
    let zero = V3::zeros();
    let count = a
        .data
        .iter()
        .zip(&b.data)
        .filter(|(x, y)| **x != zero && **y != zero)
        .count();
    let mut da = Grid::fill(a.width, a.height, V3::zeros());
    let mut db = Grid::fill(a.width, a.height, V3::zeros());
    if count == 0 {
        return Ok((0.0, da, db));
    }
    let inv = 1.0 / count as f64;
    let mut sum = 0.0;
    for i in 0..a.data.len() {
        let (x, y) = (a.data[i], b.data[i]);
        if x == zero || y == zero {
            continue;
        }
        sum += 1.0 - x.dot(&y);
        da.data[i] = -y * inv;
        db.data[i] = -x * inv;
    }
    Ok((sum * inv, da, db))
}

// --- mesh depth consistency ---

/// Mean over contributing pixels of log(1 + |D - D_M|); pixels foreground in
/// exactly one buffer contribute the capped penalty log(1 + d_cap).
pub fn loss_mesh_depth(
    d: &Grid<f64>,
    d_mesh: &Grid<f64>,
    d_cap: f64,
) -> Result<(f64, Grid<f64>, Grid<f64>), LossError> {
    check_shape(d, d_mesh)?;
    let mut gd = Grid::fill(d.width, d.height, 0.0);
    let mut gm = Grid::fill(d.width, d.height, 0.0);
    let mut both = Vec::new();
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..d.data.len() {
        match (d.data[i].is_finite(), d_mesh.data[i].is_finite()) {
            (true, true) => {
                both.push(i);
                count += 1;
            }
            (true, false) | (false, true) => {
                sum += (1.0 + d_cap).ln();
                count += 1;
            }
            (false, false) => {}
        }
    }
    if count == 0 {
        return Ok((0.0, gd, gm));
    }
    let inv = 1.0 / count as f64;
    for &i in &both {
        let diff = d.data[i] - d_mesh.data[i];
        sum += (1.0 + diff.abs()).ln();
        let g = sign0(diff) / (1.0 + diff.abs()) * inv;
        gd.data[i] = g;
        gm.data[i] = -g;
    }
    Ok((sum * inv, gd, gm))
}

// --- erosion ---

/// Mean over selected Gaussians of max(0, f_center), the activated SDF of
/// the center site. Gradient is on the pre-activation values.
pub fn loss_erosion(scene: &GaussianScene, selected: &[usize]) -> (f64, Vec<f64>) {
    let n = selected.len().max(1) as f64;
    let mut sum = 0.0;
    let mut grads = vec![0.0; selected.len()];
    for (j, &k) in selected.iter().enumerate() {
        let f = scene.gaussians[k].sdf(0);
        if f > 0.0 {
            sum += f;
            grads[j] = (1.0 - f * f) / n;
        }
    }
    (sum / n, grads)
}

// --- occupancy + interior ---

/// Labels each site inside (1) iff every camera that sees it through a
/// foreground mesh depth pixel places it behind the mesh surface by more
/// than eps = 1e-4 x bbox_diag. Sites seen by no such camera are outside.
pub fn compute_occupancy(
    mesh: &ExtractedMesh,
    cameras: &[Camera],
    sites: &[V3],
    bbox_diag: f64,
) -> OccupancyLabels {
    let mut o = vec![0u8; sites.len()];
    if mesh.is_empty() || cameras.is_empty() {
        return OccupancyLabels { o, last_update_iter: 0 };
    }
    let eps = 1e-4 * bbox_diag;
    let depths: Vec<Grid<f64>> = cameras
        .iter()
        .map(|cam| rasterize_mesh(mesh, cam).0.depth)
        .collect();
    for (si, p) in sites.iter().enumerate() {
        let mut counted = 0;
        let mut behind_all = true;
        for (ci, cam) in cameras.iter().enumerate() {
            let Some((px, py, z)) = cam.sees(p) else {
                continue;
            };
            let dm = *depths[ci].at(px, py);
            if !dm.is_finite() {
                continue;
            }
            counted += 1;
            if z <= dm + eps {
                behind_all = false;
                break;
            }
        }
        o[si] = (counted > 0 && behind_all) as u8;
    }
    OccupancyLabels { o, last_update_iter: 0 }
}

/// Mean softplus(f_p) over interior sites (cross-entropy pushing interior
/// SDF values negative); zero when no site is interior. Gradients are on the
/// activated values, aligned with the site array.
pub fn loss_interior(
    site_sdf: &[f64],
    occupancy: &OccupancyLabels,
) -> Result<(f64, Vec<f64>), LossError> {
    if site_sdf.len() != occupancy.o.len() {
        return Err(LossError::LengthMismatch(occupancy.o.len(), site_sdf.len()));
    }
    let n_interior = occupancy.o.iter().filter(|&&o| o == 1).count();
    let mut grads = vec![0.0; site_sdf.len()];
    if n_interior == 0 {
        return Ok((0.0, grads));
    }
    let inv = 1.0 / n_interior as f64;
    let mut sum = 0.0;
    for (i, (&f, &o)) in site_sdf.iter().zip(&occupancy.o).enumerate() {
        if o == 1 {
            sum += softplus(f);
            grads[i] = sigmoid(f) * inv;
        }
    }
    Ok((sum * inv, grads))
}

// --- SDF initialization by depth fusion ---

/// For every site, fuses the signed differences between the Gaussian depth
/// maps and the site's camera depth. Each view's measurement is truncated at
/// the distance tau = 0.05 x bbox_diag, and views that place the site more
/// than tau behind the rendered surface carry no information (the site is
/// occluded there) and are dropped. The surviving measurements are averaged,
/// clamped, and written as pre-activations atanh(d/tau x (1 - 1e-6)).
/// Sites seen by no camera start at +0.5 tau (assumed outside); sites more
/// than tau behind the surface in every view are fully saturated inside.
pub fn init_sdf(
    scene: &GaussianScene,
    pivots: &PivotSet,
    cameras: &[Camera],
    bbox_diag: f64,
) -> Result<Vec<f64>, LossError> {
    if cameras.len() < 2 {
        return Err(LossError::TooFewCameras { need: 2, got: cameras.len() });
    }
    let tau = 0.05 * bbox_diag;
    let depths: Vec<Grid<f64>> = cameras
        .iter()
        .map(|cam| render_gaussians(scene, cam).map(|(b, _)| b.depth))
        .collect::<Result<_, _>>()?;
    let squash = 1.0 - 1e-6;
    Ok(pivots
        .sites
        .iter()
        .map(|p| {
            let mut sum = 0.0;
            let mut n_valid = 0usize;
            let mut n_seen = 0usize;
            for (ci, cam) in cameras.iter().enumerate() {
                let Some((px, py, z)) = cam.sees(p) else {
                    continue;
                };
                let d = *depths[ci].at(px, py);
                if !d.is_finite() {
                    continue;
                }
                n_seen += 1;
                let diff = d - z;
                if diff < -tau {
                    continue;
                }
                sum += diff.min(tau);
                n_valid += 1;
            }
            let ratio = if n_seen == 0 {
                0.5
            } else if n_valid == 0 {
                -1.0
            } else {
                (sum / n_valid as f64).clamp(-tau, tau) / tau
            };
            (ratio * squash).atanh()
        })
        .collect())
}

// --- assembled objective ---

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub l1: f64,
    pub dssim: f64,
    pub l_n: f64,
    pub l_md: f64,
    pub l_mn: f64,
    pub l_erosion: f64,
    pub l_interior: f64,
}

impl LossParts {
    pub fn total(&self, w: &LossWeights) -> f64 {
        (1.0 - w.lambda_rgb) * self.l1
            + w.lambda_rgb * self.dssim
            + w.lambda_n * self.l_n
            + w.lambda_md * self.l_md
            + w.lambda_mn * self.l_mn
            + w.lambda_erosion * self.l_erosion
            + w.lambda_interior * self.l_interior
    }
}

/// All gradients of the training objective with respect to the stored scene
/// parameters.
#[derive(Debug, Clone)]
pub struct SceneGrads {
    pub params: GaussianParamGrads,
    pub sdf_pre: Vec<[f64; 9]>,
}

impl SceneGrads {
    pub fn zeros(n: usize) -> Self {
        SceneGrads { params: GaussianParamGrads::zeros(n), sdf_pre: vec![[0.0; 9]; n] }
    }
}

/// Mesh-stage inputs: pivot sites with frozen Delaunay connectivity and the
/// current occupancy labels.
pub struct MeshStage<'a> {
    pub pivots: &'a PivotSet,
    pub tets: &'a Tetrahedralization,
    pub occupancy: &'a OccupancyLabels,
}

pub struct TotalLossConfig {
    pub weights: LossWeights,
    pub bbox_diag: f64,
    /// Volumetric normal-consistency term active (warmup gate).
    pub normal_loss: bool,
    /// 3x3 binomial smoothing of the mesh depth before the depth loss.
    pub mesh_depth_aa: bool,
}

/// Evaluates the full objective for one view and backpropagates every term
/// to the Gaussian parameters, through both renderers and the mesh
/// extraction chain. Returns the loss parts, the gradients, and the mesh
/// extracted this step (empty in the volumetric-only stage).
pub fn total_loss(
    scene: &GaussianScene,
    cam: &Camera,
    target: &Grid<V3>,
    mesh_stage: Option<&MeshStage>,
    cfg: &TotalLossConfig,
) -> Result<(LossParts, SceneGrads, ExtractedMesh), LossError> {
    let mut parts = LossParts::default();
    let mut grads = SceneGrads::zeros(scene.len());
    let w = &cfg.weights;

    let (gauss_buf, gauss_ctx) = render_gaussians(scene, cam)?;
    let (photo, dssim, d_color) = loss_photometric(&gauss_buf.color, target, w.lambda_rgb)?;
    parts.l1 = if w.lambda_rgb < 1.0 {
        (photo - w.lambda_rgb * dssim) / (1.0 - w.lambda_rgb)
    } else {
        0.0
    };
    parts.dssim = dssim;

    let (n_tilde, d2n_ctx) = depth_to_normal(&gauss_buf.depth, cam);
    let mut d_depth_gauss = Grid::fill(cam.width, cam.height, 0.0);
    let mut d_normal_gauss = Grid::fill(cam.width, cam.height, V3::zeros());
    let mut d_n_tilde = Grid::fill(cam.width, cam.height, V3::zeros());

    if cfg.normal_loss && w.lambda_n > 0.0 {
        let (l_n, da, db) = loss_normal_consistency(&gauss_buf.normal, &n_tilde)?;
        parts.l_n = l_n;
        for i in 0..da.data.len() {
            d_normal_gauss.data[i] += da.data[i] * w.lambda_n;
            d_n_tilde.data[i] += db.data[i] * w.lambda_n;
        }
    }

    let mut mesh = ExtractedMesh::default();
    if let Some(stage) = mesh_stage {
        let site_sdf: Vec<f64> = stage
            .pivots
            .provenance
            .iter()
            .map(|&(k, ci)| scene.gaussians[k].sdf(ci))
            .collect();
        mesh = marching_tetrahedra(stage.tets, &stage.pivots.sites, &site_sdf)?;
        // Activated-domain SDF gradients, accumulated from every mesh term.
        let mut d_site_sdf = vec![0.0; site_sdf.len()];
        let mut d_sites = vec![V3::zeros(); stage.pivots.sites.len()];

        if !mesh.is_empty() {
            let (mesh_buf, mesh_ctx) = rasterize_mesh(&mesh, cam);
            let (d_mesh_used, aa_weights) = if cfg.mesh_depth_aa {
                let (sm, wts) = smooth_depth(&mesh_buf.depth);
                (sm, Some(wts))
            } else {
                (mesh_buf.depth.clone(), None)
            };

            let (l_md, g_d, g_dm_used) =
                loss_mesh_depth(&gauss_buf.depth, &d_mesh_used, cfg.bbox_diag)?;
            parts.l_md = l_md;
            for i in 0..g_d.data.len() {
                d_depth_gauss.data[i] += g_d.data[i] * w.lambda_md;
            }
            let mut d_dm_raw = Grid::fill(cam.width, cam.height, 0.0);
            match &aa_weights {
                Some(wts) => {
                    let mut scaled = g_dm_used.clone();
                    for v in scaled.data.iter_mut() {
                        *v *= w.lambda_md;
                    }
                    d_dm_raw = smooth_depth_backward(&mesh_buf.depth, wts, &scaled);
                }
                None => {
                    for i in 0..g_dm_used.data.len() {
                        d_dm_raw.data[i] = g_dm_used.data[i] * w.lambda_md;
                    }
                }
            }

            let (l_mn, g_nt, g_nm) = loss_normal_consistency(&n_tilde, &mesh_buf.normal)?;
            parts.l_mn = l_mn;
            let mut d_nm = Grid::fill(cam.width, cam.height, V3::zeros());
            for i in 0..g_nt.data.len() {
                d_n_tilde.data[i] += g_nt.data[i] * w.lambda_mn;
                d_nm.data[i] = g_nm.data[i] * w.lambda_mn;
            }

            let d_vertices = mesh_ctx.backward(&mesh, cam, &d_dm_raw, &d_nm);
            let mt = mt_gradients(&mesh, &stage.pivots.sites)?;
            mt.backward(&mesh, &d_vertices, &mut d_sites, &mut d_site_sdf);
        }

        let (l_int, g_int) = loss_interior(&site_sdf, stage.occupancy)?;
        parts.l_interior = l_int;
        for (i, g) in g_int.iter().enumerate() {
            d_site_sdf[i] += g * w.lambda_interior;
        }

        stage.pivots.backward(scene, &d_sites, &mut grads.params);
        for (i, &(k, ci)) in stage.pivots.provenance.iter().enumerate() {
            let f = site_sdf[i];
            grads.sdf_pre[k][ci] += (1.0 - f * f) * d_site_sdf[i];
        }

        let (l_ero, g_ero) = loss_erosion(scene, &stage.pivots.selected);
        parts.l_erosion = l_ero;
        for (j, &k) in stage.pivots.selected.iter().enumerate() {
            grads.sdf_pre[k][0] += g_ero[j] * w.lambda_erosion;
        }
    }

    // Route the depth-derived normal gradients back onto the depth map.
    let d_depth_from_nt = d2n_ctx.backward(&gauss_buf.depth, cam, &d_n_tilde);
    for i in 0..d_depth_gauss.data.len() {
        d_depth_gauss.data[i] += d_depth_from_nt.data[i];
    }

    let g = gauss_ctx.backward(scene, cam, &d_depth_gauss, &d_normal_gauss, &d_color);
    grads.params.add(&g);
    Ok((parts, grads, mesh))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::logit;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_img(w: usize, h: usize, rng: &mut impl Rng) -> Grid<V3> {
        let mut g = Grid::fill(w, h, V3::zeros());
        for v in g.data.iter_mut() {
            *v = V3::new(rng.gen(), rng.gen(), rng.gen());
        }
        g
    }

    #[test]
    fn photometric_perfect_fit_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = rand_img(16, 16, &mut rng);
        let (v, _, grad) = loss_photometric(&img, &img.clone(), 0.2).unwrap();
        assert!(v.abs() < 1e-12);
        // SSIM gradient is zero at the optimum; L1 subgradient picked as 0.
        assert!(grad.data.iter().all(|g| g.norm() < 1e-9));
    }

    #[test]
    fn photometric_pure_l1_extreme() {
        let a = Grid::fill(16, 16, V3::zeros());
        let b = Grid::fill(16, 16, V3::repeat(1.0));
        let (v, _, _) = loss_photometric(&a, &b, 0.0).unwrap();
        assert!((v - 1.0).abs() < 1e-12);
    }

    #[test]
    fn photometric_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_img(16, 16, &mut rng);
        let y = rand_img(16, 16, &mut rng);
        let (_, _, grad) = loss_photometric(&x, &y, 0.2).unwrap();
        let h = 1e-6;
        for idx in (0..256).step_by(17) {
            for c in 0..3 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp.data[idx][c] += h;
                xm.data[idx][c] -= h;
                let vp = loss_photometric(&xp, &y, 0.2).unwrap().0;
                let vm = loss_photometric(&xm, &y, 0.2).unwrap().0;
                let fd = (vp - vm) / (2.0 * h);
                let a = grad.data[idx][c];
                assert!(
                    (a - fd).abs() / fd.abs().max(a.abs()).max(1e-8) < 1e-4,
                    "{idx},{c}: {a} vs {fd}"
                );
            }
        }
    }

    #[test]
    fn normal_consistency_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut a = Grid::fill(8, 8, V3::zeros());
        for v in a.data.iter_mut() {
            let r = V3::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5);
            *v = r.normalize();
        }
        let (v, _, _) = loss_normal_consistency(&a, &a.clone()).unwrap();
        assert!(v.abs() < 1e-12);
        let flipped = Grid { width: 8, height: 8, data: a.data.iter().map(|v| -v).collect() };
        let (v, _, _) = loss_normal_consistency(&a, &flipped).unwrap();
        assert!((v - 2.0).abs() < 1e-12);
        // Scalar-loop oracle on random pairs.
        let mut b = Grid::fill(8, 8, V3::zeros());
        for v in b.data.iter_mut() {
            let r = V3::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5);
            *v = r.normalize();
        }
        let (v, _, _) = loss_normal_consistency(&a, &b).unwrap();
        let oracle: f64 = a
            .data
            .iter()
            .zip(&b.data)
            .map(|(x, y)| 1.0 - x.dot(y))
            .sum::<f64>()
            / 64.0;
        assert!((v - oracle).abs() < 1e-12);
    }

    #[test]
    fn normal_consistency_skips_background() {
        let mut a = Grid::fill(4, 4, V3::new(0.0, 0.0, -1.0));
        let b = Grid::fill(4, 4, V3::new(0.0, 0.0, 1.0));
        for i in 0..8 {
            a.data[i] = V3::zeros();
        }
        let (v, da, _) = loss_normal_consistency(&a, &b).unwrap();
        assert!((v - 2.0).abs() < 1e-12);
        assert!(da.data[0] == V3::zeros());
    }

    #[test]
    fn mesh_depth_loss_cases() {
        let d = Grid::fill(4, 4, 2.0);
        let (v, _, _) = loss_mesh_depth(&d, &d.clone(), 10.0).unwrap();
        assert!(v.abs() < 1e-12);

        // Single foreground pixel with |D - D_M| = e - 1.
        let mut a = Grid::fill(4, 4, f64::INFINITY);
        let mut b = Grid::fill(4, 4, f64::INFINITY);
        a.data[5] = 1.0 + (std::f64::consts::E - 1.0);
        b.data[5] = 1.0;
        let (v, _, _) = loss_mesh_depth(&a, &b, 10.0).unwrap();
        assert!((v - 1.0).abs() < 1e-12);

        // One-sided foreground pixels take the capped penalty.
        let mut c = Grid::fill(4, 4, f64::INFINITY);
        c.data[3] = 1.0;
        let (v, gd, _) = loss_mesh_depth(&c, &Grid::fill(4, 4, f64::INFINITY), 7.0).unwrap();
        assert!((v - (1.0 + 7.0_f64).ln()).abs() < 1e-12);
        assert!(gd.data.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn mesh_depth_matches_scalar_oracle_and_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut a = Grid::fill(8, 8, f64::INFINITY);
        let mut b = Grid::fill(8, 8, f64::INFINITY);
        for i in 0..64 {
            if rng.gen::<f64>() < 0.8 {
                a.data[i] = 1.0 + rng.gen::<f64>();
            }
            if rng.gen::<f64>() < 0.8 {
                b.data[i] = 1.0 + rng.gen::<f64>();
            }
        }
        let cap = 5.0;
        let (v, ga, gb) = loss_mesh_depth(&a, &b, cap).unwrap();
        let mut oracle = 0.0;
        let mut count = 0;
        for i in 0..64 {
            match (a.data[i].is_finite(), b.data[i].is_finite()) {
                (true, true) => {
                    oracle += (1.0 + (a.data[i] - b.data[i]).abs()).ln();
                    count += 1;
                }
                (true, false) | (false, true) => {
                    oracle += (1.0 + cap).ln();
                    count += 1;
                }
                _ => {}
            }
        }
        assert!((v - oracle / count as f64).abs() < 1e-12);
        let h = 1e-6;
        for i in (0..64).step_by(5) {
            if !a.data[i].is_finite() {
                continue;
            }
            let mut ap = a.clone();
            let mut am = a.clone();
            ap.data[i] += h;
            am.data[i] -= h;
            let fd = (loss_mesh_depth(&ap, &b, cap).unwrap().0
                - loss_mesh_depth(&am, &b, cap).unwrap().0)
                / (2.0 * h);
            assert!((ga.data[i] - fd).abs() / fd.abs().max(1e-9) < 1e-6);
        }
        for i in (0..64).step_by(7) {
            if !b.data[i].is_finite() {
                continue;
            }
            let mut bp = b.clone();
            let mut bm = b.clone();
            bp.data[i] += h;
            bm.data[i] -= h;
            let fd = (loss_mesh_depth(&a, &bp, cap).unwrap().0
                - loss_mesh_depth(&a, &bm, cap).unwrap().0)
                / (2.0 * h);
            assert!((gb.data[i] - fd).abs() / fd.abs().max(1e-9) < 1e-6);
        }
    }

    fn scene_with_centers(fs: &[f64]) -> (GaussianScene, Vec<usize>) {
        let gaussians = fs
            .iter()
            .map(|&f| crate::scene::Gaussian {
                mu: V3::zeros(),
                quat: crate::math::V4::new(1.0, 0.0, 0.0, 0.0),
                log_scale: V3::repeat(0.0),
                logit_opacity: logit(0.8),
                rgb: V3::repeat(0.5),
                sdf_pre: [f.atanh(), 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            })
            .collect();
        let n = fs.len();
        (GaussianScene { gaussians }, (0..n).collect())
    }

    #[test]
    fn erosion_hinge_cases() {
        let (scene, sel) = scene_with_centers(&[-0.5, -0.1, -0.9]);
        let (v, g) = loss_erosion(&scene, &sel);
        assert_eq!(v, 0.0);
        assert!(g.iter().all(|x| *x == 0.0));

        let (scene, sel) = scene_with_centers(&[-0.5, 0.2, 0.0]);
        let (v, _) = loss_erosion(&scene, &sel);
        assert!((v - 0.2 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn erosion_gradient_matches_fd() {
        let (scene, sel) = scene_with_centers(&[-0.3, 0.4, 0.7, -0.9]);
        let (_, g) = loss_erosion(&scene, &sel);
        let h = 1e-6;
        for (j, &k) in sel.iter().enumerate() {
            let mut sp = scene.clone();
            let mut sm = scene.clone();
            sp.gaussians[k].sdf_pre[0] += h;
            sm.gaussians[k].sdf_pre[0] -= h;
            let fd = (loss_erosion(&sp, &sel).0 - loss_erosion(&sm, &sel).0) / (2.0 * h);
            assert!((g[j] - fd).abs() < 1e-6, "{j}: {} vs {fd}", g[j]);
        }
    }

    #[test]
    fn interior_loss_cases() {
        let occ0 = OccupancyLabels { o: vec![0, 0, 0], last_update_iter: 0 };
        let (v, _) = loss_interior(&[0.9, -0.9, 0.5], &occ0).unwrap();
        assert_eq!(v, 0.0);

        let occ1 = OccupancyLabels { o: vec![1], last_update_iter: 0 };
        let (v, _) = loss_interior(&[-10.0], &occ1).unwrap();
        assert!((v - (1.0 + (-10.0f64).exp()).ln()).abs() < 1e-15);
        assert!((v - 4.5398e-5).abs() < 1e-8);

        let (v, g) = loss_interior(&[0.0], &occ1).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((g[0] - 0.5).abs() < 1e-12);

        assert!(loss_interior(&[0.0, 1.0], &occ1).is_err());
    }

    #[test]
    fn interior_gradient_is_monotone_sigmoid() {
        let occ = OccupancyLabels { o: vec![1, 1, 0], last_update_iter: 0 };
        let fs = [-2.0, 0.7, 0.3];
        let (_, g) = loss_interior(&fs, &occ).unwrap();
        assert!((g[0] - sigmoid(-2.0) / 2.0).abs() < 1e-12);
        assert!((g[1] - sigmoid(0.7) / 2.0).abs() < 1e-12);
        assert_eq!(g[2], 0.0);
    }

    /// A dense shell of small overlapping splats on the unit sphere, sharp
    /// enough that the expected-depth maps track the true surface closely.
    fn saturating_sphere_cloud(n: usize, sigma: f64, seed: u64) -> GaussianScene {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gaussians = (0..n)
            .map(|_| {
                let d = V3::new(
                    rng.gen::<f64>() - 0.5,
                    rng.gen::<f64>() - 0.5,
                    rng.gen::<f64>() - 0.5,
                )
                .normalize();
                crate::scene::Gaussian {
                    mu: d,
                    quat: crate::math::V4::new(1.0, 0.0, 0.0, 0.0),
                    log_scale: V3::repeat(sigma.ln()),
                    logit_opacity: 6.0,
                    rgb: V3::repeat(0.5),
                    sdf_pre: [0.0; 9],
                }
            })
            .collect();
        GaussianScene { gaussians }
    }

    #[test]
    fn init_sdf_on_surface_and_clamped_sites() {
        use crate::pivots::PivotSet;
        // Fronto-parallel wall of splats at world z = 2: every contributor
        // shares the same camera depth, so the expected depth is exact.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut gaussians = Vec::new();
        for _ in 0..2000 {
            gaussians.push(crate::scene::Gaussian {
                mu: V3::new(
                    rng.gen::<f64>() * 4.0 - 2.0,
                    rng.gen::<f64>() * 4.0 - 2.0,
                    2.0,
                ),
                quat: crate::math::V4::new(1.0, 0.0, 0.0, 0.0),
                log_scale: V3::repeat(0.08f64.ln()),
                logit_opacity: 6.0,
                rgb: V3::repeat(0.5),
                sdf_pre: [0.0; 9],
            });
        }
        let wall = GaussianScene { gaussians };
        // Two parallel frontal cameras; depth equals world z for both.
        let cams = [
            crate::scene::Camera::look_at(V3::new(-0.1, 0.0, 0.0), V3::new(-0.1, 0.0, 99.0), 50.0, 32, 32),
            crate::scene::Camera::look_at(V3::new(0.1, 0.0, 0.0), V3::new(0.1, 0.0, 99.0), 50.0, 32, 32),
        ];
        let diag = 2.0;
        let tau = 0.05 * diag;
        let probe = PivotSet {
            sites: vec![
                V3::new(0.0, 0.0, 2.0),
                V3::new(0.0, 0.0, 2.0 + 2.0 * tau),
                V3::new(0.0, 0.0, 2.0 - 2.0 * tau),
            ],
            provenance: vec![(0, 0), (0, 1), (0, 2)],
            selected: vec![0],
            corner_mult: 1.0,
        };
        let pre = init_sdf(&wall, &probe, &cams, diag).unwrap();
        // Exactly on the rendered surface in all views.
        assert!(pre[0].tanh().abs() < 1e-3, "{}", pre[0].tanh());
        // More than tau behind the surface in every view: fully inside.
        assert!((pre[1].tanh() + (1.0 - 1e-6)).abs() < 1e-9, "{}", pre[1].tanh());
        // More than tau in front: clamped fully outside.
        assert!((pre[2].tanh() - (1.0 - 1e-6)).abs() < 1e-9, "{}", pre[2].tanh());
    }

    #[test]
    fn init_sdf_sign_agreement_on_sphere() {
        use crate::pivots::sample_pivots;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let shape = crate::scene::Shape::Sphere { radius: 1.0 };
        let depth_scene = saturating_sphere_cloud(20000, 0.025, 1);
        let (synth, _) = crate::scene::make_synthetic_scene(&shape, 10, 16, 128, 5).unwrap();
        // Coarse pivots whose corner sites straddle the surface.
        let coarse: Vec<crate::scene::Gaussian> = (0..200)
            .map(|_| {
                let d = V3::new(
                    rng.gen::<f64>() - 0.5,
                    rng.gen::<f64>() - 0.5,
                    rng.gen::<f64>() - 0.5,
                )
                .normalize();
                let q = {
                    let v = crate::math::V4::new(
                        rng.gen::<f64>() - 0.5,
                        rng.gen::<f64>() - 0.5,
                        rng.gen::<f64>() - 0.5,
                        rng.gen::<f64>() - 0.5,
                    );
                    v / v.norm()
                };
                crate::scene::Gaussian {
                    mu: d,
                    quat: q,
                    log_scale: V3::repeat(0.12f64.ln()),
                    logit_opacity: 1.0,
                    rgb: V3::repeat(0.5),
                    sdf_pre: [0.0; 9],
                }
            })
            .collect();
        let pivot_scene = GaussianScene { gaussians: coarse };
        let selected: Vec<usize> = (0..200).collect();
        let pivots = sample_pivots(&pivot_scene, &selected, 1.0).unwrap();
        let pre = init_sdf(&depth_scene, &pivots, &synth.cameras, synth.bbox_diag).unwrap();
        let tau = 0.05 * synth.bbox_diag;
        let mut agree = 0;
        let mut total = 0;
        for (i, p) in pivots.sites.iter().enumerate() {
            let a = shape.sdf(p);
            if a.abs() > 0.1 * tau {
                total += 1;
                if (a > 0.0) == (pre[i] > 0.0) {
                    agree += 1;
                }
            }
        }
        assert!(
            agree as f64 >= 0.9 * total as f64,
            "sign agreement {agree}/{total}"
        );
    }

    #[test]
    fn init_sdf_requires_two_cameras() {
        let scene = saturating_sphere_cloud(10, 0.1, 3);
        let pivots = crate::pivots::sample_pivots(&scene, &[0], 1.0).unwrap();
        let cam = crate::scene::Camera::look_at(V3::new(0.0, 0.0, -3.0), V3::zeros(), 50.0, 8, 8);
        assert!(matches!(
            init_sdf(&scene, &pivots, &[cam], 2.0),
            Err(LossError::TooFewCameras { .. })
        ));
    }

    #[test]
    fn weighted_total_matches_hand_computation() {
        let parts = LossParts {
            l1: 1.0,
            dssim: 1.0,
            l_n: 1.0,
            l_md: 1.0,
            l_mn: 1.0,
            l_erosion: 1.0,
            l_interior: 1.0,
        };
        let w = LossWeights::default();
        // (1-0.2) + 0.2 + 0.05 + 0.05 + 0.05 + 0.005 + 0.005 = 1.16.
        assert!((parts.total(&w) - 1.16).abs() < 1e-12);
    }
}
