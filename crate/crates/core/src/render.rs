//! Software rendering of depth/normal/color maps from Gaussians (EWA
//! splatting with front-to-back alpha compositing) and from the extracted
//! mesh (z-buffered triangle rasterization), both with analytic gradients,
//! plus depth-to-normal conversion and debug PNG dumps.
//!
//! Conventions: depth is camera-frame z (+inf at background), normals live in
//! the camera frame with unit length and are sign-flipped toward the camera,
//! colors are alpha-composited over the scene background.

use thiserror::Error;

use crate::math::{normalize_backward, rotation_backward, Grid, M2, M3, V2, V3, V4};
use crate::meshing::ExtractedMesh;
use crate::scene::{Camera, GaussianScene, BACKGROUND, Z_NEAR};

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("non-finite parameter on gaussian {0}")]
    NonFinite(usize),
}

/// Accumulated alpha below which a pixel's depth/normal count as
/// background. Depth from barely-covered pixels is dominated by whatever
/// faint tail touches them, so the cutoff sits at half coverage.
pub const ALPHA_FG: f64 = 0.5;
/// Compositing terminates once transmittance drops below this.
pub const T_TERMINATE: f64 = 1e-4;
/// Effective alpha cap; keeps transmittance strictly positive.
pub const ALPHA_CLAMP: f64 = 0.9999;
/// Contributions below this effective alpha are dropped. The rasterized
/// footprint is sized so everything outside it falls under this cutoff,
/// keeping the forward pass a continuous function of the parameters.
const ALPHA_SKIP: f64 = 1e-10;
/// EWA low-pass: added to the diagonal of the 2D covariance (pixels^2).
const LOWPASS: f64 = 0.3;

#[derive(Debug, Clone)]
pub struct RenderBuffers {
    pub depth: Grid<f64>,
    pub normal: Grid<V3>,
    pub color: Grid<V3>,
    pub alpha: Grid<f64>,
}

impl RenderBuffers {
    pub fn background(width: usize, height: usize) -> Self {
        RenderBuffers {
            depth: Grid::fill(width, height, f64::INFINITY),
            normal: Grid::fill(width, height, V3::zeros()),
            color: Grid::fill(width, height, BACKGROUND),
            alpha: Grid::fill(width, height, 0.0),
        }
    }
}

/// Gradients with respect to the stored (pre-activation) Gaussian parameters.
#[derive(Debug, Clone)]
pub struct GaussianParamGrads {
    pub mu: Vec<V3>,
    pub quat: Vec<V4>,
    pub log_scale: Vec<V3>,
    pub logit_opacity: Vec<f64>,
    pub rgb: Vec<V3>,
}

impl GaussianParamGrads {
    pub fn zeros(n: usize) -> Self {
        GaussianParamGrads {
            mu: vec![V3::zeros(); n],
            quat: vec![V4::zeros(); n],
            log_scale: vec![V3::zeros(); n],
            logit_opacity: vec![0.0; n],
            rgb: vec![V3::zeros(); n],
        }
    }

    pub fn add(&mut self, other: &GaussianParamGrads) {
        for i in 0..self.mu.len() {
            self.mu[i] += other.mu[i];
            self.quat[i] += other.quat[i];
            self.log_scale[i] += other.log_scale[i];
            self.logit_opacity[i] += other.logit_opacity[i];
            self.rgb[i] += other.rgb[i];
        }
    }
}

struct Splat {
    gauss: usize,
    z: f64,
    center: V2,
    conic: M2,
    cov2d: M2,
    jac: nalgebra::Matrix2x3<f64>,
    m: M3,
    mu_cam: V3,
    rot: M3,
    q_unit: V4,
    scale: V3,
    alpha: f64,
    color: V3,
    normal_cam: V3,
    normal_sign: f64,
    normal_axis: usize,
}

pub struct GaussianRenderCtx {
    splats: Vec<Splat>,
    bins: Vec<Vec<u32>>,
    weight_sums: Vec<f64>,
    width: usize,
    height: usize,
}

fn projection_jacobian(cam: &Camera, p: &V3) -> nalgebra::Matrix2x3<f64> {
    let z2 = p.z * p.z;
    nalgebra::Matrix2x3::new(
        cam.fx / p.z,
        0.0,
        -cam.fx * p.x / z2,
        0.0,
        cam.fy / p.z,
        -cam.fy * p.y / z2,
    )
}

/// Renders depth, normal, color and alpha maps by front-to-back compositing
/// of the projected Gaussians; per-pixel weights are alpha * G2d * T.
/// Depth and normal are alpha-normalized expectations; color composites over
/// the background. Returns a context for the gradient pass.
pub fn render_gaussians(
    scene: &GaussianScene,
    cam: &Camera,
) -> Result<(RenderBuffers, GaussianRenderCtx), RenderError> {
    let (w, h) = (cam.width, cam.height);
    let mut buffers = RenderBuffers::background(w, h);
    let mut ctx = GaussianRenderCtx {
        splats: Vec::new(),
        bins: vec![Vec::new(); w * h],
        weight_sums: vec![0.0; scene.len()],
        width: w,
        height: h,
    };

    for (gi, g) in scene.gaussians.iter().enumerate() {
        let finite = g.mu.iter().all(|v| v.is_finite())
            && g.quat.iter().all(|v| v.is_finite())
            && g.log_scale.iter().all(|v| v.is_finite())
            && g.logit_opacity.is_finite()
            && g.rgb.iter().all(|v| v.is_finite());
        if !finite {
            return Err(RenderError::NonFinite(gi));
        }
        let mu_cam = cam.world_to_cam(&g.mu);
        if mu_cam.z <= Z_NEAR {
            continue;
        }
        let q_unit = g.quat / g.quat.norm();
        let rot = crate::math::rotation_from_quat(&q_unit);
        let scale = g.scale();
        let m = cam.rot * rot * M3::from_diagonal(&scale);
        let jac = projection_jacobian(cam, &mu_cam);
        let a2 = jac * m;
        let cov2d = a2 * a2.transpose() + M2::identity() * LOWPASS;
        let det = cov2d.determinant();
        if det <= 0.0 {
            continue;
        }
        let conic = M2::new(cov2d[(1, 1)], -cov2d[(0, 1)], -cov2d[(1, 0)], cov2d[(0, 0)]) / det;
        let (u, v) = cam.project_cam(&mu_cam);
        let center = V2::new(u, v);

        let mid = 0.5 * (cov2d[(0, 0)] + cov2d[(1, 1)]);
        let lmax = mid + (mid * mid - det).max(0.0).sqrt();
        let radius = 6.8 * lmax.sqrt() + 1.0;
        let x0 = (u - radius).floor().max(0.0) as usize;
        let x1 = ((u + radius).ceil() as i64).min(w as i64 - 1);
        let y0 = (v - radius).floor().max(0.0) as usize;
        let y1 = ((v + radius).ceil() as i64).min(h as i64 - 1);
        if x1 < x0 as i64 || y1 < y0 as i64 || u + radius < 0.0 || v + radius < 0.0 {
            continue;
        }

        let axis = (0..3).min_by(|&a, &b| scale[a].partial_cmp(&scale[b]).unwrap()).unwrap();
        let n_world = rot.column(axis).into_owned();
        let n_cam_raw = cam.rot * n_world;
        let normal_sign = if n_cam_raw.dot(&mu_cam) > 0.0 { -1.0 } else { 1.0 };

        let id = ctx.splats.len() as u32;
        ctx.splats.push(Splat {
            gauss: gi,
            z: mu_cam.z,
            center,
            conic,
            cov2d,
            jac,
            m,
            mu_cam,
            rot,
            q_unit,
            scale,
            alpha: g.opacity(),
            color: g.rgb,
            normal_cam: n_cam_raw * normal_sign,
            normal_sign,
            normal_axis: axis,
        });
        for y in y0..=(y1 as usize) {
            for x in x0..=(x1 as usize) {
                ctx.bins[y * w + x].push(id);
            }
        }
    }

    // Per-pixel lists must be in front-to-back order; splats were created in
    // scene order, so sort each bin by depth (stable on ties by index).
    let order: Vec<u32> = {
        let mut idx: Vec<u32> = (0..ctx.splats.len() as u32).collect();
        idx.sort_by(|&a, &b| {
            ctx.splats[a as usize]
                .z
                .partial_cmp(&ctx.splats[b as usize].z)
                .unwrap()
                .then(a.cmp(&b))
        });
        let mut rank = vec![0u32; ctx.splats.len()];
        for (r, &i) in idx.iter().enumerate() {
            rank[i as usize] = r as u32;
        }
        rank
    };
    for bin in ctx.bins.iter_mut() {
        bin.sort_by_key(|&i| order[i as usize]);
    }

    for y in 0..h {
        for x in 0..w {
            let px = V2::new(x as f64 + 0.5, y as f64 + 0.5);
            let mut t = 1.0;
            let mut sz = 0.0;
            let mut sa = 0.0;
            let mut sc = V3::zeros();
            let mut sn = V3::zeros();
            for &si in &ctx.bins[y * w + x] {
                let s = &ctx.splats[si as usize];
                let d = px - s.center;
                let e = 0.5 * d.dot(&(s.conic * d));
                let a_eff = (s.alpha * (-e).exp()).min(ALPHA_CLAMP);
                if a_eff < ALPHA_SKIP {
                    continue;
                }
                let weight = a_eff * t;
                sz += weight * s.z;
                sa += weight;
                sc += s.color * weight;
                sn += s.normal_cam * weight;
                ctx.weight_sums[s.gauss] += weight;
                t *= 1.0 - a_eff;
                if t < T_TERMINATE {
                    break;
                }
            }
            *buffers.alpha.at_mut(x, y) = sa;
            *buffers.color.at_mut(x, y) = sc + BACKGROUND * t;
            if sa > ALPHA_FG {
                *buffers.depth.at_mut(x, y) = sz / sa;
                let nn = sn.norm();
                if nn > 1e-12 {
                    *buffers.normal.at_mut(x, y) = sn / nn;
                }
            }
        }
    }
    Ok((buffers, ctx))
}

impl GaussianRenderCtx {
    /// Sum over pixels of the blending weights each Gaussian contributed.
    pub fn blend_weight_sums(&self) -> &[f64] {
        &self.weight_sums
    }

    /// Pulls per-pixel gradients on depth, normal and color back to the
    /// stored Gaussian parameters.
    pub fn backward(
        &self,
        scene: &GaussianScene,
        cam: &Camera,
        d_depth: &Grid<f64>,
        d_normal: &Grid<V3>,
        d_color: &Grid<V3>,
    ) -> GaussianParamGrads {
        let mut grads = GaussianParamGrads::zeros(scene.len());
        let n_splats = self.splats.len();
        let mut d_center = vec![V2::zeros(); n_splats];
        let mut d_conic = vec![M2::zeros(); n_splats];
        let mut d_alpha = vec![0.0; n_splats];
        let mut d_rgb = vec![V3::zeros(); n_splats];
        let mut d_ncam = vec![V3::zeros(); n_splats];
        let mut d_zdir = vec![0.0; n_splats];

        struct Contrib {
            splat: u32,
            g: f64,
            a_eff: f64,
            t: f64,
            weight: f64,
            clamped: bool,
            d: V2,
        }
        let mut contribs: Vec<Contrib> = Vec::new();

        for y in 0..self.height {
            for x in 0..self.width {
                let px = V2::new(x as f64 + 0.5, y as f64 + 0.5);
                contribs.clear();
                let mut t = 1.0;
                let mut sz = 0.0;
                let mut sa = 0.0;
                let mut sn = V3::zeros();
                for &si in &self.bins[y * self.width + x] {
                    let s = &self.splats[si as usize];
                    let d = px - s.center;
                    let e = 0.5 * d.dot(&(s.conic * d));
                    let g = (-e).exp();
                    let raw = s.alpha * g;
                    let a_eff = raw.min(ALPHA_CLAMP);
                    if a_eff < ALPHA_SKIP {
                        continue;
                    }
                    let weight = a_eff * t;
                    sz += weight * s.z;
                    sa += weight;
                    sn += s.normal_cam * weight;
                    contribs.push(Contrib {
                        splat: si,
                        g,
                        a_eff,
                        t,
                        weight,
                        clamped: raw > ALPHA_CLAMP,
                        d,
                    });
                    t *= 1.0 - a_eff;
                    if t < T_TERMINATE {
                        break;
                    }
                }
                if contribs.is_empty() {
                    continue;
                }
                let t_end = t;

                let du_c = *d_color.at(x, y);
                let mut dsz = 0.0;
                let mut dsa = 0.0;
                let mut dsn = V3::zeros();
                let dsc = du_c;
                let d_t_end = du_c.dot(&BACKGROUND);
                if sa > ALPHA_FG {
                    let dd = *d_depth.at(x, y);
                    dsz = dd / sa;
                    dsa -= dd * sz / (sa * sa);
                    let nn = sn.norm();
                    if nn > 1e-12 {
                        let n = sn / nn;
                        let dn = *d_normal.at(x, y);
                        dsn = (dn - n * n.dot(&dn)) / nn;
                    }
                }

                // phi_j = dL/dw_j; suffix accumulates sum_{m>j} w_m phi_m.
                let mut suffix = 0.0;
                for c in contribs.iter().rev() {
                    let s = &self.splats[c.splat as usize];
                    let phi = dsz * s.z + dsc.dot(&s.color) + dsn.dot(&s.normal_cam) + dsa;
                    let da_eff = c.t * phi
                        - suffix / (1.0 - c.a_eff)
                        - d_t_end * t_end / (1.0 - c.a_eff);
                    suffix += c.weight * phi;

                    let si = c.splat as usize;
                    d_rgb[si] += dsc * c.weight;
                    d_ncam[si] += dsn * c.weight;
                    d_zdir[si] += dsz * c.weight;
                    if !c.clamped {
                        d_alpha[si] += da_eff * c.g;
                        let dg = da_eff * s.alpha;
                        let de = -c.g * dg;
                        let qd = s.conic * c.d;
                        d_center[si] -= qd * de;
                        d_conic[si] += c.d * c.d.transpose() * (0.5 * de);
                    }
                }
            }
        }

        for (si, s) in self.splats.iter().enumerate() {
            let g = &scene.gaussians[s.gauss];
            let gi = s.gauss;

            // conic = cov2d^-1.
            let d_cov = -s.conic * d_conic[si] * s.conic;
            // cov2d = a2 a2^T + lowpass I, a2 = jac * m.
            let a2 = s.jac * s.m;
            let d_a2 = (d_cov + d_cov.transpose()) * a2;
            let mut d_jac = d_a2 * s.m.transpose();
            let d_m = s.jac.transpose() * d_a2;

            // center = project(mu_cam); reuse the projection jacobian.
            let mut d_mu_cam = s.jac.transpose() * d_center[si];
            // jac itself depends on mu_cam.
            let (xc, yc, zc) = (s.mu_cam.x, s.mu_cam.y, s.mu_cam.z);
            let z2 = zc * zc;
            let z3 = z2 * zc;
            d_mu_cam.x += d_jac[(0, 2)] * (-cam.fx / z2);
            d_mu_cam.y += d_jac[(1, 2)] * (-cam.fy / z2);
            d_mu_cam.z += d_jac[(0, 0)] * (-cam.fx / z2)
                + d_jac[(0, 2)] * (2.0 * cam.fx * xc / z3)
                + d_jac[(1, 1)] * (-cam.fy / z2)
                + d_jac[(1, 2)] * (2.0 * cam.fy * yc / z3);
            d_mu_cam.z += d_zdir[si];
            d_jac.fill(0.0);

            grads.mu[gi] += cam.rot.transpose() * d_mu_cam;

            // m = cam.rot * rot * diag(scale).
            let d_rs = cam.rot.transpose() * d_m;
            let mut d_rot = M3::zeros();
            for k in 0..3 {
                for r in 0..3 {
                    d_rot[(r, k)] += d_rs[(r, k)] * s.scale[k];
                }
            }
            let mut d_log_scale = V3::zeros();
            for k in 0..3 {
                let ds_k: f64 = (0..3).map(|r| s.rot[(r, k)] * d_rs[(r, k)]).sum();
                d_log_scale[k] = ds_k * s.scale[k];
            }

            // Normal: sign * cam.rot * rot[:, axis].
            let d_ncol = cam.rot.transpose() * (d_ncam[si] * s.normal_sign);
            for r in 0..3 {
                d_rot[(r, s.normal_axis)] += d_ncol[r];
            }

            let dq_unit = rotation_backward(&s.q_unit, &d_rot);
            grads.quat[gi] += normalize_backward(&g.quat, &dq_unit);
            grads.log_scale[gi] += d_log_scale;
            let a = s.alpha;
            grads.logit_opacity[gi] += d_alpha[si] * a * (1.0 - a);
            grads.rgb[gi] += d_rgb[si];
        }
        grads
    }
}

// --- mesh rasterization ---

pub struct MeshRasterCtx {
    /// Winner face per pixel, -1 for background.
    winner: Grid<i32>,
    width: usize,
    height: usize,
}

fn edge(a: &V2, b: &V2, p: &V2) -> f64 {
    (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x)
}

/// Top-left fill rule for a counter-clockwise edge in y-down screen space.
fn is_top_left(a: &V2, b: &V2) -> bool {
    (a.y == b.y && b.x < a.x) || b.y < a.y
}

fn face_normal_cam(pc: &[V3; 3]) -> (V3, f64, f64) {
    let raw = (pc[1] - pc[0]).cross(&(pc[2] - pc[0]));
    let norm = raw.norm();
    let centroid = (pc[0] + pc[1] + pc[2]) / 3.0;
    let sign = if raw.dot(&centroid) > 0.0 { -1.0 } else { 1.0 };
    (raw * (sign / norm.max(1e-300)), norm, sign)
}

/// Z-buffered rasterization of the mesh: perspective-correct camera-z depth
/// and the winning face's geometric normal, flipped toward the camera.
pub fn rasterize_mesh(mesh: &ExtractedMesh, cam: &Camera) -> (RenderBuffers, MeshRasterCtx) {
    let (w, h) = (cam.width, cam.height);
    let mut buffers = RenderBuffers::background(w, h);
    let mut ctx = MeshRasterCtx { winner: Grid::fill(w, h, -1), width: w, height: h };

    for (fi, f) in mesh.faces.iter().enumerate() {
        let pc = [
            cam.world_to_cam(&mesh.vertices[f[0]]),
            cam.world_to_cam(&mesh.vertices[f[1]]),
            cam.world_to_cam(&mesh.vertices[f[2]]),
        ];
        if pc.iter().any(|p| p.z <= Z_NEAR) {
            continue;
        }
        let q: Vec<V2> = pc
            .iter()
            .map(|p| {
                let (u, v) = cam.project_cam(p);
                V2::new(u, v)
            })
            .collect();
        // Orient to positive area for the fill rule; keep the permutation.
        let area2 = edge(&q[0], &q[1], &q[2]);
        if area2 == 0.0 {
            continue;
        }
        let (i0, i1, i2) = if area2 > 0.0 { (0, 1, 2) } else { (0, 2, 1) };
        let (qa, qb, qc) = (&q[i0], &q[i1], &q[i2]);
        let inv_w = [1.0 / pc[i0].z, 1.0 / pc[i1].z, 1.0 / pc[i2].z];

        let xmin = qa.x.min(qb.x).min(qc.x).floor().max(0.0) as usize;
        let xmax = (qa.x.max(qb.x).max(qc.x).ceil() as i64).min(w as i64 - 1);
        let ymin = qa.y.min(qb.y).min(qc.y).floor().max(0.0) as usize;
        let ymax = (qa.y.max(qb.y).max(qc.y).ceil() as i64).min(h as i64 - 1);
        if xmax < xmin as i64 || ymax < ymin as i64 {
            continue;
        }
        let (n_cam, _, _) = face_normal_cam(&pc);

        for y in ymin..=(ymax as usize) {
            for x in xmin..=(xmax as usize) {
                let p = V2::new(x as f64 + 0.5, y as f64 + 0.5);
                let e0 = edge(qb, qc, &p);
                let e1 = edge(qc, qa, &p);
                let e2 = edge(qa, qb, &p);
                let inside = (e0 > 0.0 || (e0 == 0.0 && is_top_left(qb, qc)))
                    && (e1 > 0.0 || (e1 == 0.0 && is_top_left(qc, qa)))
                    && (e2 > 0.0 || (e2 == 0.0 && is_top_left(qa, qb)));
                if !inside {
                    continue;
                }
                let sum = e0 + e1 + e2;
                let (l0, l1, l2) = (e0 / sum, e1 / sum, e2 / sum);
                let inv_z = l0 * inv_w[0] + l1 * inv_w[1] + l2 * inv_w[2];
                let z = 1.0 / inv_z;
                if z < *buffers.depth.at(x, y) {
                    *buffers.depth.at_mut(x, y) = z;
                    *buffers.normal.at_mut(x, y) = n_cam;
                    *buffers.alpha.at_mut(x, y) = 1.0;
                    *ctx.winner.at_mut(x, y) = fi as i32;
                }
            }
        }
    }
    (buffers, ctx)
}

impl MeshRasterCtx {
    /// Pulls per-pixel depth and normal gradients back to world-space vertex
    /// positions. Visibility is hard: gradients flow through the z-buffer
    /// winner only.
    pub fn backward(
        &self,
        mesh: &ExtractedMesh,
        cam: &Camera,
        d_depth: &Grid<f64>,
        d_normal: &Grid<V3>,
    ) -> Vec<V3> {
        let mut d_vertices = vec![V3::zeros(); mesh.vertices.len()];
        let mut d_face_normal = vec![V3::zeros(); mesh.faces.len()];

        for y in 0..self.height {
            for x in 0..self.width {
                let fi = *self.winner.at(x, y);
                if fi < 0 {
                    continue;
                }
                let f = mesh.faces[fi as usize];
                let dd = *d_depth.at(x, y);
                d_face_normal[fi as usize] += *d_normal.at(x, y);
                if dd == 0.0 {
                    continue;
                }
                let pc = [
                    cam.world_to_cam(&mesh.vertices[f[0]]),
                    cam.world_to_cam(&mesh.vertices[f[1]]),
                    cam.world_to_cam(&mesh.vertices[f[2]]),
                ];
                let q: Vec<V2> = pc
                    .iter()
                    .map(|p| {
                        let (u, v) = cam.project_cam(p);
                        V2::new(u, v)
                    })
                    .collect();
                let area2 = edge(&q[0], &q[1], &q[2]);
                let perm: [usize; 3] = if area2 > 0.0 { [0, 1, 2] } else { [0, 2, 1] };
                let (qa, qb, qc) = (&q[perm[0]], &q[perm[1]], &q[perm[2]]);
                let p = V2::new(x as f64 + 0.5, y as f64 + 0.5);
                let e = [edge(qb, qc, &p), edge(qc, qa, &p), edge(qa, qb, &p)];
                let sum = e[0] + e[1] + e[2];
                let l = [e[0] / sum, e[1] / sum, e[2] / sum];
                let inv_w = [
                    1.0 / pc[perm[0]].z,
                    1.0 / pc[perm[1]].z,
                    1.0 / pc[perm[2]].z,
                ];
                let inv_z = l[0] * inv_w[0] + l[1] * inv_w[1] + l[2] * inv_w[2];
                let z = 1.0 / inv_z;

                let d_inv_z = -dd * z * z;
                let mut d_l = [0.0; 3];
                let mut d_pc = [V3::zeros(); 3]; // indexed by perm slot
                for k in 0..3 {
                    d_l[k] = d_inv_z * inv_w[k];
                    // d inv_w = d_inv_z * l[k]; inv_w = 1/z.
                    d_pc[k].z += -d_inv_z * l[k] / (pc[perm[k]].z * pc[perm[k]].z);
                }
                // lambda = e / sum.
                let dot: f64 = (0..3).map(|k| d_l[k] * l[k]).sum();
                let d_e: Vec<f64> = (0..3).map(|k| (d_l[k] - dot) / sum).collect();
                // e0 = edge(qb, qc, p) etc., with
                // edge(a, b, p) = (bx-ax)(py-ay) - (by-ay)(px-ax):
                // d/da = (by-py, px-bx), d/db = (py-ay, ax-px).
                let mut d_q = [V2::zeros(); 3];
                let pairs = [(1usize, 2usize), (2, 0), (0, 1)];
                for (k, (ia, ib)) in pairs.iter().enumerate() {
                    let (a, b) = (&[qa, qb, qc][*ia], &[qa, qb, qc][*ib]);
                    let g = d_e[k];
                    d_q[*ia].x += g * (b.y - p.y);
                    d_q[*ia].y += g * (p.x - b.x);
                    d_q[*ib].x += g * (p.y - a.y);
                    d_q[*ib].y += g * (a.x - p.x);
                }
                for k in 0..3 {
                    let pck = &pc[perm[k]];
                    d_pc[k].x += d_q[k].x * cam.fx / pck.z;
                    d_pc[k].z += -d_q[k].x * cam.fx * pck.x / (pck.z * pck.z);
                    d_pc[k].y += d_q[k].y * cam.fy / pck.z;
                    d_pc[k].z += -d_q[k].y * cam.fy * pck.y / (pck.z * pck.z);
                }
                for k in 0..3 {
                    d_vertices[f[perm[k]]] += cam.rot.transpose() * d_pc[k];
                }
            }
        }

        // Normal path, once per face.
        for (fi, f) in mesh.faces.iter().enumerate() {
            let dn = d_face_normal[fi];
            if dn == V3::zeros() {
                continue;
            }
            let pc = [
                cam.world_to_cam(&mesh.vertices[f[0]]),
                cam.world_to_cam(&mesh.vertices[f[1]]),
                cam.world_to_cam(&mesh.vertices[f[2]]),
            ];
            if pc.iter().any(|p| p.z <= Z_NEAR) {
                continue;
            }
            let raw = (pc[1] - pc[0]).cross(&(pc[2] - pc[0]));
            let norm = raw.norm();
            if norm < 1e-300 {
                continue;
            }
            let (_, _, sign) = face_normal_cam(&pc);
            let unit = raw / norm;
            let d_unit = dn * sign;
            let d_raw = (d_unit - unit * unit.dot(&d_unit)) / norm;
            // raw = u x v with u = pc1 - pc0, v = pc2 - pc0.
            let u = pc[1] - pc[0];
            let v = pc[2] - pc[0];
            let d_u = v.cross(&d_raw);
            let d_v = d_raw.cross(&u);
            let d_pc0 = -(d_u + d_v);
            for (k, d) in [(0usize, d_pc0), (1, d_u), (2, d_v)] {
                d_vertices[f[k]] += cam.rot.transpose() * d;
            }
        }
        d_vertices
    }
}

// --- depth to normal ---

pub struct DepthNormalCtx {
    /// Per pixel: x-tap and y-tap pixel coordinates, or -1 when the normal
    /// could not be formed.
    taps: Grid<[i64; 4]>,
}

/// Converts a depth map to camera-frame unit normals by backprojecting each
/// pixel and its +x/+y neighbors (one-sided at borders and next to
/// background) and crossing the difference vectors; flipped toward camera.
pub fn depth_to_normal(depth: &Grid<f64>, cam: &Camera) -> (Grid<V3>, DepthNormalCtx) {
    let (w, h) = (depth.width, depth.height);
    let mut normals = Grid::fill(w, h, V3::zeros());
    let mut ctx = DepthNormalCtx { taps: Grid::fill(w, h, [-1i64; 4]) };
    let fg = |x: i64, y: i64| -> bool {
        x >= 0 && y >= 0 && x < w as i64 && y < h as i64 && depth.at(x as usize, y as usize).is_finite()
    };
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            if !fg(x, y) {
                continue;
            }
            let xt = if fg(x + 1, y) { x + 1 } else if fg(x - 1, y) { x - 1 } else { -1 };
            let yt = if fg(x, y + 1) { y + 1 } else if fg(x, y - 1) { y - 1 } else { -1 };
            if xt < 0 || yt < 0 {
                continue;
            }
            let bp = |px: i64, py: i64| {
                cam.backproject(px as f64 + 0.5, py as f64 + 0.5, *depth.at(px as usize, py as usize))
            };
            let p = bp(x, y);
            let sx = if xt > x { 1.0 } else { -1.0 };
            let sy = if yt > y { 1.0 } else { -1.0 };
            let tx = (bp(xt, y) - p) * sx;
            let ty = (bp(x, yt) - p) * sy;
            let raw = tx.cross(&ty);
            let norm = raw.norm();
            if norm < 1e-14 {
                continue;
            }
            let mut n = raw / norm;
            if n.dot(&p) > 0.0 {
                n = -n;
            }
            *normals.at_mut(x as usize, y as usize) = n;
            *ctx.taps.at_mut(x as usize, y as usize) = [xt, y, x, yt];
        }
    }
    (normals, ctx)
}

impl DepthNormalCtx {
    /// Pulls gradients on the normals back onto the depth map.
    pub fn backward(
        &self,
        depth: &Grid<f64>,
        cam: &Camera,
        d_normal: &Grid<V3>,
    ) -> Grid<f64> {
        let (w, h) = (depth.width, depth.height);
        let mut d_depth = Grid::fill(w, h, 0.0);
        for y in 0..h {
            for x in 0..w {
                let taps = *self.taps.at(x, y);
                if taps[0] < 0 {
                    continue;
                }
                let dn = *d_normal.at(x, y);
                if dn == V3::zeros() {
                    continue;
                }
                let (xt, yt) = (taps[0], taps[3]);
                let bp = |px: i64, py: i64| {
                    cam.backproject(px as f64 + 0.5, py as f64 + 0.5, *depth.at(px as usize, py as usize))
                };
                // Backprojection is linear in its depth value.
                let dir = |px: i64, py: i64| {
                    V3::new(
                        (px as f64 + 0.5 - cam.cx) / cam.fx,
                        (py as f64 + 0.5 - cam.cy) / cam.fy,
                        1.0,
                    )
                };
                let p = bp(x as i64, y as i64);
                let sx = if xt > x as i64 { 1.0 } else { -1.0 };
                let sy = if yt > y as i64 { 1.0 } else { -1.0 };
                let tx = (bp(xt, y as i64) - p) * sx;
                let ty = (bp(x as i64, yt) - p) * sy;
                let raw = tx.cross(&ty);
                let norm = raw.norm();
                let unit = raw / norm;
                let flip = if unit.dot(&p) > 0.0 { -1.0 } else { 1.0 };
                // n = flip * raw/|raw|; the flip also couples to p, but only
                // through a measure-zero boundary, so it is treated constant.
                let d_unit = dn * flip;
                let d_raw = (d_unit - unit * unit.dot(&d_unit)) / norm;
                let d_tx = ty.cross(&d_raw);
                let d_ty = d_raw.cross(&tx);
                let d_p = -(d_tx * sx + d_ty * sy);
                *d_depth.at_mut(xt as usize, y) += d_tx.dot(&dir(xt, y as i64)) * sx;
                *d_depth.at_mut(x, yt as usize) += d_ty.dot(&dir(x as i64, yt)) * sy;
                *d_depth.at_mut(x, y) += d_p.dot(&dir(x as i64, y as i64));
            }
        }
        d_depth
    }
}

// --- depth antialiasing ---

/// 3x3 binomial smoothing of a depth map over foreground taps; background
/// pixels stay background. Returns the per-pixel normalization so the
/// backward pass can apply the adjoint.
pub fn smooth_depth(depth: &Grid<f64>) -> (Grid<f64>, Grid<f64>) {
    let (w, h) = (depth.width, depth.height);
    let mut out = Grid::fill(w, h, f64::INFINITY);
    let mut weights = Grid::fill(w, h, 0.0);
    let kernel = [1.0, 2.0, 1.0];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            if !depth.at(x as usize, y as usize).is_finite() {
                continue;
            }
            let mut acc = 0.0;
            let mut wsum = 0.0;
            for dy in -1..=1i64 {
                for dx in -1..=1i64 {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    let d = *depth.at(nx as usize, ny as usize);
                    if !d.is_finite() {
                        continue;
                    }
                    let k = kernel[(dx + 1) as usize] * kernel[(dy + 1) as usize];
                    acc += k * d;
                    wsum += k;
                }
            }
            *out.at_mut(x as usize, y as usize) = acc / wsum;
            *weights.at_mut(x as usize, y as usize) = wsum;
        }
    }
    (out, weights)
}

/// Adjoint of `smooth_depth`: scatters gradients on the smoothed map back to
/// the raw depth map.
pub fn smooth_depth_backward(depth: &Grid<f64>, weights: &Grid<f64>, d_out: &Grid<f64>) -> Grid<f64> {
    let (w, h) = (depth.width, depth.height);
    let mut d_in = Grid::fill(w, h, 0.0);
    let kernel = [1.0, 2.0, 1.0];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            if !depth.at(x as usize, y as usize).is_finite() {
                continue;
            }
            let g = *d_out.at(x as usize, y as usize) / *weights.at(x as usize, y as usize);
            if g == 0.0 {
                continue;
            }
            for dy in -1..=1i64 {
                for dx in -1..=1i64 {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    if !depth.at(nx as usize, ny as usize).is_finite() {
                        continue;
                    }
                    let k = kernel[(dx + 1) as usize] * kernel[(dy + 1) as usize];
                    *d_in.at_mut(nx as usize, ny as usize) += k * g;
                }
            }
        }
    }
    d_in
}

// --- debug dumps ---

/// Depth normalized min..max over foreground to 1..255 (background 0),
/// normals RGB-encoded as (n+1)/2, colors clamped to [0,1]; all 8-bit PNG.
pub fn dump_depth_png(depth: &Grid<f64>, path: &std::path::Path) -> Result<(), image::ImageError> {
    let (w, h) = (depth.width, depth.height);
    let finite: Vec<f64> = depth.data.iter().copied().filter(|d| d.is_finite()).collect();
    let lo = finite.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = (hi - lo).max(1e-12);
    let mut img = image::GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let d = *depth.at(x, y);
            let v = if d.is_finite() {
                1 + ((d - lo) / range * 254.0).round() as u8
            } else {
                0
            };
            img.put_pixel(x as u32, y as u32, image::Luma([v]));
        }
    }
    img.save(path)
}

pub fn dump_normal_png(normal: &Grid<V3>, path: &std::path::Path) -> Result<(), image::ImageError> {
    let (w, h) = (normal.width, normal.height);
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let n = normal.at(x, y);
            let px = [
                ((n.x + 1.0) * 0.5 * 255.0).round().clamp(0.0, 255.0) as u8,
                ((n.y + 1.0) * 0.5 * 255.0).round().clamp(0.0, 255.0) as u8,
                ((n.z + 1.0) * 0.5 * 255.0).round().clamp(0.0, 255.0) as u8,
            ];
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    img.save(path)
}

pub fn dump_color_png(color: &Grid<V3>, path: &std::path::Path) -> Result<(), image::ImageError> {
    let (w, h) = (color.width, color.height);
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let c = color.at(x, y);
            let px = [
                (c.x.clamp(0.0, 1.0) * 255.0).round() as u8,
                (c.y.clamp(0.0, 1.0) * 255.0).round() as u8,
                (c.z.clamp(0.0, 1.0) * 255.0).round() as u8,
            ];
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    img.save(path)
}
