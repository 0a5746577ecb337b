//! Gaussians, cameras, analytic ground-truth scenes, and scene serialization.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kdtree::KdTree;
use crate::math::{logit, rotation_from_quat, sigmoid, Grid, M3, V3, V4};

/// Magic bytes of the binary scene format.
pub const SCENE_MAGIC: &[u8; 8] = b"MILOSCN1";
/// Stored float64 values per Gaussian record: mu(3) quat(4) log_scale(3)
/// logit_opacity(1) rgb(3) sdf_pre(9).
pub const GAUSSIAN_RECORD_F64: usize = 23;
/// Background color used by reference renders and mesh-based view synthesis.
pub const BACKGROUND: V3 = V3::new(0.0, 0.0, 0.0);

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic bytes, not a scene file")]
    BadMagic,
    #[error("truncated scene file")]
    Truncated,
    #[error("unknown shape spec '{0}'")]
    UnknownShape(String),
    #[error("need at least {need} cameras, got {got}")]
    TooFewCameras { need: usize, got: usize },
    #[error("need at least one gaussian")]
    NoGaussians,
    #[error("camera json: {0}")]
    CameraJson(#[from] serde_json::Error),
}

fn io_err(path: &Path, source: std::io::Error) -> SceneError {
    SceneError::Io { path: path.display().to_string(), source }
}

/// One anisotropic Gaussian. Opacity and scale are stored pre-activation
/// (logit / log) so unconstrained optimization is valid; SDF values map
/// through tanh into (-1, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    pub mu: V3,
    /// Unit quaternion (w, x, y, z); renormalized after every optimizer step.
    pub quat: V4,
    pub log_scale: V3,
    pub logit_opacity: f64,
    pub rgb: V3,
    pub sdf_pre: [f64; 9],
}

impl Gaussian {
    pub fn rotation(&self) -> M3 {
        rotation_from_quat(&(self.quat / self.quat.norm()))
    }

    pub fn scale(&self) -> V3 {
        self.log_scale.map(f64::exp)
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.logit_opacity)
    }

    /// Activated SDF value of corner `i` (0 = center).
    pub fn sdf(&self, i: usize) -> f64 {
        self.sdf_pre[i].tanh()
    }

    /// Covariance R diag(s)^2 R^T.
    pub fn covariance(&self) -> M3 {
        let r = self.rotation();
        let s = self.scale();
        let m = r * M3::from_diagonal(&s);
        m * m.transpose()
    }
}

#[derive(Debug, Clone, Default)]
pub struct GaussianScene {
    pub gaussians: Vec<Gaussian>,
}

impl GaussianScene {
    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }
}

/// Pinhole camera. Right-handed; the camera looks down +z in its own frame
/// and depth is the camera-frame z coordinate, not ray length.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// World-to-camera rotation (rows are the camera axes in world coordinates).
    pub rot: M3,
    pub trans: V3,
}

pub const Z_NEAR: f64 = 1e-4;

impl Camera {
    /// Camera at `eye` looking at `target`, world +z used as the up hint.
    pub fn look_at(eye: V3, target: V3, fov_deg: f64, width: usize, height: usize) -> Camera {
        let forward = (target - eye).normalize();
        let up_hint = if forward.z.abs() > 0.99 { V3::new(1.0, 0.0, 0.0) } else { V3::new(0.0, 0.0, 1.0) };
        let right = up_hint.cross(&forward).normalize();
        let down = forward.cross(&right);
        let rot = M3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let trans = -rot * eye;
        let f = 0.5 * width as f64 / (0.5 * fov_deg.to_radians()).tan();
        Camera {
            fx: f,
            fy: f,
            cx: width as f64 * 0.5,
            cy: height as f64 * 0.5,
            width,
            height,
            rot,
            trans,
        }
    }

    pub fn world_to_cam(&self, p: &V3) -> V3 {
        self.rot * p + self.trans
    }

    /// Projects a camera-frame point to pixel coordinates.
    pub fn project_cam(&self, pc: &V3) -> (f64, f64) {
        (self.fx * pc.x / pc.z + self.cx, self.fy * pc.y / pc.z + self.cy)
    }

    /// Camera-frame point for pixel coordinates (u, v) at camera depth z.
    pub fn backproject(&self, u: f64, v: f64, z: f64) -> V3 {
        V3::new((u - self.cx) / self.fx * z, (v - self.cy) / self.fy * z, z)
    }

    /// Ray direction (camera frame, unit z) through pixel coordinates.
    pub fn ray_dir_cam(&self, u: f64, v: f64) -> V3 {
        V3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    pub fn cam_to_world_dir(&self, d: &V3) -> V3 {
        self.rot.transpose() * d
    }

    pub fn center_world(&self) -> V3 {
        -(self.rot.transpose() * self.trans)
    }

    /// True when the world point projects inside the image with z > Z_NEAR;
    /// also returns the pixel indices.
    pub fn sees(&self, p: &V3) -> Option<(usize, usize, f64)> {
        let pc = self.world_to_cam(p);
        if pc.z <= Z_NEAR {
            return None;
        }
        let (u, v) = self.project_cam(&pc);
        if u < 0.0 || v < 0.0 || u >= self.width as f64 || v >= self.height as f64 {
            return None;
        }
        Some((u as usize, v as usize, pc.z))
    }
}

/// Analytic SDF shapes used as ground truth. Negative inside.
#[derive(Debug, Clone, PartialEq)]
pub enum Shape {
    Sphere { radius: f64 },
    Torus { major: f64, minor: f64 },
    /// Union of translated shapes (sdf = min over parts).
    Union(Vec<(V3, Shape)>),
}

impl Shape {
    pub fn sdf(&self, p: &V3) -> f64 {
        match self {
            Shape::Sphere { radius } => p.norm() - radius,
            Shape::Torus { major, minor } => {
                let q = V2::new((p.x * p.x + p.y * p.y).sqrt() - major, p.z);
                q.norm() - minor
            }
            Shape::Union(parts) => parts
                .iter()
                .map(|(off, s)| s.sdf(&(p - off)))
                .fold(f64::INFINITY, f64::min),
        }
    }

    /// Radius of a bounding sphere centered at the origin.
    pub fn bounding_radius(&self) -> f64 {
        match self {
            Shape::Sphere { radius } => *radius,
            Shape::Torus { major, minor } => major + minor,
            Shape::Union(parts) => parts
                .iter()
                .map(|(off, s)| off.norm() + s.bounding_radius())
                .fold(0.0, f64::max),
        }
    }

    /// Diagonal of the axis-aligned bounding box.
    pub fn bbox_diag(&self) -> f64 {
        2.0 * self.bounding_radius() * 3.0_f64.sqrt()
    }

    /// Points uniformly distributed on the zero level set.
    pub fn sample_surface(&self, n: usize, rng: &mut impl Rng) -> Vec<V3> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let p = match self {
                Shape::Sphere { radius } => {
                    let d = sample_unit_dir(rng);
                    d * *radius
                }
                Shape::Torus { major, minor } => {
                    let u = rng.gen::<f64>() * std::f64::consts::TAU;
                    let v = rng.gen::<f64>() * std::f64::consts::TAU;
                    // Area element scales with R + r cos(v); rejection keeps sampling uniform.
                    if rng.gen::<f64>() > (major + minor * v.cos()) / (major + minor) {
                        continue;
                    }
                    V3::new(
                        (major + minor * v.cos()) * u.cos(),
                        (major + minor * v.cos()) * u.sin(),
                        minor * v.sin(),
                    )
                }
                Shape::Union(parts) => {
                    let areas: Vec<f64> = parts.iter().map(|(_, s)| s.bounding_radius().powi(2)).collect();
                    let total: f64 = areas.iter().sum();
                    let mut pick = rng.gen::<f64>() * total;
                    let mut k = 0;
                    for (i, a) in areas.iter().enumerate() {
                        if pick < *a {
                            k = i;
                            break;
                        }
                        pick -= a;
                    }
                    let (off, s) = &parts[k];
                    let q = s.sample_surface(1, rng)[0] + off;
                    // Reject points swallowed by another part of the union.
                    if self.sdf(&q).abs() > 1e-9 {
                        continue;
                    }
                    q
                }
            };
            out.push(p);
        }
        out
    }

    /// Central-difference normal of the SDF.
    pub fn normal(&self, p: &V3) -> V3 {
        let h = 1e-5;
        let mut n = V3::zeros();
        for a in 0..3 {
            let mut pp = *p;
            let mut pm = *p;
            pp[a] += h;
            pm[a] -= h;
            n[a] = self.sdf(&pp) - self.sdf(&pm);
        }
        n.normalize()
    }
}

use crate::math::V2;

/// Synthetic capture: analytic shape, cameras on a bounding sphere,
/// ray-traced reference images, and surface samples for evaluation.
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub shape: Shape,
    pub cameras: Vec<Camera>,
    pub gt_samples: Vec<V3>,
    pub targets: Vec<Grid<V3>>,
    pub bbox_diag: f64,
}

pub const GT_SAMPLE_COUNT: usize = 16384;

/// Surface color used by the reference renders: smooth in both position and
/// normal so the photometric loss carries spatial signal.
pub fn surface_color(p: &V3, n: &V3) -> V3 {
    let c = V3::new(
        0.5 + 0.3 * n.x + 0.2 * (2.0 * p.x).sin(),
        0.5 + 0.3 * n.y + 0.2 * (2.0 * p.y).sin(),
        0.5 + 0.3 * n.z + 0.2 * (2.0 * p.z).sin(),
    );
    c.map(|v| v.clamp(0.0, 1.0))
}

fn sample_unit_dir(rng: &mut impl Rng) -> V3 {
    loop {
        let v = V3::new(
            rng.gen::<f64>() * 2.0 - 1.0,
            rng.gen::<f64>() * 2.0 - 1.0,
            rng.gen::<f64>() * 2.0 - 1.0,
        );
        let n = v.norm();
        if n > 1e-6 && n <= 1.0 {
            return v / n;
        }
    }
}

/// Sphere-traces the shape; returns the hit point or None.
pub fn trace_shape(shape: &Shape, origin: &V3, dir: &V3, t_max: f64) -> Option<V3> {
    let mut t = 0.0;
    for _ in 0..256 {
        let p = origin + dir * t;
        let d = shape.sdf(&p);
        if d < 1e-7 {
            return Some(p);
        }
        t += d;
        if t > t_max {
            return None;
        }
    }
    None
}

/// Ray-traced reference image for one camera.
pub fn render_reference(shape: &Shape, cam: &Camera) -> Grid<V3> {
    let mut img = Grid::fill(cam.width, cam.height, BACKGROUND);
    let t_max = cam.center_world().norm() + shape.bounding_radius() * 2.0 + 1.0;
    let origin = cam.center_world();
    for y in 0..cam.height {
        for x in 0..cam.width {
            let d_cam = cam.ray_dir_cam(x as f64 + 0.5, y as f64 + 0.5).normalize();
            let d = cam.cam_to_world_dir(&d_cam);
            if let Some(p) = trace_shape(shape, &origin, &d, t_max) {
                let n = shape.normal(&p);
                *img.at_mut(x, y) = surface_color(&p, &n);
            }
        }
    }
    img
}

/// Reference depth map (camera z of the traced hit; +inf where the ray misses).
pub fn render_reference_depth(shape: &Shape, cam: &Camera) -> Grid<f64> {
    let mut img = Grid::fill(cam.width, cam.height, f64::INFINITY);
    let t_max = cam.center_world().norm() + shape.bounding_radius() * 2.0 + 1.0;
    let origin = cam.center_world();
    for y in 0..cam.height {
        for x in 0..cam.width {
            let d_cam = cam.ray_dir_cam(x as f64 + 0.5, y as f64 + 0.5).normalize();
            let d = cam.cam_to_world_dir(&d_cam);
            if let Some(p) = trace_shape(shape, &origin, &d, t_max) {
                *img.at_mut(x, y) = cam.world_to_cam(&p).z;
            }
        }
    }
    img
}

/// Evenly distributed camera positions via a Fibonacci sphere.
fn fibonacci_directions(n: usize) -> Vec<V3> {
    let golden = (1.0 + 5.0_f64.sqrt()) / 2.0;
    (0..n)
        .map(|i| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = std::f64::consts::TAU * (i as f64 / golden).fract();
            V3::new(r * phi.cos(), r * phi.sin(), z)
        })
        .collect()
}

pub const CAMERA_FOV_DEG: f64 = 50.0;

/// Builds the synthetic scene and an initial Gaussian cloud near its surface.
///
/// Gaussians are rejection-sampled within |sdf| < 0.05 * bbox_diag of the
/// surface, isotropic scale equal to the nearest-neighbor distance, opacity
/// 0.8. Deterministic under `seed`.
pub fn make_synthetic_scene(
    shape: &Shape,
    n_gaussians: usize,
    n_cameras: usize,
    resolution: usize,
    seed: u64,
) -> Result<(SyntheticScene, GaussianScene), SceneError> {
    if n_gaussians < 1 {
        return Err(SceneError::NoGaussians);
    }
    if n_cameras < 2 {
        // Occupancy labeling and depth fusion need multiple views.
        return Err(SceneError::TooFewCameras { need: 2, got: n_cameras });
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let bound = shape.bounding_radius();
    let diag = shape.bbox_diag();
    let band = 0.05 * diag;

    let mut centers = Vec::with_capacity(n_gaussians);
    while centers.len() < n_gaussians {
        let p = V3::new(
            (rng.gen::<f64>() * 2.0 - 1.0) * bound * 1.2,
            (rng.gen::<f64>() * 2.0 - 1.0) * bound * 1.2,
            (rng.gen::<f64>() * 2.0 - 1.0) * bound * 1.2,
        );
        if shape.sdf(&p).abs() < band {
            centers.push(p);
        }
    }

    let tree = KdTree::build(&centers);
    let mut gaussians = Vec::with_capacity(n_gaussians);
    for (i, &mu) in centers.iter().enumerate() {
        let nn = if centers.len() > 1 {
            let mut hits = tree.within_radius(&mu, bound * 4.0);
            hits.retain(|&j| j != i);
            hits.iter()
                .map(|&j| (centers[j] - mu).norm())
                .fold(f64::INFINITY, f64::min)
        } else {
            bound * 0.5
        };
        let nn = if nn.is_finite() { nn.max(1e-4 * diag) } else { bound * 0.5 };
        let q: V4 = {
            let v = V4::new(
                rng.gen::<f64>() - 0.5,
                rng.gen::<f64>() - 0.5,
                rng.gen::<f64>() - 0.5,
                rng.gen::<f64>() - 0.5,
            );
            v / v.norm()
        };
        let d = shape.sdf(&mu);
        // Seed the color from the reference palette at the nearest surface point.
        let n = shape.normal(&mu);
        let surf = mu - n * d;
        gaussians.push(Gaussian {
            mu,
            quat: q,
            log_scale: V3::repeat(nn.ln()),
            logit_opacity: logit(0.8),
            rgb: surface_color(&surf, &n),
            sdf_pre: [0.0; 9],
        });
    }

    let cam_radius = 3.0 * bound;
    let cameras: Vec<Camera> = fibonacci_directions(n_cameras)
        .into_iter()
        .map(|d| Camera::look_at(d * cam_radius, V3::zeros(), CAMERA_FOV_DEG, resolution, resolution))
        .collect();

    let gt_samples = shape.sample_surface(GT_SAMPLE_COUNT, &mut rng);
    debug_assert!(gt_samples.iter().all(|p| shape.sdf(p).abs() < 1e-6));
    let targets = cameras.iter().map(|c| render_reference(shape, c)).collect();

    Ok((
        SyntheticScene { shape: shape.clone(), cameras, gt_samples, targets, bbox_diag: diag },
        GaussianScene { gaussians },
    ))
}

/// Parses a shape spec such as "sphere 1.0", "torus 1.0 0.3", or
/// "twin 0.8 0.5" (two spheres of the given radius at +-x offset).
pub fn parse_shape(spec: &str) -> Result<Shape, SceneError> {
    let parts: Vec<&str> = spec.split_whitespace().collect();
    let bad = || SceneError::UnknownShape(spec.to_string());
    let num = |s: &&str| s.parse::<f64>().map_err(|_| bad());
    match parts.as_slice() {
        ["sphere", r] => Ok(Shape::Sphere { radius: num(r)? }),
        ["torus", major, minor] => Ok(Shape::Torus { major: num(major)?, minor: num(minor)? }),
        ["twin", offset, r] => {
            let (off, rad) = (num(offset)?, num(r)?);
            Ok(Shape::Union(vec![
                (V3::new(-off, 0.0, 0.0), Shape::Sphere { radius: rad }),
                (V3::new(off, 0.0, 0.0), Shape::Sphere { radius: rad }),
            ]))
        }
        _ => Err(bad()),
    }
}

// --- serialization ---

pub fn save_scene(scene: &GaussianScene, path: &Path) -> Result<(), SceneError> {
    let mut buf = Vec::with_capacity(16 + scene.len() * GAUSSIAN_RECORD_F64 * 8);
    buf.extend_from_slice(SCENE_MAGIC);
    buf.extend_from_slice(&(scene.len() as u64).to_le_bytes());
    for g in &scene.gaussians {
        let mut rec = [0f64; GAUSSIAN_RECORD_F64];
        rec[0..3].copy_from_slice(g.mu.as_slice());
        rec[3..7].copy_from_slice(g.quat.as_slice());
        rec[7..10].copy_from_slice(g.log_scale.as_slice());
        rec[10] = g.logit_opacity;
        rec[11..14].copy_from_slice(g.rgb.as_slice());
        rec[14..23].copy_from_slice(&g.sdf_pre);
        for v in rec {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(&buf).map_err(|e| io_err(path, e))
}

pub fn load_scene(path: &Path) -> Result<GaussianScene, SceneError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| io_err(path, e))?
        .read_to_end(&mut bytes)
        .map_err(|e| io_err(path, e))?;
    if bytes.len() < 16 {
        return Err(SceneError::Truncated);
    }
    if &bytes[0..8] != SCENE_MAGIC {
        return Err(SceneError::BadMagic);
    }
    let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let expected = 16 + count * GAUSSIAN_RECORD_F64 * 8;
    if bytes.len() < expected {
        return Err(SceneError::Truncated);
    }
    let mut gaussians = Vec::with_capacity(count);
    let mut off = 16;
    let mut next = || {
        let v = f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
        off += 8;
        v
    };
    for _ in 0..count {
        let mu = V3::new(next(), next(), next());
        let quat = V4::new(next(), next(), next(), next());
        let log_scale = V3::new(next(), next(), next());
        let logit_opacity = next();
        let rgb = V3::new(next(), next(), next());
        let mut sdf_pre = [0f64; 9];
        for s in sdf_pre.iter_mut() {
            *s = next();
        }
        gaussians.push(Gaussian { mu, quat, log_scale, logit_opacity, rgb, sdf_pre });
    }
    Ok(GaussianScene { gaussians })
}

#[derive(Serialize, Deserialize)]
struct CameraJson {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: usize,
    height: usize,
    /// Row-major world-to-camera rotation.
    rotation: [f64; 9],
    translation: [f64; 3],
}

pub fn save_cameras(cams: &[Camera], path: &Path) -> Result<(), SceneError> {
    let rows: Vec<CameraJson> = cams
        .iter()
        .map(|c| CameraJson {
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            width: c.width,
            height: c.height,
            rotation: {
                let mut r = [0f64; 9];
                for i in 0..3 {
                    for j in 0..3 {
                        r[i * 3 + j] = c.rot[(i, j)];
                    }
                }
                r
            },
            translation: [c.trans.x, c.trans.y, c.trans.z],
        })
        .collect();
    let json = serde_json::to_string_pretty(&rows)?;
    std::fs::write(path, json).map_err(|e| io_err(path, e))
}

pub fn load_cameras(path: &Path) -> Result<Vec<Camera>, SceneError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let rows: Vec<CameraJson> = serde_json::from_str(&text)?;
    Ok(rows
        .into_iter()
        .map(|j| Camera {
            fx: j.fx,
            fy: j.fy,
            cx: j.cx,
            cy: j.cy,
            width: j.width,
            height: j.height,
            rot: M3::from_fn(|i, k| j.rotation[i * 3 + k]),
            trans: V3::new(j.translation[0], j.translation[1], j.translation[2]),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_gaussian_lands_near_surface() {
        let shape = Shape::Sphere { radius: 1.0 };
        let (_, scene) = make_synthetic_scene(&shape, 1, 2, 16, 0).unwrap();
        assert_eq!(scene.len(), 1);
        let d = shape.sdf(&scene.gaussians[0].mu).abs();
        assert!(d < 0.05 * 2.0 * 3.0_f64.sqrt());
    }

    #[test]
    fn construction_is_deterministic() {
        let shape = Shape::Sphere { radius: 1.0 };
        let (a_s, a_g) = make_synthetic_scene(&shape, 500, 16, 16, 7).unwrap();
        let (b_s, b_g) = make_synthetic_scene(&shape, 500, 16, 16, 7).unwrap();
        assert_eq!(a_g.gaussians, b_g.gaussians);
        assert_eq!(a_s.gt_samples, b_s.gt_samples);
        for (x, y) in a_s.targets.iter().zip(&b_s.targets) {
            assert_eq!(x.data, y.data);
        }
    }

    #[test]
    fn torus_centers_stay_in_band() {
        let shape = Shape::Torus { major: 1.0, minor: 0.3 };
        let (synth, scene) = make_synthetic_scene(&shape, 500, 16, 16, 1).unwrap();
        let mean: f64 = scene.gaussians.iter().map(|g| shape.sdf(&g.mu).abs()).sum::<f64>()
            / scene.len() as f64;
        assert!(mean < 0.05 * synth.bbox_diag);
    }

    #[test]
    fn unknown_shape_and_too_few_cameras_error() {
        assert!(matches!(parse_shape("cube 1"), Err(SceneError::UnknownShape(_))));
        let shape = Shape::Sphere { radius: 1.0 };
        assert!(matches!(
            make_synthetic_scene(&shape, 10, 1, 16, 0),
            Err(SceneError::TooFewCameras { .. })
        ));
    }

    #[test]
    fn covariance_is_positive_definite() {
        let shape = Shape::Sphere { radius: 1.0 };
        let (_, scene) = make_synthetic_scene(&shape, 50, 2, 8, 3).unwrap();
        for g in &scene.gaussians {
            assert!(nalgebra::Cholesky::new(g.covariance()).is_some());
        }
    }

    #[test]
    fn cameras_contain_centroid() {
        let shape = Shape::Torus { major: 1.0, minor: 0.3 };
        let (synth, _) = make_synthetic_scene(&shape, 10, 12, 32, 4).unwrap();
        for cam in &synth.cameras {
            assert!(cam.sees(&V3::zeros()).is_some());
            // Extrinsic rotation stays orthonormal with det +1.
            let r = cam.rot;
            assert!((r.transpose() * r - M3::identity()).abs().max() < 1e-12);
            assert!((r.determinant() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn scene_roundtrip_is_bit_exact() {
        let shape = Shape::Sphere { radius: 1.0 };
        let (_, mut scene) = make_synthetic_scene(&shape, 10, 2, 8, 5).unwrap();
        scene.gaussians[3].sdf_pre[4] = -0.123456789012345;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scene.bin");
        save_scene(&scene, &path).unwrap();
        let back = load_scene(&path).unwrap();
        assert_eq!(scene.gaussians, back.gaussians);
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.bin");
        std::fs::write(&path, b"NOTASCN1\x00\x00\x00\x00\x00\x00\x00\x00").unwrap();
        assert!(matches!(load_scene(&path), Err(SceneError::BadMagic)));
    }

    #[test]
    fn file_size_matches_record_layout() {
        let shape = Shape::Sphere { radius: 1.0 };
        let (_, scene) = make_synthetic_scene(&shape, 100, 2, 8, 6).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scene.bin");
        save_scene(&scene, &path).unwrap();
        let len = std::fs::metadata(&path).unwrap().len() as usize;
        assert_eq!(len, 16 + scene.len() * GAUSSIAN_RECORD_F64 * 8);
    }

    #[test]
    fn camera_json_roundtrip() {
        let cams = vec![Camera::look_at(V3::new(3.0, 0.5, 1.0), V3::zeros(), 50.0, 64, 48)];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cams.json");
        save_cameras(&cams, &path).unwrap();
        let back = load_cameras(&path).unwrap();
        assert_eq!(cams, back);
    }

    #[test]
    fn gt_samples_lie_on_surface() {
        let shape = Shape::Union(vec![
            (V3::new(-0.8, 0.0, 0.0), Shape::Sphere { radius: 0.5 }),
            (V3::new(0.8, 0.0, 0.0), Shape::Sphere { radius: 0.5 }),
        ]);
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        for p in shape.sample_surface(200, &mut rng) {
            assert!(shape.sdf(&p).abs() < 1e-6);
        }
    }
}
