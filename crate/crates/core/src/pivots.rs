//! Delaunay sites derived from Gaussians (center + 8 scaled principal-axis
//! corners) and importance-weighted selection of which Gaussians act as
//! pivots.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::math::{normalize_backward, rotation_backward, M3, V3, V4};
use crate::render::{render_gaussians, GaussianParamGrads};
use crate::scene::{Camera, GaussianScene};

#[derive(Debug, Error)]
pub enum PivotError {
    #[error("selected gaussian index {0} out of range ({1} gaussians)")]
    IndexOutOfRange(usize, usize),
    #[error("selection is empty")]
    EmptySelection,
    #[error("budget {budget} exceeds gaussian count {count}")]
    BudgetTooLarge { budget: usize, count: usize },
    #[error("budget must be at least 1")]
    ZeroBudget,
    #[error(transparent)]
    Render(#[from] crate::render::RenderError),
}

/// Sites p_{k,i} = mu_k + R_k (s_k ⊙ b_i) with b_0 = 0 and b_1..b_8 the
/// corners of the unit box scaled by `corner_mult`, plus back-references.
#[derive(Debug, Clone)]
pub struct PivotSet {
    pub sites: Vec<V3>,
    /// (gaussian index, corner index 0..9) per site.
    pub provenance: Vec<(usize, usize)>,
    pub selected: Vec<usize>,
    pub corner_mult: f64,
}

/// Corner offsets in fixed lexicographic sign order; index 0 is the center.
pub const CORNERS: [[f64; 3]; 9] = [
    [0.0, 0.0, 0.0],
    [-1.0, -1.0, -1.0],
    [-1.0, -1.0, 1.0],
    [-1.0, 1.0, -1.0],
    [-1.0, 1.0, 1.0],
    [1.0, -1.0, -1.0],
    [1.0, -1.0, 1.0],
    [1.0, 1.0, -1.0],
    [1.0, 1.0, 1.0],
];

pub fn sample_pivots(
    scene: &GaussianScene,
    selected: &[usize],
    corner_mult: f64,
) -> Result<PivotSet, PivotError> {
    if selected.is_empty() {
        return Err(PivotError::EmptySelection);
    }
    let mut sites = Vec::with_capacity(selected.len() * 9);
    let mut provenance = Vec::with_capacity(selected.len() * 9);
    for &k in selected {
        let g = scene.gaussians.get(k).ok_or(PivotError::IndexOutOfRange(k, scene.len()))?;
        let rot = g.rotation();
        let scale = g.scale();
        for (ci, b) in CORNERS.iter().enumerate() {
            let local = V3::new(
                scale.x * b[0] * corner_mult,
                scale.y * b[1] * corner_mult,
                scale.z * b[2] * corner_mult,
            );
            sites.push(g.mu + rot * local);
            provenance.push((k, ci));
        }
    }
    Ok(PivotSet { sites, provenance, selected: selected.to_vec(), corner_mult })
}

impl PivotSet {
    /// Pulls per-site gradients back to mu, quat (pre-norm) and log-scale.
    pub fn backward(&self, scene: &GaussianScene, d_sites: &[V3], grads: &mut GaussianParamGrads) {
        debug_assert_eq!(d_sites.len(), self.sites.len());
        for (site_idx, &(k, ci)) in self.provenance.iter().enumerate() {
            let g_site = d_sites[site_idx];
            if g_site == V3::zeros() {
                continue;
            }
            let g = &scene.gaussians[k];
            grads.mu[k] += g_site;
            if ci == 0 {
                continue;
            }
            let q_unit = g.quat / g.quat.norm();
            let rot = crate::math::rotation_from_quat(&q_unit);
            let scale = g.scale();
            let b = CORNERS[ci];
            let local = V3::new(
                scale.x * b[0] * self.corner_mult,
                scale.y * b[1] * self.corner_mult,
                scale.z * b[2] * self.corner_mult,
            );
            // site = mu + R local(scale): dR = g local^T.
            let d_rot: M3 = g_site * local.transpose();
            let dq_unit = rotation_backward(&q_unit, &d_rot);
            grads.quat[k] += normalize_backward(&g.quat, &dq_unit);
            // d/d log_s_j = (R^T g)_j * local_j (local already includes s_j).
            let rtg = rot.transpose() * g_site;
            for j in 0..3 {
                grads.log_scale[k][j] += rtg[j] * local[j];
            }
        }
    }
}

/// Per-Gaussian accumulated blending weight, averaged over views.
#[derive(Debug, Clone)]
pub struct ImportanceScores {
    pub score: Vec<f64>,
}

/// score_k = sum over all pixels of all views of the blending coefficient
/// alpha_k G_k T_k contributed by Gaussian k, divided by the view count.
pub fn compute_importance(
    scene: &GaussianScene,
    cameras: &[Camera],
) -> Result<ImportanceScores, PivotError> {
    let mut score = vec![0.0; scene.len()];
    for cam in cameras {
        let (_, ctx) = render_gaussians(scene, cam)?;
        for (k, w) in ctx.blend_weight_sums().iter().enumerate() {
            score[k] += w;
        }
    }
    let n = cameras.len().max(1) as f64;
    for s in score.iter_mut() {
        *s /= n;
    }
    Ok(ImportanceScores { score })
}

/// Samples `budget` distinct Gaussians without replacement with probability
/// proportional to score, via the exponential race key -ln(u)/score. Zero
/// scores are excluded unless the budget exceeds the positive-score count.
/// Returns ascending indices; deterministic under `seed`.
pub fn select_pivot_gaussians(
    scores: &ImportanceScores,
    budget: usize,
    seed: u64,
) -> Result<Vec<usize>, PivotError> {
    let n = scores.score.len();
    if budget == 0 {
        return Err(PivotError::ZeroBudget);
    }
    if budget > n {
        return Err(PivotError::BudgetTooLarge { budget, count: n });
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut keyed: Vec<(f64, usize)> = Vec::with_capacity(n);
    let mut zeros: Vec<(f64, usize)> = Vec::new();
    for (i, &s) in scores.score.iter().enumerate() {
        let u: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
        let race = -u.ln();
        if s > 0.0 {
            keyed.push((race / s, i));
        } else {
            zeros.push((race, i));
        }
    }
    keyed.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    let mut picked: Vec<usize> = keyed.iter().take(budget).map(|&(_, i)| i).collect();
    if picked.len() < budget {
        zeros.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        picked.extend(zeros.iter().take(budget - picked.len()).map(|&(_, i)| i));
    }
    picked.sort_unstable();
    Ok(picked)
}

/// Base-mode pruning: keeps only the selected Gaussians. Returns the scene
/// restricted to the selection (which then maps to indices 0..budget).
pub fn prune_to_selection(scene: &GaussianScene, selected: &[usize]) -> GaussianScene {
    GaussianScene {
        gaussians: selected.iter().map(|&k| scene.gaussians[k].clone()).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{make_synthetic_scene, Gaussian, Shape};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn identity_gaussian(mu: V3, scale: V3) -> Gaussian {
        Gaussian {
            mu,
            quat: V4::new(1.0, 0.0, 0.0, 0.0),
            log_scale: scale.map(f64::ln),
            logit_opacity: 0.0,
            rgb: V3::repeat(0.5),
            sdf_pre: [0.0; 9],
        }
    }

    #[test]
    fn identity_rotation_unit_scale_corners() {
        let scene = GaussianScene {
            gaussians: vec![identity_gaussian(V3::zeros(), V3::repeat(1.0))],
        };
        let pivots = sample_pivots(&scene, &[0], 1.0).unwrap();
        assert_eq!(pivots.sites.len(), 9);
        assert_eq!(pivots.sites[0], V3::zeros());
        for (i, b) in CORNERS.iter().enumerate().skip(1) {
            assert_eq!(pivots.sites[i], V3::new(b[0], b[1], b[2]));
        }
    }

    #[test]
    fn componentwise_scaling() {
        let scene = GaussianScene {
            gaussians: vec![identity_gaussian(V3::new(1.0, 2.0, 3.0), V3::new(2.0, 1.0, 1.0))],
        };
        let pivots = sample_pivots(&scene, &[0], 1.0).unwrap();
        // Corner b = (1,1,1) is index 8.
        assert!((pivots.sites[8] - V3::new(3.0, 3.0, 4.0)).norm() < 1e-12);
    }

    #[test]
    fn sites_match_explicit_rotation_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let q = {
                let v = V4::new(
                    rng.gen::<f64>() - 0.5,
                    rng.gen::<f64>() - 0.5,
                    rng.gen::<f64>() - 0.5,
                    rng.gen::<f64>() - 0.5,
                );
                v / v.norm()
            };
            let mu = V3::new(rng.gen(), rng.gen(), rng.gen());
            let s = V3::new(
                0.5 + rng.gen::<f64>(),
                0.5 + rng.gen::<f64>(),
                0.5 + rng.gen::<f64>(),
            );
            let g = Gaussian {
                mu,
                quat: q,
                log_scale: s.map(f64::ln),
                logit_opacity: 0.0,
                rgb: V3::repeat(0.5),
                sdf_pre: [0.0; 9],
            };
            let scene = GaussianScene { gaussians: vec![g] };
            let pivots = sample_pivots(&scene, &[0], 1.3).unwrap();
            // Oracle: build the rotation matrix explicitly from the unit
            // quaternion and multiply.
            let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
            let r = M3::new(
                1.0 - 2.0 * (y * y + z * z),
                2.0 * (x * y - w * z),
                2.0 * (x * z + w * y),
                2.0 * (x * y + w * z),
                1.0 - 2.0 * (x * x + z * z),
                2.0 * (y * z - w * x),
                2.0 * (x * z - w * y),
                2.0 * (y * z + w * x),
                1.0 - 2.0 * (x * x + y * y),
            );
            for (i, b) in CORNERS.iter().enumerate() {
                let expect = mu + r * V3::new(s.x * b[0] * 1.3, s.y * b[1] * 1.3, s.z * b[2] * 1.3);
                assert!((pivots.sites[i] - expect).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn antipodal_corners_sum_to_twice_mu() {
        let shape = Shape::Sphere { radius: 1.0 };
        let (_, scene) = make_synthetic_scene(&shape, 20, 2, 8, 1).unwrap();
        let selected: Vec<usize> = (0..20).collect();
        let pivots = sample_pivots(&scene, &selected, 1.0).unwrap();
        for k in 0..20 {
            let base = k * 9;
            let mu2 = scene.gaussians[k].mu * 2.0;
            // Antipodal pairs: (1,8), (2,7), (3,6), (4,5).
            for (a, b) in [(1, 8), (2, 7), (3, 6), (4, 5)] {
                let s = pivots.sites[base + a] + pivots.sites[base + b];
                assert!((s - mu2).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn pivot_jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let shape = Shape::Sphere { radius: 1.0 };
        let (_, scene) = make_synthetic_scene(&shape, 4, 2, 8, 2).unwrap();
        let selected = vec![0usize, 2, 3];
        let pivots = sample_pivots(&scene, &selected, 1.0).unwrap();
        let weights: Vec<V3> = (0..pivots.sites.len())
            .map(|_| V3::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5))
            .collect();
        let loss = |s: &GaussianScene| -> f64 {
            let p = sample_pivots(s, &selected, 1.0).unwrap();
            p.sites.iter().zip(&weights).map(|(site, w)| site.dot(w)).sum()
        };
        let mut grads = GaussianParamGrads::zeros(scene.len());
        pivots.backward(&scene, &weights, &mut grads);
        let h = 1e-5;
        for &k in &selected {
            for c in 0..3 {
                let mut sp = scene.clone();
                let mut sm = scene.clone();
                sp.gaussians[k].mu[c] += h;
                sm.gaussians[k].mu[c] -= h;
                let fd = (loss(&sp) - loss(&sm)) / (2.0 * h);
                assert!((grads.mu[k][c] - fd).abs() / fd.abs().max(1e-9) < 1e-6);
            }
            for c in 0..4 {
                let mut sp = scene.clone();
                let mut sm = scene.clone();
                sp.gaussians[k].quat[c] += h;
                sm.gaussians[k].quat[c] -= h;
                let fd = (loss(&sp) - loss(&sm)) / (2.0 * h);
                let a = grads.quat[k][c];
                assert!((a - fd).abs() / fd.abs().max(a.abs()).max(1e-9) < 1e-6);
            }
            for c in 0..3 {
                let mut sp = scene.clone();
                let mut sm = scene.clone();
                sp.gaussians[k].log_scale[c] += h;
                sm.gaussians[k].log_scale[c] -= h;
                let fd = (loss(&sp) - loss(&sm)) / (2.0 * h);
                let a = grads.log_scale[k][c];
                assert!((a - fd).abs() / fd.abs().max(a.abs()).max(1e-9) < 1e-6);
            }
        }
    }

    #[test]
    fn out_of_range_selection_errors() {
        let scene = GaussianScene {
            gaussians: vec![identity_gaussian(V3::zeros(), V3::repeat(1.0))],
        };
        assert!(matches!(
            sample_pivots(&scene, &[1], 1.0),
            Err(PivotError::IndexOutOfRange(1, 1))
        ));
        assert!(matches!(sample_pivots(&scene, &[], 1.0), Err(PivotError::EmptySelection)));
    }

    #[test]
    fn sole_contributor_gets_positive_score() {
        let cam = Camera::look_at(V3::new(0.0, 0.0, -2.0), V3::zeros(), 50.0, 16, 16);
        let scene = GaussianScene {
            gaussians: vec![identity_gaussian(V3::zeros(), V3::repeat(0.5))],
        };
        let scores = compute_importance(&scene, &[cam]).unwrap();
        assert!(scores.score[0] > 0.0);
    }

    #[test]
    fn occluded_gaussian_scores_negligibly() {
        let cam = Camera::look_at(V3::new(0.0, 0.0, -3.0), V3::zeros(), 50.0, 16, 16);
        // Opaque occluder in front, wide enough that every image ray passes
        // through its near-unit-density core; victim behind on the same axis.
        let mut front = identity_gaussian(V3::new(0.0, 0.0, -1.0), V3::repeat(30.0));
        front.logit_opacity = 14.0;
        let back = identity_gaussian(V3::new(0.0, 0.0, 1.0), V3::repeat(3.0));
        let scene = GaussianScene { gaussians: vec![front, back] };
        let scores = compute_importance(&scene, &[cam]).unwrap();
        assert!(scores.score[1] < 1e-3 * scores.score[0], "{:?}", scores.score);
    }

    #[test]
    fn score_scales_with_pixel_count() {
        let shape = Shape::Sphere { radius: 1.0 };
        let (synth, scene) = make_synthetic_scene(&shape, 2, 2, 32, 5).unwrap();
        let cam_lo = synth.cameras[0].clone();
        let mut cam_hi = cam_lo.clone();
        cam_hi.width *= 2;
        cam_hi.height *= 2;
        cam_hi.fx *= 2.0;
        cam_hi.fy *= 2.0;
        cam_hi.cx *= 2.0;
        cam_hi.cy *= 2.0;
        let lo = compute_importance(&scene, &[cam_lo]).unwrap();
        let hi = compute_importance(&scene, &[cam_hi]).unwrap();
        for k in 0..2 {
            let ratio = hi.score[k] / lo.score[k];
            assert!((ratio - 4.0).abs() < 0.4, "ratio {ratio}");
        }
    }

    #[test]
    fn exhaustive_and_degenerate_selection() {
        let scores = ImportanceScores { score: vec![1.0, 2.0, 3.0] };
        assert_eq!(select_pivot_gaussians(&scores, 3, 0).unwrap(), vec![0, 1, 2]);
        let degenerate = ImportanceScores { score: vec![1.0, 0.0, 0.0] };
        for seed in 0..20 {
            assert_eq!(select_pivot_gaussians(&degenerate, 1, seed).unwrap(), vec![0]);
        }
    }

    #[test]
    fn selection_frequency_matches_scores() {
        let scores = ImportanceScores { score: vec![3.0, 1.0] };
        let mut count0 = 0usize;
        for seed in 0..100_000u64 {
            if select_pivot_gaussians(&scores, 1, seed).unwrap()[0] == 0 {
                count0 += 1;
            }
        }
        let freq = count0 as f64 / 100_000.0;
        assert!((0.74..=0.76).contains(&freq), "freq {freq}");
    }

    #[test]
    fn selection_is_reproducible() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let scores = ImportanceScores { score: (0..200).map(|_| rng.gen::<f64>()).collect() };
        let a = select_pivot_gaussians(&scores, 50, 7).unwrap();
        let b = select_pivot_gaussians(&scores, 50, 7).unwrap();
        assert_eq!(a, b);
        assert!(matches!(
            select_pivot_gaussians(&scores, 201, 0),
            Err(PivotError::BudgetTooLarge { .. })
        ));
    }

    #[test]
    fn zero_scores_fill_only_when_needed() {
        let scores = ImportanceScores { score: vec![0.0, 5.0, 0.0, 2.0] };
        let sel = select_pivot_gaussians(&scores, 2, 3).unwrap();
        assert_eq!(sel, vec![1, 3]);
        let sel = select_pivot_gaussians(&scores, 3, 3).unwrap();
        assert_eq!(sel.len(), 3);
        assert!(sel.contains(&1) && sel.contains(&3));
    }
}
