fn main() {
    let args: Vec<String> = std::env::args().collect();
    use splatmesh::optim::*;
    use splatmesh::scene::*;
    let shape = Shape::Sphere { radius: 1.0 };
    let (synth, scene0) = make_synthetic_scene(&shape, 300, 16, 64, 7).unwrap();
    let mut cfg = TrainConfig { iters_total: 2000, iter_mesh_start: 800, seed: 7, ..TrainConfig::default() };
    for kv in &args[1..] {
        let (k, v) = kv.split_once('=').unwrap();
        if !cfg.apply_kv(k, v).unwrap() { panic!("bad key {k}"); }
    }
    let out = train(scene0, &synth, &cfg).unwrap();
    // depth bias over 3 views
    let mut errs: Vec<f64> = Vec::new();
    for cam in synth.cameras.iter().take(3) {
        let gt = render_reference_depth(&shape, cam);
        let (buf, _) = splatmesh::render::render_gaussians(&out.scene, cam).unwrap();
        for i in 0..gt.data.len() {
            if gt.data[i].is_finite() && buf.depth.data[i].is_finite() {
                errs.push(buf.depth.data[i] - gt.data[i]);
            }
        }
    }
    errs.sort_by(|a,b| a.partial_cmp(b).unwrap());
    let med = errs[errs.len()/2];
    let mut ops: Vec<f64> = out.scene.gaussians.iter().map(|g| g.opacity()).collect();
    ops.sort_by(|a,b| a.partial_cmp(b).unwrap());
    let mut ch = f64::NAN; let mut f1 = f64::NAN;
    if !out.mesh.is_empty() {
        ch = splatmesh::eval::chamfer(&out.mesh, &synth.gt_samples, 20000, 7).unwrap();
        f1 = splatmesh::eval::f1_score(&out.mesh, &synth.gt_samples, 0.02, 20000, 7).unwrap();
        let mut rs: Vec<f64> = out.mesh.vertices.iter().map(|v| v.norm()).collect();
        rs.sort_by(|a,b| a.partial_cmp(b).unwrap());
        println!("mesh radius med {:.4} q1 {:.4} q3 {:.4}", rs[rs.len()/2], rs[rs.len()/4], rs[3*rs.len()/4]);
    }
    println!("RESULT depth_bias_med={med:.4} opacity_med={:.3} chamfer={ch:.4} f1={f1:.4}", ops[ops.len()/2]);
}
