fn main() {
    use splatmesh::meshing::import_mesh;
    let mesh = import_mesh(std::path::Path::new("/tmp/full/sphere_small/mesh.ply")).unwrap();
    let mut rs: Vec<f64> = mesh.vertices.iter().map(|v| v.norm()).collect();
    rs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = rs.len();
    println!("mesh vertex radius: p5 {:.4} q1 {:.4} med {:.4} q3 {:.4} p95 {:.4} (n={})",
        rs[n/20], rs[n/4], rs[n/2], rs[3*n/4], rs[19*n/20], n);
    // trained scene depth bias
    use splatmesh::scene::*;
    let scene = load_scene(std::path::Path::new("/tmp/full/sphere_small/scene.bin")).unwrap();
    let shape = Shape::Sphere { radius: 1.0 };
    let (synth, _) = make_synthetic_scene(&shape, 10, 16, 64, 7).unwrap();
    let cam = &synth.cameras[0];
    let gt = render_reference_depth(&shape, cam);
    let (buf, _) = splatmesh::render::render_gaussians(&scene, cam).unwrap();
    let mut errs: Vec<f64> = Vec::new();
    for i in 0..gt.data.len() {
        if gt.data[i].is_finite() && buf.depth.data[i].is_finite() {
            errs.push(buf.depth.data[i] - gt.data[i]);
        }
    }
    errs.sort_by(|a,b| a.partial_cmp(b).unwrap());
    println!("trained splat depth err: q1 {:.4} med {:.4} q3 {:.4}", errs[errs.len()/4], errs[errs.len()/2], errs[3*errs.len()/4]);
    // scale stats
    let mut scales: Vec<f64> = scene.gaussians.iter().map(|g| g.scale().mean()).collect();
    scales.sort_by(|a,b| a.partial_cmp(b).unwrap());
    println!("mean gaussian scale: med {:.4}", scales[scales.len()/2]);
    let mut ops: Vec<f64> = scene.gaussians.iter().map(|g| g.opacity()).collect();
    ops.sort_by(|a,b| a.partial_cmp(b).unwrap());
    println!("opacity: q1 {:.3} med {:.3} q3 {:.3}", ops[ops.len()/4], ops[ops.len()/2], ops[3*ops.len()/4]);
}
