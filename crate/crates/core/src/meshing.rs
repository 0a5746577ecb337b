//! Differentiable marching tetrahedra over a tetrahedralization with
//! per-site SDF values, plus mesh hygiene and OBJ/PLY export.
//!
//! Each crossing edge (one negative endpoint a, one positive endpoint b)
//! yields the vertex v = (f_a p_b - f_b p_a) / (f_a - f_b), deduplicated per
//! undirected edge so neighboring tets share vertices and the surface is
//! watertight by construction. The provenance record kept per vertex makes
//! the gradient of v with respect to both endpoints and both SDF values a
//! closed form.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::delaunay::Tetrahedralization;
use crate::math::V3;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("sdf length {sdf} != site count {sites}")]
    LengthMismatch { sdf: usize, sites: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("unknown mesh format '{0}' (expected obj or ply)")]
    UnknownFormat(String),
    #[error("parse error in {path}: {detail}")]
    Parse { path: String, detail: String },
    #[error("vertex {0} has no provenance record")]
    MissingProvenance(usize),
}

fn io_err(path: &Path, source: std::io::Error) -> MeshError {
    MeshError::Io { path: path.display().to_string(), source }
}

/// Crossing-edge record for one mesh vertex: site indices and the SDF values
/// used, with f_a < 0 < f_b.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VertexProvenance {
    pub site_a: usize,
    pub site_b: usize,
    pub f_a: f64,
    pub f_b: f64,
}

#[derive(Debug, Clone, Default)]
pub struct ExtractedMesh {
    pub vertices: Vec<V3>,
    pub faces: Vec<[usize; 3]>,
    pub provenance: Vec<VertexProvenance>,
}

impl ExtractedMesh {
    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }

    pub fn face_area(&self, f: &[usize; 3]) -> f64 {
        let (a, b, c) = (self.vertices[f[0]], self.vertices[f[1]], self.vertices[f[2]]);
        0.5 * (b - a).cross(&(c - a)).norm()
    }

    pub fn area(&self) -> f64 {
        self.faces.iter().map(|f| self.face_area(f)).sum()
    }

    pub fn face_normal(&self, f: &[usize; 3]) -> V3 {
        let (a, b, c) = (self.vertices[f[0]], self.vertices[f[1]], self.vertices[f[2]]);
        let n = (b - a).cross(&(c - a));
        let l = n.norm();
        if l > 0.0 {
            n / l
        } else {
            V3::zeros()
        }
    }
}

/// Per-vertex derivative blocks of the crossing formula. The position blocks
/// are scalar multiples of the identity: dv/dp_b = w I, dv/dp_a = (1-w) I
/// with w = f_a / (f_a - f_b).
#[derive(Debug, Clone)]
pub struct MeshGradients {
    pub w_b: Vec<f64>,
    pub d_f_a: Vec<V3>,
    pub d_f_b: Vec<V3>,
}

/// Values with |f| < SDF_ZERO_NUDGE are treated as -SDF_ZERO_NUDGE so no
/// site sits exactly on the level set.
pub const SDF_ZERO_NUDGE: f64 = 1e-12;

fn nudged(f: f64) -> f64 {
    if f.abs() < SDF_ZERO_NUDGE {
        -SDF_ZERO_NUDGE
    } else {
        f
    }
}

/// Orders an even permutation (i, j, k, l) of 0..4 starting with the slots in
/// `first`, preserving the parity of the identity.
fn even_permutation(first: &[usize]) -> [usize; 4] {
    let mut perm = [0usize; 4];
    let mut used = [false; 4];
    for (n, &f) in first.iter().enumerate() {
        perm[n] = f;
        used[f] = true;
    }
    let mut n = first.len();
    for c in 0..4 {
        if !used[c] {
            perm[n] = c;
            n += 1;
        }
    }
    let mut inversions = 0;
    for i in 0..4 {
        for j in i + 1..4 {
            if perm[i] > perm[j] {
                inversions += 1;
            }
        }
    }
    if inversions % 2 == 1 {
        perm.swap(2, 3);
    }
    perm
}

/// Extracts the zero level set. Tets whose four SDF signs are mixed emit one
/// triangle (3-1 split) or two (2-2 split, diagonal through the lowest-index
/// crossing vertex); windings face from negative toward positive.
pub fn marching_tetrahedra(
    tets: &Tetrahedralization,
    sites: &[V3],
    sdf: &[f64],
) -> Result<ExtractedMesh, MeshError> {
    if sdf.len() != sites.len() {
        return Err(MeshError::LengthMismatch { sdf: sdf.len(), sites: sites.len() });
    }
    if sdf.iter().any(|f| f.is_nan()) {
        return Err(MeshError::NonFinite("sdf"));
    }
    if sites.iter().any(|p| !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite())) {
        return Err(MeshError::NonFinite("sites"));
    }

    let mut mesh = ExtractedMesh::default();
    let mut edge_vertex: HashMap<(usize, usize), usize> = HashMap::new();

    let mut vertex_on = |mesh: &mut ExtractedMesh, sa: usize, sb: usize| -> usize {
        // Undirected edge key; the stored record keeps the negative site first.
        let key = (sa.min(sb), sa.max(sb));
        if let Some(&id) = edge_vertex.get(&key) {
            return id;
        }
        let (mut a, mut b) = (sa, sb);
        if nudged(sdf[a]) > 0.0 {
            std::mem::swap(&mut a, &mut b);
        }
        let (f_a, f_b) = (nudged(sdf[a]), nudged(sdf[b]));
        let v = (sites[b] * f_a - sites[a] * f_b) / (f_a - f_b);
        let id = mesh.vertices.len();
        mesh.vertices.push(v);
        mesh.provenance.push(VertexProvenance { site_a: a, site_b: b, f_a, f_b });
        edge_vertex.insert(key, id);
        id
    };

    let mut push_face = |mesh: &mut ExtractedMesh, f: [usize; 3]| {
        if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
            return;
        }
        // Slivers can collapse distinct crossing vertices onto one point.
        let eps = 1e-12;
        if (mesh.vertices[f[0]] - mesh.vertices[f[1]]).norm() < eps
            || (mesh.vertices[f[1]] - mesh.vertices[f[2]]).norm() < eps
            || (mesh.vertices[f[0]] - mesh.vertices[f[2]]).norm() < eps
        {
            return;
        }
        mesh.faces.push(f);
    };

    for tet in &tets.tets {
        let mut t = *tet;
        // Connectivity may be reused while sites move; re-orient so the case
        // table below stays consistent.
        let a = sites[t[0]];
        let vol6 = (sites[t[1]] - a).cross(&(sites[t[2]] - a)).dot(&(sites[t[3]] - a));
        if vol6 < 0.0 {
            t.swap(2, 3);
        }

        let neg: Vec<usize> = (0..4).filter(|&i| nudged(sdf[t[i]]) < 0.0).collect();
        match neg.len() {
            0 | 4 => {}
            1 => {
                let p = even_permutation(&[neg[0]]);
                let f = [
                    vertex_on(&mut mesh, t[p[0]], t[p[1]]),
                    vertex_on(&mut mesh, t[p[0]], t[p[2]]),
                    vertex_on(&mut mesh, t[p[0]], t[p[3]]),
                ];
                push_face(&mut mesh, f);
            }
            3 => {
                let pos = (0..4).find(|i| !neg.contains(i)).unwrap();
                let p = even_permutation(&[pos]);
                // Mirror of the 1-negative case: winding reversed.
                let f = [
                    vertex_on(&mut mesh, t[p[0]], t[p[1]]),
                    vertex_on(&mut mesh, t[p[0]], t[p[3]]),
                    vertex_on(&mut mesh, t[p[0]], t[p[2]]),
                ];
                push_face(&mut mesh, f);
            }
            _ => {
                let p = even_permutation(&neg);
                // Quad cycle E(ik) E(il) E(jl) E(jk) winds from negative
                // toward positive for an even permutation (i, j, k, l).
                let edges = [
                    (t[p[0]], t[p[2]]),
                    (t[p[0]], t[p[3]]),
                    (t[p[1]], t[p[3]]),
                    (t[p[1]], t[p[2]]),
                ];
                let q = [
                    vertex_on(&mut mesh, edges[0].0, edges[0].1),
                    vertex_on(&mut mesh, edges[1].0, edges[1].1),
                    vertex_on(&mut mesh, edges[2].0, edges[2].1),
                    vertex_on(&mut mesh, edges[3].0, edges[3].1),
                ];
                // Split along the diagonal through the lowest-index crossing
                // edge; keyed on site pairs so the choice is stable under
                // global sign flips.
                let base = (0..4)
                    .min_by_key(|&i| (edges[i].0.min(edges[i].1), edges[i].0.max(edges[i].1)))
                    .unwrap();
                let f0 = [q[base], q[(base + 1) % 4], q[(base + 2) % 4]];
                let f1 = [q[base], q[(base + 2) % 4], q[(base + 3) % 4]];
                push_face(&mut mesh, f0);
                push_face(&mut mesh, f1);
            }
        }
    }
    Ok(mesh)
}

/// Analytic derivatives of every extracted vertex with respect to its
/// crossing edge: positions and SDF values.
pub fn mt_gradients(mesh: &ExtractedMesh, sites: &[V3]) -> Result<MeshGradients, MeshError> {
    if mesh.provenance.len() != mesh.vertices.len() {
        return Err(MeshError::MissingProvenance(mesh.provenance.len()));
    }
    let mut w_b = Vec::with_capacity(mesh.vertices.len());
    let mut d_f_a = Vec::with_capacity(mesh.vertices.len());
    let mut d_f_b = Vec::with_capacity(mesh.vertices.len());
    for (v, prov) in mesh.vertices.iter().zip(&mesh.provenance) {
        let denom = prov.f_a - prov.f_b;
        w_b.push(prov.f_a / denom);
        d_f_a.push((sites[prov.site_b] - v) / denom);
        d_f_b.push((v - sites[prov.site_a]) / denom);
    }
    Ok(MeshGradients { w_b, d_f_a, d_f_b })
}

impl MeshGradients {
    /// Scatters per-vertex loss gradients back to per-site position and SDF
    /// gradients.
    pub fn backward(
        &self,
        mesh: &ExtractedMesh,
        d_vertices: &[V3],
        d_sites: &mut [V3],
        d_sdf: &mut [f64],
    ) {
        for (i, g) in d_vertices.iter().enumerate() {
            let prov = &mesh.provenance[i];
            let w = self.w_b[i];
            d_sites[prov.site_a] += g * (1.0 - w);
            d_sites[prov.site_b] += g * w;
            d_sdf[prov.site_a] += self.d_f_a[i].dot(g);
            d_sdf[prov.site_b] += self.d_f_b[i].dot(g);
        }
    }
}

// --- connected components and interior classification ---

#[derive(Debug, Clone, Default)]
pub struct ComponentReport {
    pub n_components: usize,
    pub n_interior: usize,
    pub interior_area_fraction: f64,
    /// Per component: (face count, area, interior flag).
    pub components: Vec<(usize, f64, bool)>,
}

struct DisjointSet(Vec<usize>);

impl DisjointSet {
    fn new(n: usize) -> Self {
        DisjointSet((0..n).collect())
    }
    fn find(&mut self, x: usize) -> usize {
        if self.0[x] != x {
            let r = self.find(self.0[x]);
            self.0[x] = r;
            r
        } else {
            x
        }
    }
    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.0[ra.max(rb)] = ra.min(rb);
        }
    }
}

/// Counts crossings of the axis ray x = origin + t (1,0,0), t in the chosen
/// direction, against the given faces.
fn ray_crossings_x(mesh: &ExtractedMesh, faces: &[usize], origin: &V3, positive: bool) -> usize {
    let mut count = 0;
    for &fi in faces {
        let f = mesh.faces[fi];
        let (a, b, c) = (mesh.vertices[f[0]], mesh.vertices[f[1]], mesh.vertices[f[2]]);
        // Moller-Trumbore specialized to dir = +-x.
        let e1 = b - a;
        let e2 = c - a;
        let dir = if positive { 1.0 } else { -1.0 };
        let n = e1.cross(&e2);
        if n.x.abs() < 1e-30 {
            continue;
        }
        let d = origin - a;
        let t = -(n.dot(&d)) / (n.x * dir);
        if t <= 0.0 {
            continue;
        }
        // Barycentric test in the plane.
        let hit = origin + V3::new(dir * t, 0.0, 0.0);
        let v0 = c - a;
        let v1 = b - a;
        let v2 = hit - a;
        let dot00 = v0.dot(&v0);
        let dot01 = v0.dot(&v1);
        let dot02 = v0.dot(&v2);
        let dot11 = v1.dot(&v1);
        let dot12 = v1.dot(&v2);
        let inv = dot00 * dot11 - dot01 * dot01;
        if inv.abs() < 1e-30 {
            continue;
        }
        let u = (dot11 * dot02 - dot01 * dot12) / inv;
        let v = (dot00 * dot12 - dot01 * dot02) / inv;
        if u >= 0.0 && v >= 0.0 && u + v <= 1.0 {
            count += 1;
        }
    }
    count
}

/// Splits the mesh into vertex-connected components and classifies each as
/// outer shell or interior by ray-crossing parity against the union of the
/// other components along +-x.
pub fn interior_components(mesh: &ExtractedMesh) -> ComponentReport {
    if mesh.faces.is_empty() {
        return ComponentReport::default();
    }
    let mut ds = DisjointSet::new(mesh.vertices.len());
    for f in &mesh.faces {
        ds.union(f[0], f[1]);
        ds.union(f[1], f[2]);
    }
    let mut comp_of_face: Vec<usize> = Vec::with_capacity(mesh.faces.len());
    let mut roots: Vec<usize> = Vec::new();
    for f in &mesh.faces {
        let r = ds.find(f[0]);
        let id = match roots.iter().position(|&x| x == r) {
            Some(i) => i,
            None => {
                roots.push(r);
                roots.len() - 1
            }
        };
        comp_of_face.push(id);
    }
    let n_comp = roots.len();
    let mut faces_by_comp: Vec<Vec<usize>> = vec![Vec::new(); n_comp];
    for (fi, &c) in comp_of_face.iter().enumerate() {
        faces_by_comp[c].push(fi);
    }

    let mut report = ComponentReport { n_components: n_comp, ..Default::default() };
    let total_area = mesh.area();
    for c in 0..n_comp {
        let faces = &faces_by_comp[c];
        let area: f64 = faces.iter().map(|&fi| mesh.face_area(&mesh.faces[fi])).sum();
        // Cast from the component's max-x vertex, nudged off axis-aligned
        // planes so the ray avoids edge-on hits. A component is interior when
        // it sits inside some other component: odd crossing parity against
        // that component on both sides of the ray.
        let mut origin = V3::repeat(f64::NEG_INFINITY);
        for &fi in faces {
            for &vi in &mesh.faces[fi] {
                if mesh.vertices[vi].x > origin.x {
                    origin = mesh.vertices[vi];
                }
            }
        }
        origin += V3::new(0.0, 1.2345e-7, 2.3457e-7);
        let mut interior = false;
        for o in 0..n_comp {
            if o == c {
                continue;
            }
            let plus = ray_crossings_x(mesh, &faces_by_comp[o], &origin, true);
            let minus = ray_crossings_x(mesh, &faces_by_comp[o], &origin, false);
            if plus % 2 == 1 && minus % 2 == 1 {
                interior = true;
                break;
            }
        }
        if interior {
            report.n_interior += 1;
            report.interior_area_fraction += area / total_area;
        }
        report.components.push((faces.len(), area, interior));
    }
    report
}

// --- export / import ---

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeshFormat {
    Obj,
    Ply,
}

impl MeshFormat {
    pub fn parse(s: &str) -> Result<Self, MeshError> {
        match s.to_ascii_lowercase().as_str() {
            "obj" => Ok(MeshFormat::Obj),
            "ply" => Ok(MeshFormat::Ply),
            other => Err(MeshError::UnknownFormat(other.to_string())),
        }
    }
}

/// Writes ASCII OBJ or binary little-endian PLY (float32 positions, int32
/// face indices). Vertex order is preserved.
pub fn export_mesh(mesh: &ExtractedMesh, path: &Path, format: MeshFormat) -> Result<(), MeshError> {
    let file = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    match format {
        MeshFormat::Obj => {
            for v in &mesh.vertices {
                writeln!(w, "v {} {} {}", v.x, v.y, v.z).map_err(|e| io_err(path, e))?;
            }
            for f in &mesh.faces {
                writeln!(w, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1).map_err(|e| io_err(path, e))?;
            }
        }
        MeshFormat::Ply => {
            let header = format!(
                "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nelement face {}\nproperty list uchar int vertex_indices\nend_header\n",
                mesh.vertices.len(),
                mesh.faces.len()
            );
            w.write_all(header.as_bytes()).map_err(|e| io_err(path, e))?;
            for v in &mesh.vertices {
                for c in [v.x, v.y, v.z] {
                    w.write_all(&(c as f32).to_le_bytes()).map_err(|e| io_err(path, e))?;
                }
            }
            for f in &mesh.faces {
                w.write_all(&[3u8]).map_err(|e| io_err(path, e))?;
                for &i in f {
                    w.write_all(&(i as i32).to_le_bytes()).map_err(|e| io_err(path, e))?;
                }
            }
        }
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Reads a mesh written by `export_mesh`; format inferred from the extension.
pub fn import_mesh(path: &Path) -> Result<ExtractedMesh, MeshError> {
    let ext = path
        .extension()
        .and_then(|s| s.to_str())
        .unwrap_or("")
        .to_ascii_lowercase();
    match ext.as_str() {
        "obj" => import_obj(path),
        "ply" => import_ply(path),
        other => Err(MeshError::UnknownFormat(other.to_string())),
    }
}

fn parse_err(path: &Path, detail: impl Into<String>) -> MeshError {
    MeshError::Parse { path: path.display().to_string(), detail: detail.into() }
}

fn import_obj(path: &Path) -> Result<ExtractedMesh, MeshError> {
    let file = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut mesh = ExtractedMesh::default();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| io_err(path, e))?;
        let mut it = line.split_whitespace();
        match it.next() {
            Some("v") => {
                let mut c = [0f64; 3];
                for x in c.iter_mut() {
                    *x = it
                        .next()
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| parse_err(path, "bad vertex line"))?;
                }
                mesh.vertices.push(V3::new(c[0], c[1], c[2]));
            }
            Some("f") => {
                let mut f = [0usize; 3];
                for x in f.iter_mut() {
                    let tok = it.next().ok_or_else(|| parse_err(path, "bad face line"))?;
                    let idx: usize = tok
                        .split('/')
                        .next()
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| parse_err(path, "bad face index"))?;
                    *x = idx - 1;
                }
                mesh.faces.push(f);
            }
            _ => {}
        }
    }
    Ok(mesh)
}

fn import_ply(path: &Path) -> Result<ExtractedMesh, MeshError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| io_err(path, e))?
        .read_to_end(&mut bytes)
        .map_err(|e| io_err(path, e))?;
    let header_end = bytes
        .windows(11)
        .position(|w| w == b"end_header\n")
        .ok_or_else(|| parse_err(path, "missing end_header"))?
        + 11;
    let header = std::str::from_utf8(&bytes[..header_end]).map_err(|_| parse_err(path, "bad header"))?;
    let mut n_vert = 0usize;
    let mut n_face = 0usize;
    for line in header.lines() {
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["element", "vertex", n] => n_vert = n.parse().map_err(|_| parse_err(path, "bad vertex count"))?,
            ["element", "face", n] => n_face = n.parse().map_err(|_| parse_err(path, "bad face count"))?,
            _ => {}
        }
    }
    let mut off = header_end;
    let take = |off: &mut usize, n: usize| -> Result<&[u8], MeshError> {
        if *off + n > bytes.len() {
            return Err(parse_err(path, "truncated body"));
        }
        let s = &bytes[*off..*off + n];
        *off += n;
        Ok(s)
    };
    let mut mesh = ExtractedMesh::default();
    for _ in 0..n_vert {
        let mut c = [0f64; 3];
        for x in c.iter_mut() {
            *x = f32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as f64;
        }
        mesh.vertices.push(V3::new(c[0], c[1], c[2]));
    }
    for _ in 0..n_face {
        let n = take(&mut off, 1)?[0] as usize;
        if n != 3 {
            return Err(parse_err(path, format!("non-triangle face of size {n}")));
        }
        let mut f = [0usize; 3];
        for x in f.iter_mut() {
            *x = i32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
        }
        mesh.faces.push(f);
    }
    Ok(mesh)
}


/// Midpoint-subdivides every face (1 triangle -> 4), deduplicating edge
/// midpoints so the surface stays watertight. Provenance is not carried
/// over; the result is for rendering and evaluation only.
pub fn subdivide_midpoint(mesh: &ExtractedMesh) -> ExtractedMesh {
    let mut out = ExtractedMesh {
        vertices: mesh.vertices.clone(),
        faces: Vec::with_capacity(mesh.faces.len() * 4),
        provenance: Vec::new(),
    };
    let mut midpoint: HashMap<(usize, usize), usize> = HashMap::new();
    let mut mid = |out: &mut ExtractedMesh, a: usize, b: usize| -> usize {
        let key = (a.min(b), a.max(b));
        *midpoint.entry(key).or_insert_with(|| {
            let id = out.vertices.len();
            out.vertices.push((out.vertices[a] + out.vertices[b]) * 0.5);
            id
        })
    };
    for f in &mesh.faces {
        let m01 = mid(&mut out, f[0], f[1]);
        let m12 = mid(&mut out, f[1], f[2]);
        let m20 = mid(&mut out, f[2], f[0]);
        out.faces.push([f[0], m01, m20]);
        out.faces.push([f[1], m12, m01]);
        out.faces.push([f[2], m20, m12]);
        out.faces.push([m01, m12, m20]);
    }
    out
}
