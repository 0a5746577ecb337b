//! 3D Delaunay tetrahedralization by incremental insertion (Bowyer-Watson)
//! with exact, symbolically perturbed predicates.
//!
//! The triangulation is maintained as a closed complex: finite tetrahedra
//! plus one "infinite" cell per hull facet, so cavity surgery never has to
//! special-case the hull. Cospherical degeneracies are resolved by a
//! deterministic perturbation of the lifted coordinate of each site, keyed
//! on (seed, site index), which makes the result unique and keeps every
//! cell non-degenerate.

mod predicates;

use std::collections::HashMap;

use thiserror::Error;

use crate::kdtree::KdTree;
use crate::math::{splitmix64, V3};
use predicates::{collinear, insphere_det, orient3d, orient3d_exact, rpoint, RPoint};

#[derive(Debug, Error)]
pub enum DelaunayError {
    #[error("need at least 4 distinct sites, got {0}")]
    TooFewSites(usize),
    #[error("all sites are coplanar")]
    Coplanar,
    #[error("non-finite site coordinate at index {0}")]
    NonFinite(usize),
}

/// Tetrahedra over a site array. Every tet stores 4 distinct site indices
/// in canonical order (ascending up to one final swap preserving positive
/// orientation), and the list is sorted lexicographically.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tetrahedralization {
    pub tets: Vec<[usize; 4]>,
    pub n_sites: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DelaunayViolation {
    pub tet: usize,
    pub site: usize,
    /// How far inside the circumsphere the site sits (radius - distance).
    pub depth: f64,
}

const INF: usize = usize::MAX;
const NO_CELL: u32 = u32::MAX;

#[derive(Debug, Clone)]
struct Cell {
    /// Vertex site indices; INF (if any) is always at slot 3. Finite cells
    /// are positively oriented; for infinite cells (v0, v1, v2) is the hull
    /// facet oriented outward.
    v: [usize; 4],
    /// nbr[i] is the cell across the face opposite v[i].
    nbr: [u32; 4],
    alive: bool,
}

impl Cell {
    fn is_infinite(&self) -> bool {
        self.v[3] == INF
    }

    /// Face opposite slot `i`, oriented outward from this cell.
    fn face(&self, i: usize) -> [usize; 3] {
        let v = &self.v;
        match i {
            0 => [v[1], v[2], v[3]],
            1 => [v[0], v[3], v[2]],
            2 => [v[0], v[1], v[3]],
            _ => [v[0], v[2], v[1]],
        }
    }

    fn slot_of_neighbor(&self, c: u32) -> usize {
        (0..4).find(|&i| self.nbr[i] == c).expect("neighbor link broken")
    }
}

struct Triangulator<'a> {
    sites: &'a [V3],
    /// Perturbation rank per site; higher rank = dominant infinitesimal.
    rank: Vec<u64>,
    cells: Vec<Cell>,
    stamp: Vec<u64>,
    conflict_flag: Vec<bool>,
    epoch: u64,
    hint: u32,
}

fn sorted3(mut f: [usize; 3]) -> [usize; 3] {
    f.sort_unstable();
    f
}

impl<'a> Triangulator<'a> {
    fn new(sites: &'a [V3], seed: u64) -> Self {
        let rank = (0..sites.len() as u64).map(|i| splitmix64(seed ^ i.wrapping_mul(0x9e3779b97f4a7c15))).collect();
        Triangulator {
            sites,
            rank,
            cells: Vec::new(),
            stamp: Vec::new(),
            conflict_flag: Vec::new(),
            epoch: 0,
            hint: 0,
        }
    }

    fn push_cell(&mut self, v: [usize; 4]) -> u32 {
        self.cells.push(Cell { v, nbr: [NO_CELL; 4], alive: true });
        self.stamp.push(0);
        self.conflict_flag.push(false);
        (self.cells.len() - 1) as u32
    }

    /// Dominance order for the symbolic perturbation: (rank, index), larger
    /// is checked first.
    fn sos_key(&self, site: usize) -> (u64, usize) {
        (self.rank[site], site)
    }

    /// True when `p` (site index `pi`) lies strictly inside the perturbed
    /// circumsphere of the positively oriented finite cell (a, b, c, d).
    fn in_sphere_sos(&self, tet: [usize; 4], pi: usize) -> bool {
        let mut t = tet;
        // Canonical row order; track permutation parity so the determinant
        // sign refers to the sorted rows.
        let mut parity = 1i32;
        for i in 0..3 {
            for j in 0..3 - i {
                if t[j] > t[j + 1] {
                    t.swap(j, j + 1);
                    parity = -parity;
                }
            }
        }
        let [s0, s1, s2, s3] = t;
        let p = &self.sites[pi];
        let det = insphere_det(&self.sites[s0], &self.sites[s1], &self.sites[s2], &self.sites[s3], p);
        if det != 0 {
            return parity * det < 0;
        }
        // Cospherical: the sign is decided by the dominant perturbed site.
        // Cofactors of the lifted coordinates in the 5x5 bordered matrix
        // with rows (s0, s1, s2, s3, p).
        let mut order = [s0, s1, s2, s3, pi];
        order.sort_unstable_by(|&x, &y| self.sos_key(y).cmp(&self.sos_key(x)));
        for site in order {
            let c = if site == pi {
                orient3d(&self.sites[s0], &self.sites[s1], &self.sites[s2], &self.sites[s3])
            } else if site == s0 {
                orient3d(&self.sites[s1], &self.sites[s2], &self.sites[s3], p)
            } else if site == s1 {
                -orient3d(&self.sites[s0], &self.sites[s2], &self.sites[s3], p)
            } else if site == s2 {
                orient3d(&self.sites[s0], &self.sites[s1], &self.sites[s3], p)
            } else {
                -orient3d(&self.sites[s0], &self.sites[s1], &self.sites[s2], p)
            };
            if c != 0 {
                return parity * c < 0;
            }
        }
        unreachable!("degenerate cell in triangulation");
    }

    /// True when `p` lies strictly inside the perturbed circumcircle of the
    /// hull facet (u, v, w); all four points must be exactly coplanar.
    fn in_circle_sos(&self, facet: [usize; 3], pi: usize) -> bool {
        let mut f = facet;
        f.sort_unstable();
        let [u, v, w] = f;
        let (pu, pv, pw, pp) = (
            rpoint(&self.sites[u]),
            rpoint(&self.sites[v]),
            rpoint(&self.sites[w]),
            rpoint(&self.sites[pi]),
        );
        // Any sphere through three coplanar points meets their plane in the
        // circumcircle; use the apex q = u + (v-u)x(w-u) to pin one down.
        let d1: Vec<_> = (0..3).map(|i| &pv[i] - &pu[i]).collect();
        let d2: Vec<_> = (0..3).map(|i| &pw[i] - &pu[i]).collect();
        let n = [
            &d1[1] * &d2[2] - &d1[2] * &d2[1],
            &d1[2] * &d2[0] - &d1[0] * &d2[2],
            &d1[0] * &d2[1] - &d1[1] * &d2[0],
        ];
        let q: RPoint = [&pu[0] + &n[0], &pu[1] + &n[1], &pu[2] + &n[2]];
        let det = predicates::insphere_det_exact(&pu, &pv, &pw, &q, &pp);
        if det != 0 {
            // orient3d(u, v, w, q) = |n|^2 > 0, so negative means inside.
            return det < 0;
        }
        let mut order = [u, v, w, pi];
        order.sort_unstable_by(|&x, &y| self.sos_key(y).cmp(&self.sos_key(x)));
        for site in order {
            let c = if site == pi {
                orient3d_exact(&pu, &pv, &pw, &q)
            } else if site == u {
                orient3d_exact(&pv, &pw, &q, &pp)
            } else if site == v {
                -orient3d_exact(&pu, &pw, &q, &pp)
            } else {
                orient3d_exact(&pu, &pv, &q, &pp)
            };
            if c != 0 {
                return c < 0;
            }
        }
        unreachable!("degenerate hull facet");
    }

    fn in_conflict(&self, cell_id: u32, pi: usize) -> bool {
        let cell = &self.cells[cell_id as usize];
        if cell.is_infinite() {
            let f = [cell.v[0], cell.v[1], cell.v[2]];
            let o = orient3d(
                &self.sites[f[0]],
                &self.sites[f[1]],
                &self.sites[f[2]],
                &self.sites[pi],
            );
            match o {
                1 => true,
                -1 => false,
                _ => self.in_circle_sos(f, pi),
            }
        } else {
            self.in_sphere_sos(cell.v, pi)
        }
    }

    fn first_alive(&self) -> u32 {
        (0..self.cells.len())
            .find(|&i| self.cells[i].alive)
            .expect("no alive cells") as u32
    }

    /// Walks toward `p` and returns a cell in conflict with it.
    fn locate_conflict(&mut self, pi: usize) -> u32 {
        let p = &self.sites[pi];
        let mut cur = self.hint;
        if cur as usize >= self.cells.len() || !self.cells[cur as usize].alive {
            cur = self.first_alive();
        }
        let mut prev = NO_CELL;
        let max_steps = 10 * self.cells.len() + 64;
        for _ in 0..max_steps {
            let cell = &self.cells[cur as usize];
            if cell.is_infinite() {
                break;
            }
            let mut moved = false;
            for slot in 0..4 {
                let nb = cell.nbr[slot];
                if nb == prev {
                    continue;
                }
                let f = cell.face(slot);
                if orient3d(&self.sites[f[0]], &self.sites[f[1]], &self.sites[f[2]], p) > 0 {
                    prev = cur;
                    cur = nb;
                    moved = true;
                    break;
                }
            }
            if !moved {
                break;
            }
        }
        if self.in_conflict(cur, pi) {
            return cur;
        }
        // Rare: walk ended next to the conflict zone (e.g. a point exactly on
        // the hull plane outside a facet's circumcircle). Deterministic scan.
        for id in 0..self.cells.len() as u32 {
            if self.cells[id as usize].alive && self.in_conflict(id, pi) {
                return id;
            }
        }
        unreachable!("new site conflicts with no cell");
    }

    fn insert(&mut self, pi: usize) {
        let start = self.locate_conflict(pi);
        self.epoch += 1;

        // Conflict region by breadth-first search over face neighbors.
        let mut cavity: Vec<u32> = vec![start];
        self.stamp[start as usize] = self.epoch;
        self.conflict_flag[start as usize] = true;
        // (surviving cell, slot in survivor facing the cavity)
        let mut boundary: Vec<(u32, usize)> = Vec::new();
        let mut qi = 0;
        while qi < cavity.len() {
            let cur = cavity[qi];
            qi += 1;
            for slot in 0..4 {
                let nb = self.cells[cur as usize].nbr[slot];
                let nbu = nb as usize;
                if self.stamp[nbu] != self.epoch {
                    self.stamp[nbu] = self.epoch;
                    let c = self.in_conflict(nb, pi);
                    self.conflict_flag[nbu] = c;
                    if c {
                        cavity.push(nb);
                        continue;
                    }
                }
                if !self.conflict_flag[nbu] {
                    boundary.push((nb, self.cells[nbu].slot_of_neighbor(cur)));
                }
            }
        }

        for &c in &cavity {
            self.cells[c as usize].alive = false;
        }

        // One new cell per boundary face; the survivor's face already points
        // toward the cavity, so appending p preserves positive orientation
        // for finite cells.
        let mut face_map: HashMap<[usize; 3], (u32, usize)> = HashMap::new();
        let mut new_cells: Vec<u32> = Vec::with_capacity(boundary.len());
        for &(survivor, slot) in &boundary {
            let f = self.cells[survivor as usize].face(slot);
            let verts = if f.contains(&INF) {
                let fin: Vec<usize> = f.iter().copied().filter(|&x| x != INF).collect();
                // Orientation of (fin[0], fin[1], pi) is fixed after wiring.
                [fin[0], fin[1], pi, INF]
            } else {
                debug_assert!(
                    orient3d(&self.sites[f[0]], &self.sites[f[1]], &self.sites[f[2]], &self.sites[pi]) > 0
                );
                [f[0], f[1], f[2], pi]
            };
            let id = self.push_cell(verts);
            new_cells.push(id);
            // Wire the boundary face: slot opposite p in the new cell.
            let p_slot = self.cells[id as usize].v.iter().position(|&x| x == pi).unwrap();
            self.cells[id as usize].nbr[p_slot] = survivor;
            self.cells[survivor as usize].nbr[slot] = id;
            for s in 0..4 {
                if s == p_slot {
                    continue;
                }
                let key = sorted3(self.cells[id as usize].face(s));
                if let Some((other, os)) = face_map.remove(&key) {
                    self.cells[id as usize].nbr[s] = other;
                    self.cells[other as usize].nbr[os] = id;
                } else {
                    face_map.insert(key, (id, s));
                }
            }
        }
        debug_assert!(face_map.is_empty(), "cavity boundary not closed");

        // Fix outward orientation of new infinite cells using the finite
        // neighbor across their hull facet.
        for &id in &new_cells {
            if !self.cells[id as usize].is_infinite() {
                continue;
            }
            let fin_nb = self.cells[id as usize].nbr[3];
            let nb_cell = &self.cells[fin_nb as usize];
            let hull = self.cells[id as usize].face(3);
            let apex = nb_cell
                .v
                .iter()
                .copied()
                .find(|x| !hull.contains(x))
                .expect("degenerate neighbor");
            let [h0, h1, h2] = [self.cells[id as usize].v[0], self.cells[id as usize].v[1], self.cells[id as usize].v[2]];
            let o = orient3d(&self.sites[h0], &self.sites[h1], &self.sites[h2], &self.sites[apex]);
            debug_assert!(o != 0);
            if o > 0 {
                let cell = &mut self.cells[id as usize];
                cell.v.swap(0, 1);
                cell.nbr.swap(0, 1);
            }
        }

        self.hint = *new_cells.last().expect("empty cavity boundary");
    }
}

/// Morton code over 21 bits per axis for a locality-friendly insertion order.
fn morton(p: &V3, lo: &V3, inv_extent: &V3) -> u64 {
    let mut code = 0u64;
    for axis in 0..3 {
        let t = ((p[axis] - lo[axis]) * inv_extent[axis]).clamp(0.0, 1.0);
        let q = (t * ((1u64 << 21) - 1) as f64) as u64;
        for bit in 0..21 {
            code |= ((q >> bit) & 1) << (3 * bit + axis);
        }
    }
    code
}

/// Computes the Delaunay tetrahedralization of `sites`.
///
/// Sites closer than 1e-9 x bbox diagonal are merged first; the returned
/// remap sends every original index to its representative. Tets reference
/// representative indices only. Deterministic for a fixed (sites, seed).
pub fn triangulate(sites: &[V3], seed: u64) -> Result<(Tetrahedralization, Vec<usize>), DelaunayError> {
    for (i, p) in sites.iter().enumerate() {
        if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()) {
            return Err(DelaunayError::NonFinite(i));
        }
    }
    if sites.len() < 4 {
        return Err(DelaunayError::TooFewSites(sites.len()));
    }

    let mut lo = V3::repeat(f64::INFINITY);
    let mut hi = V3::repeat(f64::NEG_INFINITY);
    for p in sites {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    let diag = (hi - lo).norm();

    // Merge near-duplicates through a uniform grid keyed at the tolerance.
    let tol = 1e-9 * diag;
    let mut remap: Vec<usize> = (0..sites.len()).collect();
    let mut unique: Vec<usize> = Vec::with_capacity(sites.len());
    if tol > 0.0 {
        let key = |p: &V3| {
            [
                (p.x / tol).floor() as i64,
                (p.y / tol).floor() as i64,
                (p.z / tol).floor() as i64,
            ]
        };
        let mut grid: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
        'next: for i in 0..sites.len() {
            let k = key(&sites[i]);
            for dx in -1..=1i64 {
                for dy in -1..=1i64 {
                    for dz in -1..=1i64 {
                        if let Some(bucket) = grid.get(&[k[0] + dx, k[1] + dy, k[2] + dz]) {
                            for &j in bucket {
                                if (sites[i] - sites[j]).norm() < tol {
                                    remap[i] = j;
                                    continue 'next;
                                }
                            }
                        }
                    }
                }
            }
            grid.entry(k).or_default().push(i);
            unique.push(i);
        }
    } else {
        // All sites coincide.
        return Err(DelaunayError::TooFewSites(1));
    }

    if unique.len() < 4 {
        return Err(DelaunayError::TooFewSites(unique.len()));
    }

    let extent = hi - lo;
    let inv_extent = V3::new(
        if extent.x > 0.0 { 1.0 / extent.x } else { 0.0 },
        if extent.y > 0.0 { 1.0 / extent.y } else { 0.0 },
        if extent.z > 0.0 { 1.0 / extent.z } else { 0.0 },
    );
    unique.sort_by_key(|&i| (morton(&sites[i], &lo, &inv_extent), i));

    // Bootstrap: first four affinely independent sites in insertion order.
    let i0 = unique[0];
    let i1 = unique[1];
    let i2 = unique[2..]
        .iter()
        .copied()
        .find(|&k| !collinear(&sites[i0], &sites[i1], &sites[k]))
        .ok_or(DelaunayError::Coplanar)?;
    let i3 = unique[2..]
        .iter()
        .copied()
        .find(|&k| k != i2 && orient3d(&sites[i0], &sites[i1], &sites[i2], &sites[k]) != 0)
        .ok_or(DelaunayError::Coplanar)?;

    let mut tri = Triangulator::new(sites, seed);
    let first = if orient3d(&sites[i0], &sites[i1], &sites[i2], &sites[i3]) > 0 {
        [i0, i1, i2, i3]
    } else {
        [i0, i2, i1, i3]
    };
    let root = tri.push_cell(first);
    let mut edge_map: HashMap<[usize; 3], (u32, usize)> = HashMap::new();
    for slot in 0..4 {
        let f = tri.cells[root as usize].face(slot);
        let inf = tri.push_cell([f[0], f[1], f[2], INF]);
        tri.cells[root as usize].nbr[slot] = inf;
        tri.cells[inf as usize].nbr[3] = root;
        // Wire infinite cells to each other across faces containing INF.
        for s in 0..3 {
            let key = sorted3(tri.cells[inf as usize].face(s));
            if let Some((other, os)) = edge_map.remove(&key) {
                tri.cells[inf as usize].nbr[s] = other;
                tri.cells[other as usize].nbr[os] = inf;
            } else {
                edge_map.insert(key, (inf, s));
            }
        }
    }
    debug_assert!(edge_map.is_empty());

    for &pi in &unique {
        if pi == i0 || pi == i1 || pi == i2 || pi == i3 {
            continue;
        }
        tri.insert(pi);
    }

    let mut tets: Vec<[usize; 4]> = tri
        .cells
        .iter()
        .filter(|c| c.alive && !c.is_infinite())
        .map(|c| canonical_tet(c.v))
        .collect();
    tets.sort_unstable();
    Ok((Tetrahedralization { tets, n_sites: sites.len() }, remap))
}

/// Ascending indices up to one final swap that preserves positive orientation.
fn canonical_tet(mut t: [usize; 4]) -> [usize; 4] {
    let mut parity = 0u32;
    for i in 0..3 {
        for j in 0..3 - i {
            if t[j] > t[j + 1] {
                t.swap(j, j + 1);
                parity ^= 1;
            }
        }
    }
    if parity == 1 {
        t.swap(2, 3);
    }
    t
}

/// Signed volume of a tet (positive for canonical orientation).
pub fn tet_volume(sites: &[V3], t: &[usize; 4]) -> f64 {
    let a = sites[t[0]];
    (sites[t[1]] - a).cross(&(sites[t[2]] - a)).dot(&(sites[t[3]] - a)) / 6.0
}

/// Circumcenter and circumradius; None when the tet is numerically flat.
pub fn circumsphere(sites: &[V3], t: &[usize; 4]) -> Option<(V3, f64)> {
    let a = sites[t[0]];
    let m = nalgebra::Matrix3::from_rows(&[
        (sites[t[1]] - a).transpose(),
        (sites[t[2]] - a).transpose(),
        (sites[t[3]] - a).transpose(),
    ]);
    let rhs = V3::new(
        (sites[t[1]] - a).norm_squared() * 0.5,
        (sites[t[2]] - a).norm_squared() * 0.5,
        (sites[t[3]] - a).norm_squared() * 0.5,
    );
    let x = m.lu().solve(&rhs)?;
    let center = a + x;
    if !center.iter().all(|v| v.is_finite()) {
        return None;
    }
    Some((center, x.norm()))
}

/// Tests every tet's circumsphere against all non-member sites; reports the
/// sites strictly inside by more than 1e-7 x circumradius. An empty report
/// means the triangulation is Delaunay.
pub fn verify_delaunay(sites: &[V3], tri: &Tetrahedralization) -> Vec<DelaunayViolation> {
    let tree = KdTree::build(sites);
    let mut out = Vec::new();
    for (ti, t) in tri.tets.iter().enumerate() {
        let Some((center, radius)) = circumsphere(sites, t) else {
            continue;
        };
        let tol = 1e-7 * radius;
        for site in tree.within_radius(&center, radius) {
            if t.contains(&site) {
                continue;
            }
            let depth = radius - (sites[site] - center).norm();
            if depth > tol {
                out.push(DelaunayViolation { tet: ti, site, depth });
            }
        }
    }
    out
}

/// Faces that belong to exactly one tet, oriented outward.
pub fn boundary_faces(tri: &Tetrahedralization) -> Vec<[usize; 3]> {
    let mut counts: HashMap<[usize; 3], ([usize; 3], usize)> = HashMap::new();
    for t in &tri.tets {
        let cell = Cell { v: *t, nbr: [NO_CELL; 4], alive: true };
        for slot in 0..4 {
            let f = cell.face(slot);
            let e = counts.entry(sorted3(f)).or_insert((f, 0));
            e.1 += 1;
        }
    }
    let mut faces: Vec<[usize; 3]> = counts
        .into_iter()
        .filter(|(_, (_, c))| *c == 1)
        .map(|(_, (f, _))| f)
        .collect();
    faces.sort_unstable();
    faces
}

/// Count of (faces on one tet, faces on two tets, faces on more).
pub fn face_incidence(tri: &Tetrahedralization) -> (usize, usize, usize) {
    let mut counts: HashMap<[usize; 3], usize> = HashMap::new();
    for t in &tri.tets {
        let cell = Cell { v: *t, nbr: [NO_CELL; 4], alive: true };
        for slot in 0..4 {
            *counts.entry(sorted3(cell.face(slot))).or_insert(0) += 1;
        }
    }
    let mut ones = 0;
    let mut twos = 0;
    let mut more = 0;
    for (_, c) in counts {
        match c {
            1 => ones += 1,
            2 => twos += 1,
            _ => more += 1,
        }
    }
    (ones, twos, more)
}

/// Volume of the convex hull via the divergence theorem over the outward
/// boundary faces (independent of the per-tet volumes).
pub fn hull_volume(sites: &[V3], tri: &Tetrahedralization) -> f64 {
    boundary_faces(tri)
        .iter()
        .map(|f| sites[f[0]].dot(&sites[f[1]].cross(&sites[f[2]])) / 6.0)
        .sum()
}
