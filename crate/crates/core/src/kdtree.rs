//! Exact 3D k-d tree for nearest-neighbor and radius queries.

use crate::math::V3;

pub struct KdTree {
    points: Vec<V3>,
    // Indices into `points`, reordered into kd layout: node = midpoint of its slice.
    order: Vec<u32>,
}

impl KdTree {
    pub fn build(points: &[V3]) -> Self {
        let mut order: Vec<u32> = (0..points.len() as u32).collect();
        let mut tree = KdTree { points: points.to_vec(), order };
        if !tree.points.is_empty() {
            let n = tree.points.len();
            order = std::mem::take(&mut tree.order);
            build_recursive(&tree.points, &mut order[..], 0);
            tree.order = order;
            debug_assert_eq!(tree.order.len(), n);
        }
        tree
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Index and distance of the nearest point to `query`.
    pub fn nearest(&self, query: &V3) -> Option<(usize, f64)> {
        if self.points.is_empty() {
            return None;
        }
        let mut best = (usize::MAX, f64::INFINITY);
        self.nearest_rec(query, 0, self.order.len(), 0, &mut best);
        Some((best.0, best.1.sqrt()))
    }

    /// Indices of all points within `radius` of `query`, in ascending index order.
    pub fn within_radius(&self, query: &V3, radius: f64) -> Vec<usize> {
        let mut out = Vec::new();
        if !self.points.is_empty() {
            self.radius_rec(query, radius * radius, 0, self.order.len(), 0, &mut out);
            out.sort_unstable();
        }
        out
    }

    fn nearest_rec(&self, q: &V3, lo: usize, hi: usize, axis: usize, best: &mut (usize, f64)) {
        if lo >= hi {
            return;
        }
        let mid = (lo + hi) / 2;
        let idx = self.order[mid] as usize;
        let p = &self.points[idx];
        let d2 = (p - q).norm_squared();
        if d2 < best.1 || (d2 == best.1 && idx < best.0) {
            *best = (idx, d2);
        }
        let delta = q[axis] - p[axis];
        let (near_lo, near_hi, far_lo, far_hi) = if delta < 0.0 {
            (lo, mid, mid + 1, hi)
        } else {
            (mid + 1, hi, lo, mid)
        };
        let next = (axis + 1) % 3;
        self.nearest_rec(q, near_lo, near_hi, next, best);
        if delta * delta <= best.1 {
            self.nearest_rec(q, far_lo, far_hi, next, best);
        }
    }

    fn radius_rec(&self, q: &V3, r2: f64, lo: usize, hi: usize, axis: usize, out: &mut Vec<usize>) {
        if lo >= hi {
            return;
        }
        let mid = (lo + hi) / 2;
        let idx = self.order[mid] as usize;
        let p = &self.points[idx];
        if (p - q).norm_squared() <= r2 {
            out.push(idx);
        }
        let delta = q[axis] - p[axis];
        let next = (axis + 1) % 3;
        if delta <= 0.0 || delta * delta <= r2 {
            self.radius_rec(q, r2, lo, mid, next, out);
        }
        if delta >= 0.0 || delta * delta <= r2 {
            self.radius_rec(q, r2, mid + 1, hi, next, out);
        }
    }
}

fn build_recursive(points: &[V3], order: &mut [u32], axis: usize) {
    if order.len() <= 1 {
        return;
    }
    let mid = order.len() / 2;
    // Tie-break on index so the layout is deterministic for repeated coordinates.
    order.select_nth_unstable_by(mid, |&a, &b| {
        let (pa, pb) = (&points[a as usize], &points[b as usize]);
        pa[axis].partial_cmp(&pb[axis]).unwrap().then(a.cmp(&b))
    });
    let (left, rest) = order.split_at_mut(mid);
    let next = (axis + 1) % 3;
    build_recursive(points, left, next);
    build_recursive(points, &mut rest[1..], next);
}
