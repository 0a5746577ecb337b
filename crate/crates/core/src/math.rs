//! Small math helpers shared across the crate: quaternion-to-rotation with
//! analytic derivatives, activations, and a row-major H×W grid.

pub type V2 = nalgebra::Vector2<f64>;
pub type V3 = nalgebra::Vector3<f64>;
pub type V4 = nalgebra::Vector4<f64>;
pub type M2 = nalgebra::Matrix2<f64>;
pub type M3 = nalgebra::Matrix3<f64>;

/// Rotation matrix from a unit quaternion stored as (w, x, y, z).
pub fn rotation_from_quat(q: &V4) -> M3 {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    M3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// ∂R/∂q_i for a unit quaternion (w, x, y, z), i = 0..4.
pub fn rotation_jacobian(q: &V4) -> [M3; 4] {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    let dw = M3::new(0.0, -z, y, z, 0.0, -x, -y, x, 0.0) * 2.0;
    let dx = M3::new(0.0, y, z, y, -2.0 * x, -w, z, w, -2.0 * x) * 2.0;
    let dy = M3::new(-2.0 * y, x, w, x, 0.0, z, -w, z, -2.0 * y) * 2.0;
    let dz = M3::new(-2.0 * z, -w, x, w, -2.0 * z, y, x, y, 0.0) * 2.0;
    [dw, dx, dy, dz]
}

/// Pulls a gradient on the rotation matrix back to the unit quaternion.
pub fn rotation_backward(q: &V4, d_rot: &M3) -> V4 {
    let jac = rotation_jacobian(q);
    V4::new(
        jac[0].dot(d_rot),
        jac[1].dot(d_rot),
        jac[2].dot(d_rot),
        jac[3].dot(d_rot),
    )
}

/// Pulls a gradient on the normalized vector back to the raw (pre-norm) one.
pub fn normalize_backward(raw: &V4, d_unit: &V4) -> V4 {
    let n = raw.norm();
    let u = raw / n;
    (d_unit - u * u.dot(d_unit)) / n
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// log(1 + e^x) evaluated without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// SplitMix64; used wherever a cheap deterministic per-index hash is needed.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Row-major H×W buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    pub width: usize,
    pub height: usize,
    pub data: Vec<T>,
}

impl<T: Clone> Grid<T> {
    pub fn fill(width: usize, height: usize, value: T) -> Self {
        Grid { width, height, data: vec![value; width * height] }
    }
}

impl<T> Grid<T> {
    #[inline]
    pub fn at(&self, x: usize, y: usize) -> &T {
        &self.data[y * self.width + x]
    }

    #[inline]
    pub fn at_mut(&mut self, x: usize, y: usize) -> &mut T {
        &mut self.data[y * self.width + x]
    }

    pub fn same_shape<U>(&self, other: &Grid<U>) -> bool {
        self.width == other.width && self.height == other.height
    }
}
