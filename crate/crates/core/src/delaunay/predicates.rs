//! Geometric predicates with a floating-point filter and an exact rational
//! fallback. The filter evaluates the determinant in f64 alongside a
//! conservative forward error bound on its magnitude (the "permanent"); when
//! the magnitude cannot certify the sign, the determinant is recomputed in
//! arbitrary-precision rational arithmetic, which is exact because every f64
//! is a dyadic rational.

use num_rational::BigRational;
use num_traits::{Signed, Zero};

use crate::math::V3;

/// Relative error bound for the 3x3 orientation determinant. The true bound
/// for this evaluation order is a few ulps; two orders of margin are kept.
const ORIENT3D_ERR: f64 = 1e-13;
/// Relative error bound for the 4x4 insphere determinant.
const INSPHERE_ERR: f64 = 1e-12;

pub fn br(x: f64) -> BigRational {
    BigRational::from_float(x).expect("coordinates must be finite")
}

pub type RPoint = [BigRational; 3];

pub fn rpoint(p: &V3) -> RPoint {
    [br(p.x), br(p.y), br(p.z)]
}

fn sign_of(r: &BigRational) -> i32 {
    if r.is_zero() {
        0
    } else if r.is_positive() {
        1
    } else {
        -1
    }
}

/// Sign of det[b-a; c-a; d-a]: positive when (a, b, c, d) is right-handed,
/// i.e. d lies on the side of plane (a, b, c) pointed to by (b-a)x(c-a).
pub fn orient3d(a: &V3, b: &V3, c: &V3, d: &V3) -> i32 {
    let (bax, bay, baz) = (b.x - a.x, b.y - a.y, b.z - a.z);
    let (cax, cay, caz) = (c.x - a.x, c.y - a.y, c.z - a.z);
    let (dax, day, daz) = (d.x - a.x, d.y - a.y, d.z - a.z);

    let m1 = cay * daz - caz * day;
    let m2 = cax * daz - caz * dax;
    let m3 = cax * day - cay * dax;
    let det = bax * m1 - bay * m2 + baz * m3;

    let p1 = (cay * daz).abs() + (caz * day).abs();
    let p2 = (cax * daz).abs() + (caz * dax).abs();
    let p3 = (cax * day).abs() + (cay * dax).abs();
    let perm = bax.abs() * p1 + bay.abs() * p2 + baz.abs() * p3;

    if det.abs() > ORIENT3D_ERR * perm {
        return if det > 0.0 { 1 } else { -1 };
    }
    orient3d_exact(&rpoint(a), &rpoint(b), &rpoint(c), &rpoint(d))
}

pub fn orient3d_exact(a: &RPoint, b: &RPoint, c: &RPoint, d: &RPoint) -> i32 {
    let ba: Vec<BigRational> = (0..3).map(|i| &b[i] - &a[i]).collect();
    let ca: Vec<BigRational> = (0..3).map(|i| &c[i] - &a[i]).collect();
    let da: Vec<BigRational> = (0..3).map(|i| &d[i] - &a[i]).collect();
    let det = &ba[0] * (&ca[1] * &da[2] - &ca[2] * &da[1])
        - &ba[1] * (&ca[0] * &da[2] - &ca[2] * &da[0])
        + &ba[2] * (&ca[0] * &da[1] - &ca[1] * &da[0]);
    sign_of(&det)
}

/// True when a, b, c are exactly collinear.
pub fn collinear(a: &V3, b: &V3, c: &V3) -> bool {
    let ba = b - a;
    let ca = c - a;
    for (x1, y1, x2, y2) in [
        (ba.y, ba.z, ca.y, ca.z),
        (ba.x, ba.z, ca.x, ca.z),
        (ba.x, ba.y, ca.x, ca.y),
    ] {
        let det = x1 * y2 - y1 * x2;
        let perm = (x1 * y2).abs() + (y1 * x2).abs();
        if det.abs() > 1e-13 * perm {
            return false;
        }
        // Uncertain or zero: decide exactly.
        let exact = &br(x1) * &br(y2) - &br(y1) * &br(x2);
        if !exact.is_zero() {
            return false;
        }
    }
    true
}

/// Sign of the 4x4 insphere determinant with rows (x - e, |x - e|^2) for
/// x in (a, b, c, d). For a positively oriented tet (orient3d(a,b,c,d) > 0)
/// the sign is negative iff e lies strictly inside the circumsphere.
pub fn insphere_det(a: &V3, b: &V3, c: &V3, d: &V3, e: &V3) -> i32 {
    let (aex, aey, aez) = (a.x - e.x, a.y - e.y, a.z - e.z);
    let (bex, bey, bez) = (b.x - e.x, b.y - e.y, b.z - e.z);
    let (cex, cey, cez) = (c.x - e.x, c.y - e.y, c.z - e.z);
    let (dex, dey, dez) = (d.x - e.x, d.y - e.y, d.z - e.z);

    let ab = aex * bey - bex * aey;
    let bc = bex * cey - cex * bey;
    let cd = cex * dey - dex * cey;
    let da = dex * aey - aex * dey;
    let ac = aex * cey - cex * aey;
    let bd = bex * dey - dex * bey;

    let abc = aez * bc - bez * ac + cez * ab;
    let bcd = bez * cd - cez * bd + dez * bc;
    let cda = cez * da + dez * ac + aez * cd;
    let dab = dez * ab + aez * bd + bez * da;

    let alift = aex * aex + aey * aey + aez * aez;
    let blift = bex * bex + bey * bey + bez * bez;
    let clift = cex * cex + cey * cey + cez * cez;
    let dlift = dex * dex + dey * dey + dez * dez;

    let det = (dlift * abc - clift * dab) + (blift * cda - alift * bcd);

    let abs2 = |x: f64, y: f64| x.abs() + y.abs();
    let ab_a = abs2(aex * bey, bex * aey);
    let bc_a = abs2(bex * cey, cex * bey);
    let cd_a = abs2(cex * dey, dex * cey);
    let da_a = abs2(dex * aey, aex * dey);
    let ac_a = abs2(aex * cey, cex * aey);
    let bd_a = abs2(bex * dey, dex * bey);
    let abc_a = aez.abs() * bc_a + bez.abs() * ac_a + cez.abs() * ab_a;
    let bcd_a = bez.abs() * cd_a + cez.abs() * bd_a + dez.abs() * bc_a;
    let cda_a = cez.abs() * da_a + dez.abs() * ac_a + aez.abs() * cd_a;
    let dab_a = dez.abs() * ab_a + aez.abs() * bd_a + bez.abs() * da_a;
    let perm = dlift * abc_a + clift * dab_a + blift * cda_a + alift * bcd_a;

    if det.abs() > INSPHERE_ERR * perm {
        return if det > 0.0 { 1 } else { -1 };
    }
    insphere_det_exact(&rpoint(a), &rpoint(b), &rpoint(c), &rpoint(d), &rpoint(e))
}

fn lift_diff(x: &RPoint, e: &RPoint) -> [BigRational; 4] {
    let dx = &x[0] - &e[0];
    let dy = &x[1] - &e[1];
    let dz = &x[2] - &e[2];
    let l = &dx * &dx + &dy * &dy + &dz * &dz;
    [dx, dy, dz, l]
}

fn det4_br(rows: &[[BigRational; 4]; 4]) -> BigRational {
    let mut det = BigRational::zero();
    for k in 0..4 {
        // Minor over columns != k of rows 1..4.
        let cols: Vec<usize> = (0..4).filter(|&c| c != k).collect();
        let m = |r: usize, c: usize| &rows[r][cols[c]];
        let minor = m(1, 0) * (m(2, 1) * m(3, 2) - m(2, 2) * m(3, 1))
            - m(1, 1) * (m(2, 0) * m(3, 2) - m(2, 2) * m(3, 0))
            + m(1, 2) * (m(2, 0) * m(3, 1) - m(2, 1) * m(3, 0));
        let term = &rows[0][k] * minor;
        if k % 2 == 0 {
            det += term;
        } else {
            det -= term;
        }
    }
    det
}

pub fn insphere_det_exact(a: &RPoint, b: &RPoint, c: &RPoint, d: &RPoint, e: &RPoint) -> i32 {
    let rows = [lift_diff(a, e), lift_diff(b, e), lift_diff(c, e), lift_diff(d, e)];
    sign_of(&det4_br(&rows))
}
