//! Three-component vectors and 3×3 rotations over any [`Real`].

use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vec3<T = f64> {
    pub x: T,
    pub y: T,
    pub z: T,
}

pub type V3 = Vec3<f64>;

impl<T: Real> Vec3<T> {
    #[inline]
    pub fn new(x: T, y: T, z: T) -> Self {
        Self { x, y, z }
    }

    #[inline]
    pub fn zero() -> Self {
        Self::new(T::zero(), T::zero(), T::zero())
    }

    #[inline]
    pub fn cst(v: V3) -> Self {
        Self::new(T::cst(v.x), T::cst(v.y), T::cst(v.z))
    }

    #[inline]
    pub fn val(&self) -> V3 {
        Vec3::new(self.x.val(), self.y.val(), self.z.val())
    }

    #[inline]
    pub fn dot(&self, o: &Self) -> T {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    #[inline]
    pub fn cross(&self, o: &Self) -> Self {
        Self::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    #[inline]
    pub fn norm_sq(&self) -> T {
        self.dot(self)
    }

    #[inline]
    pub fn norm(&self) -> T {
        self.norm_sq().sqrt()
    }

    #[inline]
    pub fn scale(&self, s: T) -> Self {
        Self::new(self.x * s, self.y * s, self.z * s)
    }

    #[inline]
    pub fn normalized(&self) -> Self {
        let n = self.norm();
        Self::new(self.x / n, self.y / n, self.z / n)
    }

    #[inline]
    pub fn get(&self, i: usize) -> T {
        match i {
            0 => self.x,
            1 => self.y,
            _ => self.z,
        }
    }
}

impl V3 {
    pub fn from_array(a: [f64; 3]) -> Self {
        Vec3::new(a[0], a[1], a[2])
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn dist(&self, o: &V3) -> f64 {
        (*self - *o).norm()
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    /// Any unit vector perpendicular to `self` (which must be non-zero).
    pub fn any_perpendicular(&self) -> V3 {
        let a = if self.x.abs() < 0.9 {
            Vec3::new(1.0, 0.0, 0.0)
        } else {
            Vec3::new(0.0, 1.0, 0.0)
        };
        self.cross(&a).normalized()
    }
}

impl<T: Real> Add for Vec3<T> {
    type Output = Self;
    #[inline]
    fn add(self, o: Self) -> Self {
        Self::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl<T: Real> Sub for Vec3<T> {
    type Output = Self;
    #[inline]
    fn sub(self, o: Self) -> Self {
        Self::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl<T: Real> Neg for Vec3<T> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        Self::new(-self.x, -self.y, -self.z)
    }
}

impl<T: Real> Mul<T> for Vec3<T> {
    type Output = Self;
    #[inline]
    fn mul(self, s: T) -> Self {
        self.scale(s)
    }
}

/// Row-major 3×3 matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mat3<T = f64> {
    pub m: [[T; 3]; 3],
}

pub type M3 = Mat3<f64>;

impl<T: Real> Mat3<T> {
    pub fn identity() -> Self {
        let (o, z) = (T::one(), T::zero());
        Self {
            m: [[o, z, z], [z, o, z], [z, z, o]],
        }
    }

    pub fn cst(a: &M3) -> Self {
        let mut m = [[T::zero(); 3]; 3];
        for (r, row) in a.m.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                m[r][c] = T::cst(*v);
            }
        }
        Self { m }
    }

    pub fn val(&self) -> M3 {
        let mut m = [[0.0; 3]; 3];
        for r in 0..3 {
            for c in 0..3 {
                m[r][c] = self.m[r][c].val();
            }
        }
        Mat3 { m }
    }

    pub fn from_columns(a: Vec3<T>, b: Vec3<T>, c: Vec3<T>) -> Self {
        Self {
            m: [[a.x, b.x, c.x], [a.y, b.y, c.y], [a.z, b.z, c.z]],
        }
    }

    pub fn column(&self, c: usize) -> Vec3<T> {
        Vec3::new(self.m[0][c], self.m[1][c], self.m[2][c])
    }

    #[inline]
    pub fn mul_vec(&self, v: &Vec3<T>) -> Vec3<T> {
        let m = &self.m;
        Vec3::new(
            m[0][0] * v.x + m[0][1] * v.y + m[0][2] * v.z,
            m[1][0] * v.x + m[1][1] * v.y + m[1][2] * v.z,
            m[2][0] * v.x + m[2][1] * v.y + m[2][2] * v.z,
        )
    }

    pub fn mul_mat(&self, o: &Self) -> Self {
        let mut m = [[T::zero(); 3]; 3];
        for (r, row) in m.iter_mut().enumerate() {
            for (c, out) in row.iter_mut().enumerate() {
                *out = self.m[r][0] * o.m[0][c] + self.m[r][1] * o.m[1][c] + self.m[r][2] * o.m[2][c];
            }
        }
        Self { m }
    }

    pub fn transpose(&self) -> Self {
        let mut m = self.m;
        for (r, row) in m.iter_mut().enumerate() {
            for (c, out) in row.iter_mut().enumerate() {
                *out = self.m[c][r];
            }
        }
        Self { m }
    }

    /// Rotation matrix of an axis-angle vector (Rodrigues), smooth through zero.
    pub fn from_axis_angle(w: &Vec3<T>) -> Self {
        let th2 = w.norm_sq();
        let t2 = th2.val();
        // sin(θ)/θ and (1-cos θ)/θ², Taylor-expanded near zero
        let (a, b) = if t2 < 1e-8 {
            let a = T::one() - th2.scale(1.0 / 6.0) + th2.powi2().scale(1.0 / 120.0);
            let b = T::cst(0.5) - th2.scale(1.0 / 24.0) + th2.powi2().scale(1.0 / 720.0);
            (a, b)
        } else {
            let th = th2.sqrt();
            (th.sin() / th, (T::one() - th.cos()) / th2)
        };
        let (x, y, z) = (w.x, w.y, w.z);
        let o = T::one();
        Self {
            m: [
                [o - b * (y * y + z * z), -a * z + b * x * y, a * y + b * x * z],
                [a * z + b * x * y, o - b * (x * x + z * z), -a * x + b * y * z],
                [-a * y + b * x * z, a * x + b * y * z, o - b * (x * x + y * y)],
            ],
        }
    }
}

impl M3 {
    pub fn rotation_z(angle: f64) -> M3 {
        Mat3::from_axis_angle(&Vec3::new(0.0, 0.0, angle))
    }

    /// Axis-angle vector of a rotation matrix, angle in [0, π].
    pub fn to_axis_angle(&self) -> V3 {
        let m = &self.m;
        let tr = m[0][0] + m[1][1] + m[2][2];
        // Shepperd's quaternion extraction picks the best-conditioned pivot
        let (w, x, y, z) = if tr > m[0][0].max(m[1][1]).max(m[2][2]) {
            let s = (1.0 + tr).sqrt() * 2.0;
            (0.25 * s, (m[2][1] - m[1][2]) / s, (m[0][2] - m[2][0]) / s, (m[1][0] - m[0][1]) / s)
        } else if m[0][0] >= m[1][1] && m[0][0] >= m[2][2] {
            let s = (1.0 + m[0][0] - m[1][1] - m[2][2]).sqrt() * 2.0;
            ((m[2][1] - m[1][2]) / s, 0.25 * s, (m[0][1] + m[1][0]) / s, (m[0][2] + m[2][0]) / s)
        } else if m[1][1] >= m[2][2] {
            let s = (1.0 + m[1][1] - m[0][0] - m[2][2]).sqrt() * 2.0;
            ((m[0][2] - m[2][0]) / s, (m[0][1] + m[1][0]) / s, 0.25 * s, (m[1][2] + m[2][1]) / s)
        } else {
            let s = (1.0 + m[2][2] - m[0][0] - m[1][1]).sqrt() * 2.0;
            ((m[1][0] - m[0][1]) / s, (m[0][2] + m[2][0]) / s, (m[1][2] + m[2][1]) / s, 0.25 * s)
        };
        let (w, x, y, z) = if w < 0.0 { (-w, -x, -y, -z) } else { (w, x, y, z) };
        let vn = (x * x + y * y + z * z).sqrt();
        if vn < 1e-15 {
            return Vec3::new(2.0 * x, 2.0 * y, 2.0 * z);
        }
        let angle = 2.0 * vn.atan2(w);
        Vec3::new(x, y, z).scale(angle / vn)
    }
}

/// Symmetric 3×3 eigen-decomposition by cyclic Jacobi sweeps.
/// Returns eigenvalues in descending order with matching unit eigenvectors.
pub fn symmetric_eigen(a: &M3) -> ([f64; 3], [V3; 3]) {
    let mut m = a.m;
    let mut v = M3::identity().m;
    for _ in 0..64 {
        let off = m[0][1].abs() + m[0][2].abs() + m[1][2].abs();
        if off < 1e-14 {
            break;
        }
        for (p, q) in [(0, 1), (0, 2), (1, 2)] {
            if m[p][q].abs() < 1e-300 {
                continue;
            }
            let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
            let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
            let t = if theta == 0.0 { 1.0 } else { t };
            let c = 1.0 / (t * t + 1.0).sqrt();
            let s = t * c;
            for k in 0..3 {
                let (mkp, mkq) = (m[k][p], m[k][q]);
                m[k][p] = c * mkp - s * mkq;
                m[k][q] = s * mkp + c * mkq;
            }
            for k in 0..3 {
                let (mpk, mqk) = (m[p][k], m[q][k]);
                m[p][k] = c * mpk - s * mqk;
                m[q][k] = s * mpk + c * mqk;
            }
            for row in v.iter_mut() {
                let (vp, vq) = (row[p], row[q]);
                row[p] = c * vp - s * vq;
                row[q] = s * vp + c * vq;
            }
        }
    }
    let mut idx = [0usize, 1, 2];
    idx.sort_by(|&i, &j| m[j][j].partial_cmp(&m[i][i]).unwrap_or(std::cmp::Ordering::Equal));
    let vals = [m[idx[0]][idx[0]], m[idx[1]][idx[1]], m[idx[2]][idx[2]]];
    let col = |c: usize| Vec3::new(v[0][c], v[1][c], v[2][c]);
    (vals, [col(idx[0]), col(idx[1]), col(idx[2])])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rodrigues_is_orthonormal_and_matches_z_rotation() {
        let r = M3::from_axis_angle(&Vec3::new(0.3, -1.1, 0.4));
        let rt = r.mul_mat(&r.transpose());
        for i in 0..3 {
            for j in 0..3 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((rt.m[i][j] - e).abs() < 1e-12);
            }
        }
        let rz = M3::rotation_z(std::f64::consts::FRAC_PI_2);
        let p = rz.mul_vec(&Vec3::new(1.0, 0.0, 0.0));
        assert!((p.x).abs() < 1e-12 && (p.y - 1.0).abs() < 1e-12);
    }

    #[test]
    fn small_angle_branch_is_continuous() {
        let w1 = Vec3::new(5e-5, 0.0, 0.0);
        let w2 = Vec3::new(1.0001e-4, 0.0, 0.0);
        let a = M3::from_axis_angle(&w1);
        let b = M3::from_axis_angle(&w2);
        assert!((a.m[1][2] + 5e-5).abs() < 1e-12);
        assert!((b.m[1][2] + (1.0001e-4f64).sin()).abs() < 1e-12);
    }

    #[test]
    fn axis_angle_round_trips() {
        for w in [
            Vec3::new(0.3, -1.1, 0.4),
            Vec3::new(0.0, 0.0, 3.1),
            Vec3::new(-3.0, 0.2, 0.1),
            Vec3::new(1e-9, 0.0, 0.0),
            Vec3::new(0.0, std::f64::consts::PI - 1e-7, 0.0),
        ] {
            let r = M3::from_axis_angle(&w);
            let back = M3::from_axis_angle(&r.to_axis_angle());
            for i in 0..3 {
                for j in 0..3 {
                    assert!((r.m[i][j] - back.m[i][j]).abs() < 1e-9, "{w:?}");
                }
            }
        }
    }

    #[test]
    fn jacobi_recovers_diagonal() {
        let r = M3::from_axis_angle(&Vec3::new(0.2, 0.5, -0.3));
        let d = Mat3 {
            m: [[5.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 0.5]],
        };
        let a = r.mul_mat(&d).mul_mat(&r.transpose());
        let (vals, vecs) = symmetric_eigen(&a);
        assert!((vals[0] - 5.0).abs() < 1e-10);
        assert!((vals[2] - 0.5).abs() < 1e-10);
        let axis = r.column(0);
        assert!((vecs[0].dot(&axis).abs() - 1.0).abs() < 1e-10);
    }
}
