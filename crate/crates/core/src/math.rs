//! Small fixed-size linear algebra: 3-vectors, 3x3 matrices, rigid
//! transforms, axis-angle rotations and their derivatives, and the seeded
//! hash used to derive per-ray RNG streams.

use core::ops::{Add, AddAssign, Div, Mul, Neg, Sub, SubAssign};

/// Float intrinsics shim: host `std` math when available, `libm` otherwise.
/// Results are bit-stable within one build configuration.
pub(crate) mod flt {
    #[cfg(feature = "std")]
    mod imp {
        #[inline(always)]
        pub fn sqrt(x: f64) -> f64 {
            x.sqrt()
        }
        #[inline(always)]
        pub fn exp(x: f64) -> f64 {
            x.exp()
        }
        #[inline(always)]
        pub fn exp_m1(x: f64) -> f64 {
            x.exp_m1()
        }
        #[inline(always)]
        #[allow(dead_code)]
        pub fn ln(x: f64) -> f64 {
            x.ln()
        }
        #[inline(always)]
        pub fn ln_1p(x: f64) -> f64 {
            x.ln_1p()
        }
        #[inline(always)]
        pub fn log10(x: f64) -> f64 {
            x.log10()
        }
        #[inline(always)]
        pub fn sin(x: f64) -> f64 {
            x.sin()
        }
        #[inline(always)]
        pub fn cos(x: f64) -> f64 {
            x.cos()
        }
        #[inline(always)]
        pub fn acos(x: f64) -> f64 {
            x.acos()
        }
        #[inline(always)]
        #[allow(dead_code)] // used by encoding tests
        pub fn atan2(y: f64, x: f64) -> f64 {
            y.atan2(x)
        }
        #[inline(always)]
        pub fn floor(x: f64) -> f64 {
            x.floor()
        }
        #[inline(always)]
        pub fn ceil(x: f64) -> f64 {
            x.ceil()
        }
        #[inline(always)]
        #[allow(dead_code)]
        pub fn round(x: f64) -> f64 {
            x.round()
        }
        #[inline(always)]
        pub fn powi(x: f64, n: i32) -> f64 {
            x.powi(n)
        }
    }
    #[cfg(not(feature = "std"))]
    mod imp {
        #[inline(always)]
        pub fn sqrt(x: f64) -> f64 {
            libm::sqrt(x)
        }
        #[inline(always)]
        pub fn exp(x: f64) -> f64 {
            libm::exp(x)
        }
        #[inline(always)]
        pub fn exp_m1(x: f64) -> f64 {
            libm::expm1(x)
        }
        #[inline(always)]
        #[allow(dead_code)]
        pub fn ln(x: f64) -> f64 {
            libm::log(x)
        }
        #[inline(always)]
        pub fn ln_1p(x: f64) -> f64 {
            libm::log1p(x)
        }
        #[inline(always)]
        pub fn log10(x: f64) -> f64 {
            libm::log10(x)
        }
        #[inline(always)]
        pub fn sin(x: f64) -> f64 {
            libm::sin(x)
        }
        #[inline(always)]
        pub fn cos(x: f64) -> f64 {
            libm::cos(x)
        }
        #[inline(always)]
        pub fn acos(x: f64) -> f64 {
            libm::acos(x)
        }
        #[inline(always)]
        #[allow(dead_code)] // used by encoding tests
        pub fn atan2(y: f64, x: f64) -> f64 {
            libm::atan2(y, x)
        }
        #[inline(always)]
        pub fn floor(x: f64) -> f64 {
            libm::floor(x)
        }
        #[inline(always)]
        pub fn ceil(x: f64) -> f64 {
            libm::ceil(x)
        }
        #[inline(always)]
        #[allow(dead_code)]
        pub fn round(x: f64) -> f64 {
            libm::round(x)
        }
        #[inline(always)]
        pub fn powi(x: f64, n: i32) -> f64 {
            libm::pow(x, n as f64)
        }
    }
    pub use imp::*;
}

/// 3-component column vector, meters unless stated otherwise.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3 { x: 0.0, y: 0.0, z: 0.0 };

    #[inline]
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3 { x, y, z }
    }

    #[inline]
    pub fn splat(v: f64) -> Self {
        Vec3::new(v, v, v)
    }

    #[inline]
    pub fn dot(self, rhs: Vec3) -> f64 {
        self.x * rhs.x + self.y * rhs.y + self.z * rhs.z
    }

    #[inline]
    pub fn cross(self, rhs: Vec3) -> Vec3 {
        Vec3::new(
            self.y * rhs.z - self.z * rhs.y,
            self.z * rhs.x - self.x * rhs.z,
            self.x * rhs.y - self.y * rhs.x,
        )
    }

    #[inline]
    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    #[inline]
    pub fn norm(self) -> f64 {
        flt::sqrt(self.norm_sq())
    }

    /// Unit vector; the zero vector normalizes to zero.
    #[inline]
    pub fn normalized(self) -> Vec3 {
        let n = self.norm();
        if n > 0.0 {
            self / n
        } else {
            Vec3::ZERO
        }
    }

    #[inline]
    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    #[inline]
    pub fn min_by_component(self, rhs: Vec3) -> Vec3 {
        Vec3::new(self.x.min(rhs.x), self.y.min(rhs.y), self.z.min(rhs.z))
    }

    #[inline]
    pub fn max_by_component(self, rhs: Vec3) -> Vec3 {
        Vec3::new(self.x.max(rhs.x), self.y.max(rhs.y), self.z.max(rhs.z))
    }

    #[inline]
    pub fn component(self, axis: usize) -> f64 {
        match axis {
            0 => self.x,
            1 => self.y,
            _ => self.z,
        }
    }

    #[inline]
    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    #[inline]
    pub fn from_array(a: [f64; 3]) -> Vec3 {
        Vec3::new(a[0], a[1], a[2])
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    #[inline]
    fn add(self, rhs: Vec3) -> Vec3 {
        Vec3::new(self.x + rhs.x, self.y + rhs.y, self.z + rhs.z)
    }
}

impl AddAssign for Vec3 {
    #[inline]
    fn add_assign(&mut self, rhs: Vec3) {
        *self = *self + rhs;
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    #[inline]
    fn sub(self, rhs: Vec3) -> Vec3 {
        Vec3::new(self.x - rhs.x, self.y - rhs.y, self.z - rhs.z)
    }
}

impl SubAssign for Vec3 {
    #[inline]
    fn sub_assign(&mut self, rhs: Vec3) {
        *self = *self - rhs;
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    #[inline]
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    #[inline]
    fn mul(self, rhs: f64) -> Vec3 {
        Vec3::new(self.x * rhs, self.y * rhs, self.z * rhs)
    }
}

impl Mul<Vec3> for f64 {
    type Output = Vec3;
    #[inline]
    fn mul(self, rhs: Vec3) -> Vec3 {
        rhs * self
    }
}

impl Div<f64> for Vec3 {
    type Output = Vec3;
    #[inline]
    fn div(self, rhs: f64) -> Vec3 {
        Vec3::new(self.x / rhs, self.y / rhs, self.z / rhs)
    }
}

/// Row-major 3x3 matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Mat3 {
    pub m: [f64; 9],
}

impl Mat3 {
    pub const IDENTITY: Mat3 = Mat3 { m: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0] };

    #[inline]
    pub fn from_rows(r0: Vec3, r1: Vec3, r2: Vec3) -> Mat3 {
        Mat3 { m: [r0.x, r0.y, r0.z, r1.x, r1.y, r1.z, r2.x, r2.y, r2.z] }
    }

    #[inline]
    pub fn from_cols(c0: Vec3, c1: Vec3, c2: Vec3) -> Mat3 {
        Mat3 { m: [c0.x, c1.x, c2.x, c0.y, c1.y, c2.y, c0.z, c1.z, c2.z] }
    }

    #[inline]
    pub fn zeros() -> Mat3 {
        Mat3 { m: [0.0; 9] }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.m[3 * r + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> Vec3 {
        Vec3::new(self.m[3 * r], self.m[3 * r + 1], self.m[3 * r + 2])
    }

    #[inline]
    pub fn col(&self, c: usize) -> Vec3 {
        Vec3::new(self.m[c], self.m[3 + c], self.m[6 + c])
    }

    #[inline]
    pub fn transpose(&self) -> Mat3 {
        Mat3::from_rows(self.col(0), self.col(1), self.col(2))
    }

    pub fn mul_vec(&self, v: Vec3) -> Vec3 {
        Vec3::new(self.row(0).dot(v), self.row(1).dot(v), self.row(2).dot(v))
    }

    pub fn mul_mat(&self, rhs: &Mat3) -> Mat3 {
        let mut out = Mat3::zeros();
        for r in 0..3 {
            for c in 0..3 {
                let mut s = 0.0;
                for k in 0..3 {
                    s += self.at(r, k) * rhs.at(k, c);
                }
                out.m[3 * r + c] = s;
            }
        }
        out
    }

    pub fn scale(&self, s: f64) -> Mat3 {
        let mut out = *self;
        for v in out.m.iter_mut() {
            *v *= s;
        }
        out
    }

    pub fn add_mat(&self, rhs: &Mat3) -> Mat3 {
        let mut out = *self;
        for (a, b) in out.m.iter_mut().zip(rhs.m.iter()) {
            *a += *b;
        }
        out
    }

    pub fn det(&self) -> f64 {
        self.row(0).dot(self.row(1).cross(self.row(2)))
    }

    /// Frobenius distance to the identity, used for orthonormality checks.
    pub fn orthonormality_error(&self) -> f64 {
        let rt_r = self.transpose().mul_mat(self);
        let mut err: f64 = 0.0;
        for r in 0..3 {
            for c in 0..3 {
                let target = if r == c { 1.0 } else { 0.0 };
                err = err.max((rt_r.at(r, c) - target).abs());
            }
        }
        err
    }
}

/// Skew-symmetric cross-product matrix: `skew(a) * b == a.cross(b)`.
#[inline]
pub fn skew(a: Vec3) -> Mat3 {
    Mat3 { m: [0.0, -a.z, a.y, a.z, 0.0, -a.x, -a.y, a.x, 0.0] }
}

/// Rodrigues rotation from an axis-angle vector (angle = |a| radians).
/// Small angles fall back to the second-order series, which is exact enough
/// below the switch point and free of the 1/theta singularity.
pub fn rotation_from_axis_angle(a: Vec3) -> Mat3 {
    let theta_sq = a.norm_sq();
    let k = skew(a);
    let k2 = k.mul_mat(&k);
    if theta_sq < 1e-16 {
        return Mat3::IDENTITY.add_mat(&k).add_mat(&k2.scale(0.5));
    }
    let theta = flt::sqrt(theta_sq);
    let s = flt::sin(theta) / theta;
    let c = (1.0 - flt::cos(theta)) / theta_sq;
    Mat3::IDENTITY.add_mat(&k.scale(s)).add_mat(&k2.scale(c))
}

/// Jacobian of the rotated point w.r.t. the axis-angle vector:
/// `J[:, i] = d(R(a) u) / d a_i`.
pub fn rotate_point_jacobian(a: Vec3, u: Vec3) -> Mat3 {
    let theta_sq = a.norm_sq();
    if theta_sq < 1e-14 {
        // R(a) u ~ u + a x u, so the leading term is -skew(u).
        return skew(u).scale(-1.0);
    }
    let r = rotation_from_axis_angle(a);
    let ru = r.mul_vec(u);
    let mut cols = [Vec3::ZERO; 3];
    for i in 0..3 {
        let e_i = Vec3::new(
            if i == 0 { 1.0 } else { 0.0 },
            if i == 1 { 1.0 } else { 0.0 },
            if i == 2 { 1.0 } else { 0.0 },
        );
        // Gallego & Yezzi: d(Ru)/da_i = [a_i [a]x + [a x ((I - R) e_i)]x] / |a|^2 * R u
        let ai = a.component(i);
        let v = a.cross(e_i - r.mul_vec(e_i));
        let m = skew(a).scale(ai).add_mat(&skew(v)).scale(1.0 / theta_sq);
        cols[i] = m.mul_vec(ru);
    }
    Mat3::from_cols(cols[0], cols[1], cols[2])
}

/// Rigid transform `x -> R x + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Rigid {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Rigid {
    pub const IDENTITY: Rigid = Rigid { rotation: Mat3::IDENTITY, translation: Vec3::ZERO };

    #[inline]
    pub fn new(rotation: Mat3, translation: Vec3) -> Rigid {
        Rigid { rotation, translation }
    }

    #[inline]
    pub fn apply(&self, x: Vec3) -> Vec3 {
        self.rotation.mul_vec(x) + self.translation
    }

    /// `self` then-after `rhs` composition: `(self * rhs)(x) = self(rhs(x))`.
    pub fn compose(&self, rhs: &Rigid) -> Rigid {
        Rigid {
            rotation: self.rotation.mul_mat(&rhs.rotation),
            translation: self.rotation.mul_vec(rhs.translation) + self.translation,
        }
    }

    pub fn inverse(&self) -> Rigid {
        let rt = self.rotation.transpose();
        Rigid { rotation: rt, translation: rt.mul_vec(-self.translation) }
    }
}

/// splitmix64 step; the standard 64-bit finalizer-based generator.
#[inline]
pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Deterministic seed derivation from a list of stream identifiers
/// (e.g. global seed, frame, camera, pixel).
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut state = 0x5DEECE66D_u64;
    let mut out = 0_u64;
    for &p in parts {
        state ^= p.wrapping_mul(0x2545F4914F6CDD1D);
        out ^= splitmix64(&mut state);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn rotation_quarter_turn_about_z() {
        let r = rotation_from_axis_angle(Vec3::new(0.0, 0.0, core::f64::consts::FRAC_PI_2));
        let v = r.mul_vec(Vec3::new(1.0, 0.0, 0.0));
        assert_close(v.x, 0.0, 1e-12);
        assert_close(v.y, 1.0, 1e-12);
        assert_close(v.z, 0.0, 1e-12);
    }

    #[test]
    fn rotation_is_orthonormal() {
        let r = rotation_from_axis_angle(Vec3::new(0.3, -0.7, 0.2));
        assert!(r.orthonormality_error() < 1e-12);
        assert_close(r.det(), 1.0, 1e-12);
    }

    #[test]
    fn small_angle_rotation_matches_series() {
        let a = Vec3::new(1e-9, -2e-9, 0.5e-9);
        let r = rotation_from_axis_angle(a);
        let v = Vec3::new(0.2, 0.4, -0.1);
        let rv = r.mul_vec(v);
        let expect = v + a.cross(v);
        assert!((rv - expect).norm() < 1e-15);
    }

    #[test]
    fn rotate_point_jacobian_matches_finite_differences() {
        let cases = [
            (Vec3::new(0.4, -0.2, 0.9), Vec3::new(0.3, 1.2, -0.5)),
            (Vec3::new(-1.3, 0.8, 0.1), Vec3::new(-0.7, 0.0, 2.0)),
            (Vec3::new(1e-9, 0.0, -1e-9), Vec3::new(1.0, -2.0, 0.5)),
        ];
        let h = 1e-6;
        for (a, u) in cases {
            let jac = rotate_point_jacobian(a, u);
            for i in 0..3 {
                let mut ap = a;
                let mut am = a;
                match i {
                    0 => {
                        ap.x += h;
                        am.x -= h;
                    }
                    1 => {
                        ap.y += h;
                        am.y -= h;
                    }
                    _ => {
                        ap.z += h;
                        am.z -= h;
                    }
                }
                let fd = (rotation_from_axis_angle(ap).mul_vec(u)
                    - rotation_from_axis_angle(am).mul_vec(u))
                    / (2.0 * h);
                let an = jac.col(i);
                assert!((fd - an).norm() < 1e-6, "axis {i}: fd {fd:?} vs an {an:?}");
            }
        }
    }

    #[test]
    fn rigid_inverse_round_trip() {
        let t = Rigid::new(rotation_from_axis_angle(Vec3::new(0.2, 0.5, -0.3)), Vec3::new(1.0, -2.0, 0.5));
        let x = Vec3::new(0.3, 0.7, -1.2);
        let back = t.inverse().apply(t.apply(x));
        assert!((back - x).norm() < 1e-14);
    }

    #[test]
    fn derive_seed_is_order_sensitive() {
        assert_ne!(derive_seed(&[1, 2, 3]), derive_seed(&[3, 2, 1]));
        assert_eq!(derive_seed(&[1, 2, 3]), derive_seed(&[1, 2, 3]));
    }
}
