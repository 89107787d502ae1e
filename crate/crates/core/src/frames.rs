//! Planar vector algebra for αβ / dq quantities.
//!
//! Everything here is power invariant: the Clarke matrix is orthonormal, so
//! `P = v·i` and `Q = v·(J i)` hold in αβ and in any rotated frame alike.
//! `J` is the rotation by +π/2.

use std::f64::consts::FRAC_PI_2;
use std::ops::{Add, AddAssign, Mul, Neg, Sub, SubAssign};

use serde::{Deserialize, Serialize};

/// A two-component vector in αβ or dq coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PlanarVec {
    pub x: f64,
    pub y: f64,
}

impl PlanarVec {
    pub const ZERO: PlanarVec = PlanarVec { x: 0.0, y: 0.0 };
    /// First unit vector, `g₁ = [1, 0]`.
    pub const G1: PlanarVec = PlanarVec { x: 1.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    /// Unit vector at `angle` from the first axis.
    pub fn from_angle(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self { x: c, y: s }
    }

    pub fn from_polar(magnitude: f64, angle: f64) -> Self {
        Self::from_angle(angle) * magnitude
    }

    pub fn dot(self, other: PlanarVec) -> f64 {
        self.x * other.x + self.y * other.y
    }

    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn angle(self) -> f64 {
        self.y.atan2(self.x)
    }

    /// `J v`, i.e. rotation by +π/2.
    pub fn perp(self) -> Self {
        Self { x: -self.y, y: self.x }
    }

    /// `Jᵀ v`, i.e. rotation by −π/2.
    pub fn perp_t(self) -> Self {
        Self { x: self.y, y: -self.x }
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl Add for PlanarVec {
    type Output = PlanarVec;
    fn add(self, rhs: PlanarVec) -> PlanarVec {
        PlanarVec::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl AddAssign for PlanarVec {
    fn add_assign(&mut self, rhs: PlanarVec) {
        self.x += rhs.x;
        self.y += rhs.y;
    }
}

impl Sub for PlanarVec {
    type Output = PlanarVec;
    fn sub(self, rhs: PlanarVec) -> PlanarVec {
        PlanarVec::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl SubAssign for PlanarVec {
    fn sub_assign(&mut self, rhs: PlanarVec) {
        self.x -= rhs.x;
        self.y -= rhs.y;
    }
}

impl Neg for PlanarVec {
    type Output = PlanarVec;
    fn neg(self) -> PlanarVec {
        PlanarVec::new(-self.x, -self.y)
    }
}

impl Mul<f64> for PlanarVec {
    type Output = PlanarVec;
    fn mul(self, k: f64) -> PlanarVec {
        PlanarVec::new(self.x * k, self.y * k)
    }
}

impl Mul<PlanarVec> for f64 {
    type Output = PlanarVec;
    fn mul(self, v: PlanarVec) -> PlanarVec {
        v * self
    }
}

/// Planar rotation `R_θ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation {
    pub angle: f64,
}

impl Rotation {
    pub const fn new(angle: f64) -> Self {
        Self { angle }
    }

    /// `J = R_{π/2}`.
    pub const fn quarter_turn() -> Self {
        Self { angle: FRAC_PI_2 }
    }

    pub fn apply(self, v: PlanarVec) -> PlanarVec {
        rotate(self.angle, v)
    }

    pub fn then(self, other: Rotation) -> Rotation {
        Rotation::new(self.angle + other.angle)
    }

    pub fn inverse(self) -> Rotation {
        Rotation::new(-self.angle)
    }
}

/// Phasor impedance acting on planar vectors as `r·I + x·J`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ComplexImpedance {
    /// Resistive part, Ω.
    pub r: f64,
    /// Reactive part at the nominal grid frequency, Ω.
    pub x: f64,
}

impl ComplexImpedance {
    pub const fn new(r: f64, x: f64) -> Self {
        Self { r, x }
    }

    /// `R + J ω L`.
    pub fn from_rl(r: f64, l: f64, omega: f64) -> Self {
        Self { r, x: omega * l }
    }

    pub fn norm_sq(self) -> f64 {
        self.r * self.r + self.x * self.x
    }

    pub fn magnitude(self) -> f64 {
        self.r.hypot(self.x)
    }

    pub fn is_invertible(self) -> bool {
        self.norm_sq() > 0.0
    }

    pub fn apply(self, v: PlanarVec) -> PlanarVec {
        v * self.r + v.perp() * self.x
    }

    /// `Z⁻¹ v`, `None` when `Z = 0`.
    pub fn solve(self, v: PlanarVec) -> Option<PlanarVec> {
        let d = self.norm_sq();
        if d > 0.0 {
            // (rI + xJ)⁻¹ = (rI − xJ) / (r² + x²)
            Some((v * self.r - v.perp() * self.x) * (1.0 / d))
        } else {
            None
        }
    }
}

impl Add for ComplexImpedance {
    type Output = ComplexImpedance;
    fn add(self, rhs: ComplexImpedance) -> ComplexImpedance {
        ComplexImpedance::new(self.r + rhs.r, self.x + rhs.x)
    }
}

const SQRT_2_3: f64 = 0.816_496_580_927_726;
const SQRT_3_2: f64 = 0.866_025_403_784_438_6;
const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;

/// Power-invariant Clarke transform. Returns the αβ part and the γ
/// (zero-sequence) component separately.
pub fn clarke(abc: [f64; 3]) -> (PlanarVec, f64) {
    let [a, b, c] = abc;
    let alpha = SQRT_2_3 * (a - 0.5 * b - 0.5 * c);
    let beta = SQRT_2_3 * SQRT_3_2 * (b - c);
    let gamma = SQRT_2_3 * FRAC_1_SQRT_2 * (a + b + c);
    (PlanarVec::new(alpha, beta), gamma)
}

/// Inverse of [`clarke`] (its transpose).
pub fn inverse_clarke(ab: PlanarVec, gamma: f64) -> [f64; 3] {
    let z = FRAC_1_SQRT_2 * gamma;
    [SQRT_2_3 * (ab.x + z), SQRT_2_3 * (-0.5 * ab.x + SQRT_3_2 * ab.y + z), SQRT_2_3 * (-0.5 * ab.x - SQRT_3_2 * ab.y + z)]
}

/// `R_θ v`. dq quantities are obtained as `rotate(-θ, x_αβ)`.
pub fn rotate(theta: f64, v: PlanarVec) -> PlanarVec {
    let (s, c) = theta.sin_cos();
    PlanarVec::new(c * v.x - s * v.y, s * v.x + c * v.y)
}

/// Instantaneous `(P, Q) = (vᵀ i, vᵀ J i)`.
pub fn instantaneous_power(v: PlanarVec, i: PlanarVec) -> (f64, f64) {
    (v.dot(i), v.dot(i.perp()))
}

/// Circular limiter: scales `v` back onto the disc of radius `r`, keeping its
/// direction.
pub fn circular_sat(v: PlanarVec, r: f64) -> PlanarVec {
    debug_assert!(r >= 0.0);
    let n = v.norm();
    if n <= r {
        v
    } else {
        let mut out = v * (r / n);
        // rounding can leave the result a few ulp outside the disc
        while out.norm() > r {
            out = out * (1.0 - f64::EPSILON);
        }
        out
    }
}

/// Clamp to `[-lim, lim]`; the flag reports whether the clamp was active.
pub fn scalar_sat(u: f64, lim: f64) -> (f64, bool) {
    debug_assert!(lim >= 0.0);
    if u > lim {
        (lim, true)
    } else if u < -lim {
        (-lim, true)
    } else {
        (u, false)
    }
}

/// Wrap an angle to `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::{PI, TAU};
    let w = a.rem_euclid(TAU);
    if w > PI {
        w - TAU
    } else {
        w
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    #[test]
    fn clarke_zero() {
        let (ab, g) = clarke([0.0; 3]);
        assert_eq!(ab, PlanarVec::ZERO);
        assert_eq!(g, 0.0);
    }

    #[test]
    fn clarke_balanced_set() {
        // α = √(2/3)(1 + 1/4 + 1/4) = √(3/2)
        let abc = [1.0, (-2.0 * PI / 3.0).cos(), (2.0 * PI / 3.0).cos()];
        let (ab, g) = clarke(abc);
        assert_abs_diff_eq!(ab.x, 1.5f64.sqrt(), epsilon = 1e-14);
        assert_abs_diff_eq!(ab.y, 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(g, 0.0, epsilon = 1e-14);
    }

    #[test]
    fn clarke_matrix_is_orthonormal() {
        let cols: Vec<[f64; 3]> = (0..3)
            .map(|k| {
                let mut e = [0.0; 3];
                e[k] = 1.0;
                let (ab, g) = clarke(e);
                [ab.x, ab.y, g]
            })
            .collect();
        for i in 0..3 {
            for j in 0..3 {
                let d: f64 = (0..3).map(|r| cols[i][r] * cols[j][r]).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(d, expect, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn rotate_examples() {
        let v = rotate(0.0, PlanarVec::G1);
        assert_eq!(v, PlanarVec::G1);
        let v = rotate(FRAC_PI_2, PlanarVec::G1);
        assert_abs_diff_eq!(v.x, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(v.y, 1.0, epsilon = 1e-15);
        assert_eq!(Rotation::quarter_turn().apply(PlanarVec::new(2.0, 3.0)), rotate(FRAC_PI_2, PlanarVec::new(2.0, 3.0)));
    }

    #[test]
    fn power_examples() {
        assert_eq!(instantaneous_power(PlanarVec::G1, PlanarVec::G1), (1.0, 0.0));
        // Q = vᵀ J i: a current lagging the voltage by π/2 carries +1 var
        assert_eq!(instantaneous_power(PlanarVec::G1, PlanarVec::new(0.0, -1.0)), (0.0, 1.0));
        assert_eq!(instantaneous_power(PlanarVec::G1, PlanarVec::new(0.0, 1.0)), (0.0, -1.0));
    }

    #[test]
    fn circular_sat_examples() {
        assert_eq!(circular_sat(PlanarVec::new(0.3, 0.4), 1.0), PlanarVec::new(0.3, 0.4));
        let s = circular_sat(PlanarVec::new(3.0, 4.0), 1.0);
        assert_abs_diff_eq!(s.x, 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(s.y, 0.8, epsilon = 1e-15);
        assert_eq!(circular_sat(PlanarVec::ZERO, 0.0), PlanarVec::ZERO);
    }

    #[test]
    fn scalar_sat_examples() {
        assert_eq!(scalar_sat(0.5, 1.0), (0.5, false));
        assert_eq!(scalar_sat(-3.0, 1.0), (-1.0, true));
        assert_eq!(scalar_sat(1.0, 0.0), (0.0, true));
    }

    #[test]
    fn impedance_inverse() {
        let z = ComplexImpedance::new(0.01, 0.28);
        let v = PlanarVec::new(3.0, -7.0);
        let back = z.apply(z.solve(v).unwrap());
        assert_abs_diff_eq!(back.x, v.x, epsilon = 1e-12);
        assert_abs_diff_eq!(back.y, v.y, epsilon = 1e-12);
        assert!(ComplexImpedance::new(0.0, 0.0).solve(v).is_none());
    }

    #[test]
    fn wrap_angle_range() {
        assert_abs_diff_eq!(wrap_angle(3.0 * PI), PI, epsilon = 1e-12);
        assert_abs_diff_eq!(wrap_angle(-0.5), -0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(wrap_angle(7.0), 7.0 - 2.0 * PI, epsilon = 1e-12);
    }

    fn vec_strategy() -> impl Strategy<Value = PlanarVec> {
        (-1e3..1e3f64, -1e3..1e3f64).prop_map(|(x, y)| PlanarVec::new(x, y))
    }

    proptest! {
        #[test]
        fn clarke_preserves_norm(a in -1e3..1e3f64, b in -1e3..1e3f64, c in -1e3..1e3f64) {
            let (ab, g) = clarke([a, b, c]);
            let lhs = (a * a + b * b + c * c).sqrt();
            let rhs = (ab.norm_sq() + g * g).sqrt();
            prop_assert!((lhs - rhs).abs() <= 1e-12 * lhs.max(1.0));
            let back = inverse_clarke(ab, g);
            prop_assert!((back[0] - a).abs() < 1e-9 && (back[1] - b).abs() < 1e-9 && (back[2] - c).abs() < 1e-9);
        }

        #[test]
        fn rotation_group(a in -10.0..10.0f64, b in -10.0..10.0f64, v in vec_strategy()) {
            let lhs = rotate(a, rotate(b, v));
            let rhs = Rotation::new(b).then(Rotation::new(a)).apply(v);
            prop_assert!((lhs - rhs).norm() <= 1e-12 * v.norm().max(1.0));
            prop_assert!((rotate(a, v).norm() - v.norm()).abs() <= 1e-12 * v.norm().max(1.0));
            let back = Rotation::new(a).inverse().apply(rotate(a, v));
            prop_assert!((back - v).norm() <= 1e-12 * v.norm().max(1.0));
        }

        #[test]
        fn power_is_frame_invariant(th in -10.0..10.0f64, v in vec_strategy(), i in vec_strategy()) {
            let (p, q) = instantaneous_power(v, i);
            let (p2, q2) = instantaneous_power(rotate(th, v), rotate(th, i));
            let scale = v.norm() * i.norm() + 1.0;
            prop_assert!((p - p2).abs() <= 1e-12 * scale);
            prop_assert!((q - q2).abs() <= 1e-12 * scale);
        }

        #[test]
        fn circular_sat_properties(v in vec_strategy(), r in 0.0..2e3f64) {
            let s = circular_sat(v, r);
            prop_assert!(s.norm() <= r.min(v.norm()) + 1e-12 * r.max(1.0));
            prop_assert!(s.norm() <= r || s == v);
            prop_assert_eq!(circular_sat(s, r), s);
            if v.norm() > 0.0 && s.norm() > 0.0 {
                prop_assert!((v.angle() - s.angle()).abs() < 1e-12);
            }
        }
    }
}
