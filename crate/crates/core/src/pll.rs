//! Gradient-descent PLL.
//!
//! The PLL output `v_pll = e^γ R_θ g₁` descends the energy
//! `U = ½‖v_pll − v_g‖²` in log-magnitude and angle:
//!
//! ```text
//! γ̇ = −K ∂U/∂γ,        ∂U/∂γ = v_pllᵀ (v_pll − v_g)
//! θ̇ = −K ∂U/∂θ + ω_ff,  ∂U/∂θ = (J v_pll)ᵀ (v_pll − v_g)
//! ```
//!
//! With `K = κ e^{−2γ}` the cartesian form is `v̇ = (ν I + ω J) v`, which is
//! stepped with the implicit midpoint rule. The rotation part of the
//! generator is pre-warped so that a step with `ν = 0` is an exact rotation
//! by `ω·dt`; that keeps the reported frequency equal to the rate at which
//! the discrete output actually turns.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::frames::PlanarVec;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PllParams {
    /// Orthonormalising gain, `K_pll = κ / ‖v_pll‖²`.
    pub kappa: f64,
    /// Use `η v_dc` instead of `ω0` as the frequency feed-forward.
    #[serde(default)]
    pub dc_coupled: bool,
    /// Below this fraction of the nominal voltage the PLL free-runs at its
    /// feed-forward frequency instead of chasing the residual.
    #[serde(default = "default_hold")]
    pub hold_below: f64,
}

fn default_hold() -> f64 {
    0.5
}

impl Default for PllParams {
    fn default() -> Self {
        Self { kappa: 63.0, dc_coupled: false, hold_below: default_hold() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PllState {
    pub v_pll: PlanarVec,
    /// rad/s, from the last step.
    pub omega_pll: f64,
    /// Accumulated (unwrapped) angle, rad.
    pub theta_pll: f64,
}

impl PllState {
    /// Start on the measured voltage when it is usable, otherwise on the
    /// nominal phasor.
    pub fn init(v_g: PlanarVec, nominal: PlanarVec, v_eps: f64, omega0: f64) -> Self {
        let v_pll = if v_g.norm() > v_eps { v_g } else { nominal };
        Self { v_pll, omega_pll: omega0, theta_pll: v_pll.angle() }
    }

    pub fn gamma(&self) -> f64 {
        self.v_pll.norm().ln()
    }
}

/// `(∂U/∂γ, ∂U/∂θ)` at the cartesian point `v_pll`.
pub fn pll_gradient(v_pll: PlanarVec, v_g: PlanarVec) -> (f64, f64) {
    let e = v_pll - v_g;
    (v_pll.dot(e), v_pll.perp().dot(e))
}

/// `U = ½‖v_pll − v_g‖²`.
pub fn pll_energy(v_pll: PlanarVec, v_g: PlanarVec) -> f64 {
    0.5 * (v_pll - v_g).norm_sq()
}

/// Generator `(ν, ω)` of the cartesian flow at `v_pll`.
pub fn pll_rates(v_pll: PlanarVec, v_g: PlanarVec, kappa: f64, omega_ff: f64) -> (f64, f64) {
    let k = kappa / v_pll.norm_sq();
    let (g_gamma, g_theta) = pll_gradient(v_pll, v_g);
    (-k * g_gamma, omega_ff - k * g_theta)
}

/// One midpoint step of `v̇ = (ν I + ω J) v` with `(ν, ω)` frozen over the
/// step. `ω` is pre-warped as `(2/dt) tan(ω dt / 2)`.
pub fn midpoint_rotate(v: PlanarVec, nu: f64, omega: f64, dt: f64) -> PlanarVec {
    let warped = 2.0 / dt * (0.5 * omega * dt).tan();
    let a = Complex64::new(nu, warped) * (0.5 * dt);
    let z = Complex64::new(v.x, v.y) * (Complex64::new(1.0, 0.0) + a) / (Complex64::new(1.0, 0.0) - a);
    PlanarVec::new(z.re, z.im)
}

pub fn pll_step_cartesian(st: &PllState, v_g: PlanarVec, kappa: f64, omega_ff: f64, dt: f64) -> PllState {
    debug_assert!(dt > 0.0 && st.v_pll.norm_sq() > 0.0);
    let (nu, omega) = pll_rates(st.v_pll, v_g, kappa, omega_ff);
    PllState { v_pll: midpoint_rotate(st.v_pll, nu, omega, dt), omega_pll: omega, theta_pll: st.theta_pll + omega * dt }
}

/// Explicit Euler on the polar form; a cross-check for the cartesian step.
pub fn pll_step_polar(gamma: f64, theta: f64, v_g: PlanarVec, kappa: f64, omega0: f64, dt: f64) -> (f64, f64) {
    let v_pll = PlanarVec::from_polar(gamma.exp(), theta);
    let k = kappa * (-2.0 * gamma).exp();
    let (g_gamma, g_theta) = pll_gradient(v_pll, v_g);
    (gamma - dt * k * g_gamma, theta + dt * (omega0 - k * g_theta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frames::rotate;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::TAU;

    const OMEGA0: f64 = TAU * 50.0;
    const DT: f64 = 1e-4;

    fn energy_polar(gamma: f64, theta: f64, v_g: PlanarVec) -> f64 {
        pll_energy(PlanarVec::from_polar(gamma.exp(), theta), v_g)
    }

    #[test]
    fn gradient_examples() {
        let v = PlanarVec::new(0.3, -1.2);
        assert_eq!(pll_gradient(v, v), (0.0, 0.0));
        // g_γ = [1,0]·([1,0] − [2,0]) = −1, g_θ = [0,1]·[−1,0] = 0
        assert_eq!(pll_gradient(PlanarVec::G1, PlanarVec::new(2.0, 0.0)), (-1.0, 0.0));
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = 1e-6;
        for _ in 0..100 {
            let gamma: f64 = rng.gen_range(-1.0..1.0);
            let theta = rng.gen_range(-3.0..3.0);
            let v_g = PlanarVec::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
            let (g_gamma, g_theta) = pll_gradient(PlanarVec::from_polar(gamma.exp(), theta), v_g);
            let fd_gamma = (energy_polar(gamma + h, theta, v_g) - energy_polar(gamma - h, theta, v_g)) / (2.0 * h);
            let fd_theta = (energy_polar(gamma, theta + h, v_g) - energy_polar(gamma, theta - h, v_g)) / (2.0 * h);
            let scale = 1.0 + g_gamma.abs().max(g_theta.abs());
            assert!((g_gamma - fd_gamma).abs() / scale < 1e-6);
            assert!((g_theta - fd_theta).abs() / scale < 1e-6);
        }
    }

    #[test]
    fn locked_step_is_pure_nominal_rotation() {
        let v = PlanarVec::from_polar(2400.0, 0.3);
        let st = PllState { v_pll: v, omega_pll: OMEGA0, theta_pll: 0.3 };
        let next = pll_step_cartesian(&st, v, 63.0, OMEGA0, DT);
        let expect = rotate(OMEGA0 * DT, v);
        assert!((next.v_pll - expect).norm() <= 1e-12 * v.norm());
        assert!((next.v_pll.norm() - v.norm()).abs() <= 1e-12 * v.norm());
        assert_eq!(next.omega_pll, OMEGA0);
    }

    #[test]
    fn midpoint_preserves_norm_without_radial_rate() {
        let mut v = PlanarVec::new(1.0, 2.0);
        let n0 = v.norm();
        for k in 0..1000 {
            let prev = v.norm();
            v = midpoint_rotate(v, 0.0, OMEGA0 + k as f64, DT);
            assert!((v.norm() - prev).abs() <= 1e-12 * n0);
        }
    }

    #[test]
    fn locks_onto_a_static_target() {
        // target rotating at exactly ω0 is static in the nominal frame
        let target = PlanarVec::from_polar(1.0, 2.0);
        let mut st = PllState { v_pll: PlanarVec::G1, omega_pll: OMEGA0, theta_pll: 0.0 };
        let mut prev = f64::INFINITY;
        for k in 0..20_000 {
            let t = k as f64 * DT;
            let v_g = rotate(OMEGA0 * t, target);
            let u = pll_energy(st.v_pll, v_g);
            assert!(u <= prev + 1e-15, "energy increased at step {k}");
            prev = u;
            st = pll_step_cartesian(&st, v_g, 63.0, OMEGA0, DT);
        }
        let v_g = rotate(OMEGA0 * 20_000.0 * DT, target);
        assert!(pll_energy(st.v_pll, v_g) < 1e-10);
    }

    #[test]
    fn tracks_a_frequency_offset() {
        let omega_g = OMEGA0 + TAU;
        let mut st = PllState { v_pll: PlanarVec::G1, omega_pll: OMEGA0, theta_pll: 0.0 };
        for k in 0..50_000 {
            let v_g = PlanarVec::from_angle(omega_g * k as f64 * DT);
            st = pll_step_cartesian(&st, v_g, 63.0, OMEGA0, DT);
        }
        assert!((st.omega_pll - omega_g).abs() < 1e-3, "ω_pll = {}", st.omega_pll);
    }

    #[test]
    fn polar_locked_step() {
        let (gamma, theta): (f64, f64) = (0.4, -1.1);
        let v_g = PlanarVec::from_polar(gamma.exp(), theta);
        let (g2, t2) = pll_step_polar(gamma, theta, v_g, 63.0, OMEGA0, DT);
        assert_abs_diff_eq!(g2, gamma, epsilon = 1e-15);
        assert_abs_diff_eq!(t2, theta + OMEGA0 * DT, epsilon = 1e-12);
    }

    #[test]
    fn polar_magnitude_descends() {
        let (mut gamma, mut theta) = (2f64.ln(), 0.0);
        for k in 0..5_000 {
            let v_g = PlanarVec::from_angle(OMEGA0 * k as f64 * DT);
            let (g, t) = pll_step_polar(gamma, theta, v_g, 63.0, OMEGA0, DT);
            assert!(g <= gamma + 1e-15);
            gamma = g;
            theta = t;
        }
        assert!(gamma.abs() < 1e-6);
    }

    #[test]
    fn polar_and_cartesian_agree_to_second_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for dt in [1e-3, 5e-4] {
            let mut worst: f64 = 0.0;
            for _ in 0..50 {
                let gamma: f64 = rng.gen_range(-0.5..0.5);
                let theta = rng.gen_range(-3.0..3.0);
                let v_g = PlanarVec::new(rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5));
                let v = PlanarVec::from_polar(gamma.exp(), theta);
                let cart = pll_step_cartesian(&PllState { v_pll: v, omega_pll: OMEGA0, theta_pll: theta }, v_g, 63.0, OMEGA0, dt);
                let (g, t) = pll_step_polar(gamma, theta, v_g, 63.0, OMEGA0, dt);
                worst = worst.max((cart.v_pll - PlanarVec::from_polar(g.exp(), t)).norm());
            }
            // local discrepancy bounded by C·dt² with C from the generator size
            let c = (OMEGA0 + 63.0 * 10.0).powi(2);
            assert!(worst < c * dt * dt, "dt {dt}: {worst}");
        }
    }

    #[test]
    fn rotational_equivariance() {
        let phi = 0.77;
        let mut a = PllState { v_pll: PlanarVec::new(1.0, 0.2), omega_pll: OMEGA0, theta_pll: 0.0 };
        let mut b = PllState { v_pll: rotate(phi, a.v_pll), ..a };
        for k in 0..2_000 {
            let v_g = PlanarVec::from_polar(1.3, OMEGA0 * 1.01 * k as f64 * DT);
            a = pll_step_cartesian(&a, v_g, 63.0, OMEGA0, DT);
            b = pll_step_cartesian(&b, rotate(phi, v_g), 63.0, OMEGA0, DT);
            assert!((rotate(phi, a.v_pll) - b.v_pll).norm() < 1e-12);
            assert_abs_diff_eq!(a.omega_pll, b.omega_pll, epsilon = 1e-9);
        }
    }

    #[test]
    fn init_falls_back_to_nominal() {
        let nominal = PlanarVec::new(2400.0, 0.0);
        let st = PllState::init(PlanarVec::new(1.0, 0.0), nominal, 24.0, OMEGA0);
        assert_eq!(st.v_pll, nominal);
        let st = PllState::init(PlanarVec::new(0.0, 2000.0), nominal, 24.0, OMEGA0);
        assert_eq!(st.v_pll, PlanarVec::new(0.0, 2000.0));
        assert_abs_diff_eq!(st.gamma(), 2000f64.ln(), epsilon = 1e-12);
    }
}
