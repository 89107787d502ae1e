//! Synchronous-machine matching controller.
//!
//! The modulation `m = e^γ R_θ g₁` turns at the matching frequency `η v_dc`,
//! so the DC link plays the role of a rotor. A gradient branch on `(γ, θ)`
//! steers the current towards a set-point through the steady-state map
//! `î(γ, θ) = −Z⁻¹ (v_dc,ref e^γ R_θ g₁ − v_g)`, with the measured current
//! standing in for `î` inside the gradient.

use serde::{Deserialize, Serialize};

use crate::frames::{circular_sat, rotate, ComplexImpedance, PlanarVec};

/// `ln(1/√2)`, the upper bound of the log-magnitude integrator.
pub const GAMMA_MAX: f64 = -0.5 * std::f64::consts::LN_2;

/// `ln(10⁻³)`, lower bound of the log-magnitude integrator. Keeps the
/// `e^{−2γ}` gain finite when the modulation collapses.
pub const GAMMA_MIN: f64 = -6.907_755_278_982_137;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchingParams {
    /// Tracking gain.
    pub k_f: f64,
    /// Scale the gain by `e^{−2γ}` like the PLL gain.
    #[serde(default = "default_true")]
    pub state_dependent_gain: bool,
    /// Virtual impedance added to the converter impedance in the map.
    pub z_virtual: ComplexImpedance,
    /// Also add `Z_v (i − i*) / v_dc,ref` to the modulation, so the
    /// converter shows `Z_v` as a real output impedance.
    #[serde(default = "default_true")]
    pub impedance_feedback: bool,
}

impl Default for MatchingParams {
    fn default() -> Self {
        Self {
            k_f: 7.54e-3,
            state_dependent_gain: true,
            z_virtual: ComplexImpedance::from_rl(0.8, 1e-3, std::f64::consts::TAU * 50.0),
            impedance_feedback: true,
        }
    }
}

fn default_true() -> bool {
    true
}

impl MatchingParams {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.k_f > 0.0 && self.k_f.is_finite()) {
            return Err(format!("matching.k_f must be positive, got {}", self.k_f));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchingState {
    pub gamma_r: f64,
    /// Unwrapped modulation angle, rad.
    pub theta: f64,
}

impl MatchingState {
    /// State whose open-circuit converter voltage equals `v_g`.
    pub fn from_voltage(v_g: PlanarVec, vdc_ref: f64) -> Self {
        Self::from_modulation(v_g * (1.0 / vdc_ref))
    }

    pub fn from_modulation(m: PlanarVec) -> Self {
        let gamma = if m.norm() > 0.0 { m.norm().ln() } else { GAMMA_MAX };
        Self { gamma_r: gamma.clamp(GAMMA_MIN, GAMMA_MAX), theta: m.angle() }
    }

    pub fn modulation(&self) -> PlanarVec {
        PlanarVec::from_polar(self.gamma_r.exp(), self.theta)
    }
}

/// Steady-state current induced by `(γ_r, θ)` through the impedance `z`.
pub fn steady_state_current(gamma_r: f64, theta: f64, v_g: PlanarVec, z: ComplexImpedance, eta: f64, omega0: f64) -> PlanarVec {
    let e = PlanarVec::from_polar(gamma_r.exp() * omega0 / eta, theta) - v_g;
    -z.solve(e).expect("effective impedance must be invertible")
}

/// Columns `(∂î/∂γ_r, ∂î/∂θ)` of the steady-state map's Jacobian.
pub fn matching_gradients(gamma_r: f64, theta: f64, z: ComplexImpedance, eta: f64, omega0: f64) -> (PlanarVec, PlanarVec) {
    let d_gamma = -z.solve(PlanarVec::from_polar(gamma_r.exp() * omega0 / eta, theta)).expect("effective impedance must be invertible");
    (d_gamma, d_gamma.perp())
}

/// Everything the step needs besides the measured signals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchingModel {
    pub k_f: f64,
    pub state_dependent_gain: bool,
    pub lg: f64,
    /// Converter plus virtual impedance.
    pub z_eff: ComplexImpedance,
    /// Virtual impedance used by the optional output feedback.
    pub z_feedback: Option<ComplexImpedance>,
    pub eta: f64,
    pub omega0: f64,
}

impl MatchingModel {
    pub fn new(params: &MatchingParams, lg: f64, z_converter: ComplexImpedance, eta: f64, omega0: f64) -> Self {
        Self {
            k_f: params.k_f,
            state_dependent_gain: params.state_dependent_gain,
            lg,
            z_eff: z_converter + params.z_virtual,
            z_feedback: params.impedance_feedback.then_some(params.z_virtual),
            eta,
            omega0,
        }
    }

    pub fn vdc_ref(&self) -> f64 {
        self.omega0 / self.eta
    }
}

/// Rates `(γ̇_r, θ̇)`; `θ̇` minus the returned gradient term is `η v_dc`.
pub fn matching_rates(st: &MatchingState, i_g: PlanarVec, i_star: PlanarVec, v_dc: f64, model: &MatchingModel) -> (f64, f64, f64) {
    let (d_gamma, d_theta) = matching_gradients(st.gamma_r, st.theta, model.z_eff, model.eta, model.omega0);
    let k = if model.state_dependent_gain { model.k_f * (-2.0 * st.gamma_r).exp() } else { model.k_f };
    let err = (i_g - i_star) * model.lg;
    let sync = -k * d_theta.dot(err);
    (-k * d_gamma.dot(err), sync + model.eta * v_dc, sync)
}

/// Forward-Euler step. The output modulation is taken from the state at
/// the start of the step and is at most `1/√2` in magnitude.
pub fn matching_step(st: &MatchingState, i_g: PlanarVec, i_star: PlanarVec, v_dc: f64, model: &MatchingModel, dt: f64) -> (PlanarVec, MatchingState) {
    let mut m = st.modulation();
    if let Some(z_v) = model.z_feedback {
        m = circular_sat(m + z_v.apply(i_g - i_star) * (1.0 / model.vdc_ref()), crate::cascade::MODULATION_LIMIT);
    }
    let (gamma_rate, theta_rate, _) = matching_rates(st, i_g, i_star, v_dc, model);
    let next = MatchingState { gamma_r: (st.gamma_r + gamma_rate * dt).clamp(GAMMA_MIN, GAMMA_MAX), theta: st.theta + theta_rate * dt };
    (m, next)
}

/// `P* = τ_m w₁`.
pub fn matching_power_reference(tau_m: f64, w1: f64) -> f64 {
    tau_m * w1
}

/// `½ (i − i*)ᵀ L (i − i*)` with the measured current.
pub fn synchronization_energy(i_g: PlanarVec, i_star: PlanarVec, lg: f64) -> f64 {
    0.5 * lg * (i_g - i_star).norm_sq()
}

/// Angle of the modulation phasor in the frame turning at `ω0 t`.
pub fn relative_angle(st: &MatchingState, omega0: f64, t: f64) -> f64 {
    rotate(-omega0 * t, st.modulation()).angle()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::TAU;

    const OMEGA0: f64 = TAU * 50.0;
    const VDC: f64 = 5_000.0;
    const ETA: f64 = OMEGA0 / VDC;

    fn z_eff() -> ComplexImpedance {
        ComplexImpedance::from_rl(0.01, 9e-4, OMEGA0) + ComplexImpedance::from_rl(0.8, 1e-3, OMEGA0)
    }

    fn model() -> MatchingModel {
        MatchingModel::new(&MatchingParams::default(), 9e-4, ComplexImpedance::from_rl(0.01, 9e-4, OMEGA0), ETA, OMEGA0)
    }

    #[test]
    fn steady_state_examples() {
        let st = MatchingState { gamma_r: -0.9, theta: 0.4 };
        let v_g = st.modulation() * VDC;
        let i = steady_state_current(st.gamma_r, st.theta, v_g, z_eff(), ETA, OMEGA0);
        assert!(i.norm() < 1e-9);

        let i = steady_state_current(0.0, 0.0, PlanarVec::ZERO, ComplexImpedance::new(1.0, 0.0), ETA, OMEGA0);
        assert_relative_eq!(i.x, -VDC, max_relative = 1e-12);
        assert!(i.y.abs() < 1e-9);

        let v_g = PlanarVec::new(1_000.0, -500.0);
        let offset = z_eff().solve(v_g).unwrap();
        let a = steady_state_current(-1.0, 0.3, v_g, z_eff(), ETA, OMEGA0) - offset;
        let b = steady_state_current(-1.0 + 2f64.ln(), 0.3, v_g, z_eff(), ETA, OMEGA0) - offset;
        assert!((b - a * 2.0).norm() < 1e-9 * b.norm());
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = 1e-6;
        for _ in 0..100 {
            let gamma = rng.gen_range(-3.0..GAMMA_MAX);
            let theta = rng.gen_range(-4.0..4.0);
            let v_g = PlanarVec::new(rng.gen_range(-3e3..3e3), rng.gen_range(-3e3..3e3));
            let z = ComplexImpedance::new(rng.gen_range(0.01..2.0), rng.gen_range(-1.0..1.0));
            let (d_gamma, d_theta) = matching_gradients(gamma, theta, z, ETA, OMEGA0);
            let f = |g: f64, t: f64| steady_state_current(g, t, v_g, z, ETA, OMEGA0);
            let fd_gamma = (f(gamma + h, theta) - f(gamma - h, theta)) * (0.5 / h);
            let fd_theta = (f(gamma, theta + h) - f(gamma, theta - h)) * (0.5 / h);
            assert!((d_gamma - fd_gamma).norm() / d_gamma.norm() < 1e-6);
            assert!((d_theta - fd_theta).norm() / d_theta.norm() < 1e-6);
        }
    }

    #[test]
    fn gradient_structure() {
        let (dg, dt) = matching_gradients(-0.8, 1.1, z_eff(), ETA, OMEGA0);
        assert_eq!(dt, dg.perp());
        assert_eq!(dg.dot(dt), 0.0);
        let (dg2, dt2) = matching_gradients(-0.8 + 2f64.ln(), 1.1, z_eff(), ETA, OMEGA0);
        assert!((dg2 - dg * 2.0).norm() < 1e-12 * dg2.norm());
        assert!((dt2 - dt * 2.0).norm() < 1e-12 * dt2.norm());
    }

    #[test]
    fn zero_error_advances_at_matching_frequency() {
        let m = model();
        let st = MatchingState { gamma_r: -1.0, theta: 0.2 };
        let i = PlanarVec::new(100.0, 40.0);
        let (out, next) = matching_step(&st, i, i, 5_100.0, &m, 1e-4);
        assert_eq!(out, st.modulation());
        assert_eq!(next.gamma_r, st.gamma_r);
        assert_relative_eq!(next.theta - st.theta, ETA * 5_100.0 * 1e-4, max_relative = 1e-12);
        let (_, next) = matching_step(&st, i, i, VDC, &m, 1e-4);
        assert_relative_eq!((next.theta - st.theta) / 1e-4, OMEGA0, max_relative = 1e-12);
    }

    #[test]
    fn frequency_matching_identity() {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let st = MatchingState { gamma_r: rng.gen_range(-2.0..GAMMA_MAX), theta: rng.gen_range(-3.0..3.0) };
            let i = PlanarVec::new(rng.gen_range(-3e3..3e3), rng.gen_range(-3e3..3e3));
            let v_dc = rng.gen_range(4e3..6e3);
            let (_, theta_rate, sync) = matching_rates(&st, i, PlanarVec::ZERO, v_dc, &m);
            assert_relative_eq!(theta_rate - sync, ETA * v_dc, max_relative = 1e-12);
        }
    }

    #[test]
    fn equilibrium_has_zero_gradient() {
        let m = model();
        let st = MatchingState { gamma_r: -0.75, theta: 0.9 };
        let v_g = PlanarVec::from_polar(2_400.0, 0.8);
        let i_hat = steady_state_current(st.gamma_r, st.theta, v_g, m.z_eff, ETA, OMEGA0);
        let (g, _, sync) = matching_rates(&st, i_hat, i_hat, VDC, &m);
        assert_eq!(g, 0.0);
        assert_eq!(sync, 0.0);
        assert_eq!(synchronization_energy(i_hat, i_hat, 9e-4), 0.0);
    }

    #[test]
    fn gamma_is_clamped() {
        let m = model();
        let mut st = MatchingState { gamma_r: GAMMA_MAX - 1e-3, theta: 0.0 };
        for _ in 0..1_000 {
            // a current error that keeps asking for more magnitude
            let (d_gamma, _) = matching_gradients(st.gamma_r, st.theta, m.z_eff, ETA, OMEGA0);
            let (out, next) = matching_step(&st, -d_gamma, PlanarVec::ZERO, VDC, &m, 1e-4);
            assert!(out.norm() <= crate::cascade::MODULATION_LIMIT + 1e-15);
            assert!(next.gamma_r <= GAMMA_MAX);
            st = next;
        }
        assert_eq!(st.gamma_r, GAMMA_MAX);

        let mut st = MatchingState { gamma_r: GAMMA_MIN + 1e-3, theta: 0.0 };
        for _ in 0..1_000 {
            let (d_gamma, _) = matching_gradients(st.gamma_r, st.theta, m.z_eff, ETA, OMEGA0);
            let (_, next) = matching_step(&st, d_gamma * 1e3, PlanarVec::ZERO, VDC, &m, 1e-4);
            assert!(next.gamma_r >= GAMMA_MIN && next.theta.is_finite());
            st = next;
        }
        assert_eq!(st.gamma_r, GAMMA_MIN);
    }

    #[test]
    fn feedback_variant_stays_limited() {
        let params = MatchingParams { impedance_feedback: true, ..MatchingParams::default() };
        let m = MatchingModel::new(&params, 9e-4, ComplexImpedance::from_rl(0.01, 9e-4, OMEGA0), ETA, OMEGA0);
        let st = MatchingState { gamma_r: GAMMA_MAX, theta: 0.0 };
        let (out, _) = matching_step(&st, PlanarVec::new(9e3, 0.0), PlanarVec::ZERO, VDC, &m, 1e-4);
        assert!(out.norm() <= crate::cascade::MODULATION_LIMIT);
    }

    #[test]
    fn power_reference_examples() {
        assert_eq!(matching_power_reference(0.0, 60.0), 0.0);
        let w_nom = TAU * 10.0;
        let p_nom = 5.86e6;
        assert_relative_eq!(matching_power_reference(p_nom / w_nom, w_nom), p_nom, max_relative = 1e-15);
        let p = matching_power_reference(-0.5 * p_nom / w_nom, w_nom);
        assert!((p + 2.93e6).abs() < 0.01e6);
    }

    #[test]
    fn init_from_voltage() {
        let v = PlanarVec::from_polar(2_400.0, 1.2);
        let st = MatchingState::from_voltage(v, VDC);
        assert!((st.modulation() * VDC - v).norm() < 1e-9);
        let st = MatchingState::from_voltage(PlanarVec::new(9_000.0, 0.0), VDC);
        assert_eq!(st.gamma_r, GAMMA_MAX);
    }
}
