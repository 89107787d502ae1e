//! Cascaded-PI grid-side stack and the speed-coupling controller.
//!
//! The speed regulator tracks `w_dc = (w_ref / v_dc,ref) v_dc` instead of a
//! fixed speed, which ties the shaft to the DC link like an extra mass. The
//! grid side then regulates `v_dc` towards `ω_pll / η`, shapes a current
//! reference from `(P*, Q*)` through a circular limiter, and tracks it with
//! a PI whose integral acts in the PLL-synchronous dq frame.

use serde::{Deserialize, Serialize};

use crate::frames::{circular_sat, rotate, scalar_sat, ComplexImpedance, PlanarVec};

/// `1/√2`, the αβ modulation bound with third-harmonic injection.
pub const MODULATION_LIMIT: f64 = std::f64::consts::FRAC_1_SQRT_2;

/// Scalar integrator memory with a conditional-integration flag.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PiState {
    pub integ: f64,
    pub saturated: bool,
}

/// dq-frame integrator of the current controller.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct VecPiState {
    pub integ: PlanarVec,
    pub saturated: bool,
}

/// Discrete PI with output `u = sat(scale · (−kp e − ki x), lim)`.
///
/// The integrator is frozen while the output is clamped and the error
/// would push it further out.
pub fn pi_step(st: &PiState, error: f64, kp: f64, ki: f64, scale: f64, lim: f64, dt: f64) -> (f64, PiState) {
    let raw = scale * (-kp * error - ki * st.integ);
    let (u, saturated) = scalar_sat(raw, lim);
    // integrating e moves the output by −ki·scale·e·dt
    let outward = saturated && (-error * scale) * raw > 0.0;
    let integ = if outward { st.integ } else { st.integ + error * dt };
    (u, PiState { integ, saturated })
}

/// Notch applied to the measured shaft speed before the coupling error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NotchSpec {
    /// Centre frequency, Hz.
    pub f0: f64,
    /// Residual gain at `f0` (0 = full notch).
    pub depth: f64,
    /// −3 dB width of the pole pair, Hz.
    pub width: f64,
}

/// Tustin-discretised `(s² + 2ζ_z ω s + ω²) / (s² + 2ζ_p ω s + ω²)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NotchFilter {
    b: [f64; 3],
    a: [f64; 2],
    x: [f64; 2],
    y: [f64; 2],
}

impl NotchFilter {
    pub fn new(spec: &NotchSpec, dt: f64) -> Self {
        let w0 = std::f64::consts::TAU * spec.f0;
        let zeta_p = spec.width / (2.0 * spec.f0);
        let zeta_z = spec.depth * zeta_p;
        // pre-warp so the notch lands exactly on f0
        let k = w0 / (0.5 * w0 * dt).tan();
        let w2 = w0 * w0;
        let a0 = k * k + 2.0 * zeta_p * w0 * k + w2;
        let b = [(k * k + 2.0 * zeta_z * w0 * k + w2) / a0, (2.0 * w2 - 2.0 * k * k) / a0, (k * k - 2.0 * zeta_z * w0 * k + w2) / a0];
        let a = [(2.0 * w2 - 2.0 * k * k) / a0, (k * k - 2.0 * zeta_p * w0 * k + w2) / a0];
        Self { b, a, x: [0.0; 2], y: [0.0; 2] }
    }

    /// Start from a steady input so the filter does not ring on start-up.
    pub fn prime(&mut self, value: f64) {
        self.x = [value; 2];
        self.y = [value; 2];
    }

    pub fn filter(&mut self, u: f64) -> f64 {
        let y = self.b[0] * u + self.b[1] * self.x[0] + self.b[2] * self.x[1] - self.a[0] * self.y[0] - self.a[1] * self.y[1];
        self.x = [u, self.x[0]];
        self.y = [y, self.y[0]];
        y
    }
}

/// Loop tuning. Proportional and integral gains follow from the
/// damping/bandwidth pairs and the physical quantity each loop acts on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadeGains {
    pub zeta_m: f64,
    /// Speed-coupling bandwidth, rad/s.
    pub omega_m: f64,
    pub zeta_dc: f64,
    /// DC-link bandwidth, rad/s.
    pub omega_dc: f64,
    pub zeta_g: f64,
    /// Current-loop bandwidth, rad/s.
    pub omega_g: f64,
    /// AC-voltage gain, var/V².
    pub kp_v: f64,
    pub z_virtual: ComplexImpedance,
    /// Apply the virtual impedance to the tracking error `i − i*` instead of
    /// the reference alone.
    #[serde(default = "default_true")]
    pub impedance_feedback: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub notch: Option<NotchSpec>,
    #[serde(default)]
    pub projection: Projection,
}

fn default_true() -> bool {
    true
}

impl Default for CascadeGains {
    fn default() -> Self {
        let omega0 = std::f64::consts::TAU * 50.0;
        Self {
            zeta_m: 1.0,
            omega_m: std::f64::consts::TAU * 0.5,
            zeta_dc: 1.0,
            omega_dc: std::f64::consts::TAU * 0.1,
            zeta_g: 1.0,
            omega_g: std::f64::consts::TAU * 200.0,
            kp_v: 1.0,
            z_virtual: ComplexImpedance::from_rl(0.8, 1e-3, omega0),
            impedance_feedback: true,
            notch: None,
            projection: Projection::Hard,
        }
    }
}

impl CascadeGains {
    /// `(K_p,m, K_i,m) = (2ζ_m ω_m M, ω_m² M)`.
    pub fn speed_gains(&self, m_total: f64) -> (f64, f64) {
        (2.0 * self.zeta_m * self.omega_m * m_total, self.omega_m * self.omega_m * m_total)
    }

    /// `(K_p,dc, K_i,dc) = (2ζ_dc ω_dc C_tot, ω_dc² C_tot)`.
    pub fn dc_gains(&self, c_tot: f64) -> (f64, f64) {
        (2.0 * self.zeta_dc * self.omega_dc * c_tot, self.omega_dc * self.omega_dc * c_tot)
    }

    /// `(K_p,g, K_i,g) = (2ζ_g ω_g L_g, ω_g² L_g)`.
    pub fn current_gains(&self, lg: f64) -> (f64, f64) {
        (2.0 * self.zeta_g * self.omega_g * lg, self.omega_g * self.omega_g * lg)
    }

    pub fn validate(&self) -> Result<(), String> {
        for (name, z) in [("zeta_m", self.zeta_m), ("zeta_dc", self.zeta_dc), ("zeta_g", self.zeta_g)] {
            if !(z > 0.0 && z <= 2.0) {
                return Err(format!("gains.{name} must lie in (0, 2], got {z}"));
            }
        }
        for (name, w) in [("omega_m", self.omega_m), ("omega_dc", self.omega_dc), ("omega_g", self.omega_g)] {
            if !(w > 0.0 && w.is_finite()) {
                return Err(format!("gains.{name} must be positive, got {w}"));
            }
        }
        if self.omega_g <= self.omega_dc {
            return Err(format!("current loop ({}) must be faster than the DC loop ({})", self.omega_g, self.omega_dc));
        }
        if !(self.kp_v >= 0.0) {
            return Err(format!("gains.kp_v must be non-negative, got {}", self.kp_v));
        }
        if let Some(n) = &self.notch {
            if !(n.f0 > 0.0 && n.width > 0.0 && (0.0..=1.0).contains(&n.depth)) {
                return Err("gains.notch needs f0 > 0, width > 0 and depth in [0, 1]".into());
            }
        }
        Ok(())
    }
}

/// How `Q*` is projected onto the current-feasible set.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Projection {
    /// Clamp to `±√((i_nom‖v_g‖)² − P*²)`, active power first.
    #[default]
    Hard,
    /// `q_max · tanh(Q_raw / q_max)`.
    Smooth,
}

/// Virtual resistor on the part of the current magnitude above a
/// threshold, added to the grid-side modulation voltage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurrentGuard {
    /// Onset as a fraction of `i_nom`.
    pub threshold: f64,
    /// Ω
    pub resistance: f64,
}

impl CurrentGuard {
    /// `R (‖i‖ − i_th)₊ i / ‖i‖`.
    pub fn voltage(&self, i: PlanarVec, i_nom: f64) -> PlanarVec {
        let n = i.norm();
        let excess = n - self.threshold * i_nom;
        if excess > 0.0 {
            i * (self.resistance * excess / n)
        } else {
            PlanarVec::ZERO
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.threshold > 0.0 && self.resistance >= 0.0 && self.resistance.is_finite()) {
            return Err(format!("current_guard needs threshold > 0 and resistance >= 0, got {} and {}", self.threshold, self.resistance));
        }
        Ok(())
    }
}

/// `w_dc = (w_ref / v_dc,ref) · v_dc`.
pub fn dc_as_speed(v_dc: f64, w_ref: f64, vdc_ref: f64) -> f64 {
    w_ref * (v_dc / vdc_ref)
}

/// Speed-coupling PI: `τ_m = sat(−K_p,m (w₁ − w_dc) − K_i,m x_m, τ_nom)`.
pub fn speed_coupling_step(w1: f64, w_dc: f64, st: &PiState, kp: f64, ki: f64, tau_nom: f64, dt: f64) -> (f64, PiState) {
    pi_step(st, w1 - w_dc, kp, ki, 1.0, tau_nom, dt)
}

/// Speed-coupling loop with its optional active-damping notch.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeedCoupling {
    pub pi: PiState,
    pub kp: f64,
    pub ki: f64,
    pub tau_nom: f64,
    notch: Option<NotchFilter>,
}

impl SpeedCoupling {
    pub fn new(gains: &CascadeGains, m_total: f64, tau_nom: f64, dt: f64) -> Self {
        let (kp, ki) = gains.speed_gains(m_total);
        Self { pi: PiState::default(), kp, ki, tau_nom, notch: gains.notch.as_ref().map(|n| NotchFilter::new(n, dt)) }
    }

    /// Set the integrator so that the loop outputs `tau` at zero error.
    pub fn preload(&mut self, tau: f64, w1: f64) {
        self.pi.integ = -tau / self.ki;
        if let Some(n) = &mut self.notch {
            n.prime(w1);
        }
    }

    pub fn step(&mut self, w1: f64, w_dc: f64, dt: f64) -> f64 {
        let w = match &mut self.notch {
            Some(n) => n.filter(w1),
            None => w1,
        };
        let (tau, pi) = speed_coupling_step(w, w_dc, &self.pi, self.kp, self.ki, self.tau_nom, dt);
        self.pi = pi;
        tau
    }
}

/// `v_dc* = ω_pll / η`.
pub fn dc_reference(omega_pll: f64, eta: f64) -> f64 {
    omega_pll / eta
}

/// DC-link PI: `P* = sat((−K_p,dc (v − v*) − K_i,dc x_dc) v_dc,ref, P_nom)`.
pub fn dc_voltage_step(v_dc: f64, v_dc_star: f64, st: &PiState, kp: f64, ki: f64, p_nom: f64, vdc_ref: f64, dt: f64) -> (f64, PiState) {
    pi_step(st, v_dc - v_dc_star, kp, ki, vdc_ref, p_nom, dt)
}

/// Largest `|Q|` that keeps `(P*, Q)` inside the current circle.
pub fn reactive_headroom(p_star: f64, v_norm: f64, i_nom: f64) -> f64 {
    let s = i_nom * v_norm;
    (s * s - p_star * p_star).max(0.0).sqrt()
}

/// `Q* = Π_C K_p,v (‖v_g‖² − v_g,ref²)`.
pub fn ac_voltage_step(v_g: PlanarVec, vg_ref: f64, kp_v: f64, p_star: f64, i_nom: f64, projection: Projection) -> f64 {
    let raw = kp_v * (v_g.norm_sq() - vg_ref * vg_ref);
    let q_max = reactive_headroom(p_star, v_g.norm(), i_nom);
    match projection {
        Projection::Hard => raw.clamp(-q_max, q_max),
        Projection::Smooth if q_max > 0.0 => q_max * (raw / q_max).tanh(),
        Projection::Smooth => 0.0,
    }
}

/// Current reference solving `instantaneous_power(v_g, i*) = (P*, Q*)`,
/// limited to `i_nom`. Below `v_eps` the previous reference is held.
pub fn current_reference(p_star: f64, q_star: f64, v_g: PlanarVec, i_nom: f64, v_eps: f64, previous: PlanarVec) -> PlanarVec {
    let n2 = v_g.norm_sq();
    if n2.sqrt() > v_eps {
        // [vᵀ; vᵀJ]⁻¹ = [v, Jᵀv] / ‖v‖²
        circular_sat((v_g * p_star + v_g.perp_t() * q_star) * (1.0 / n2), i_nom)
    } else {
        circular_sat(previous, i_nom)
    }
}

/// Everything the current loop needs besides its state and signals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurrentLoop {
    pub kp: f64,
    pub ki: f64,
    pub z_g: ComplexImpedance,
    pub z_v: ComplexImpedance,
    pub vdc_ref: f64,
    pub impedance_feedback: bool,
}

/// `m = sat((K_p,g (i − i*) + K_i,g R_θ x_g + v_ff − (Z_g + Z_v) i*) / v_dc,ref, 1/√2)`
/// with `ẋ_g = R_θᵀ (i − i*)`. With `impedance_feedback` the virtual term
/// reads `+Z_v (i − i*)` instead of `−Z_v i*`.
pub fn current_control_step(
    i_g: PlanarVec,
    i_star: PlanarVec,
    v_ff: PlanarVec,
    theta: f64,
    st: &VecPiState,
    lp: &CurrentLoop,
    dt: f64,
) -> (PlanarVec, VecPiState) {
    let err = i_g - i_star;
    let virt = if lp.impedance_feedback { lp.z_v.apply(err) } else { -lp.z_v.apply(i_star) };
    let feed = v_ff - lp.z_g.apply(i_star) + virt;
    let raw = (err * lp.kp + rotate(theta, st.integ) * lp.ki + feed) * (1.0 / lp.vdc_ref);
    let m = circular_sat(raw, MODULATION_LIMIT);
    let saturated = raw.norm() > MODULATION_LIMIT;
    let outward = saturated && err.dot(raw) > 0.0;
    let integ = if outward { st.integ } else { st.integ + rotate(-theta, err) * dt };
    (m, VecPiState { integ, saturated })
}
