//! Linearization of the DC link with the speed-coupling loop, frequency
//! responses, and per-run trace metrics.
//!
//! The linear model keeps the DC node, the shaft and the speed PI and drives
//! the DC node with an external current injection. The grid side enters only
//! through that injection, or through an ideal power source when the DC
//! voltage loop is closed.

use std::convert::Infallible;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use thiserror::Error;

use crate::cascade::{dc_as_speed, CascadeGains, MODULATION_LIMIT};
use crate::frames::{rotate, PlanarVec};
use crate::integrate;
use crate::plant::{derivative_unchecked, PlantInputs, PlantParams, PlantState};
use crate::simulation::{GridEvent, SimTrace};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AnalysisError {
    #[error("no equilibrium found: residual {residual:.3e} p.u. after {iterations} iterations")]
    NoEquilibrium { residual: f64, iterations: usize },
    #[error("inconsistent model dimensions: {0}")]
    Dimensions(String),
    #[error("zero computation needs a single input, a single state output and a direct path from input to output")]
    UnsupportedZeroStructure,
}

/// `ẋ = A x + B u`, `y = C x`, around `(x0, u0)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub x0: Vec<f64>,
    pub u0: Vec<f64>,
    pub state_labels: Vec<String>,
    pub input_labels: Vec<String>,
    pub output_labels: Vec<String>,
    /// Scaled derivative norm at `(x0, u0)`.
    pub residual: f64,
}

impl LinearModel {
    /// Model without an operating point; labels are generated.
    pub fn from_matrices(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>) -> Result<Self, AnalysisError> {
        let n = a.nrows();
        if a.ncols() != n || b.nrows() != n || c.ncols() != n {
            return Err(AnalysisError::Dimensions(format!(
                "A {}×{}, B {}×{}, C {}×{}",
                a.nrows(),
                a.ncols(),
                b.nrows(),
                b.ncols(),
                c.nrows(),
                c.ncols()
            )));
        }
        let (m, p) = (b.ncols(), c.nrows());
        Ok(Self {
            x0: vec![0.0; n],
            u0: vec![0.0; m],
            state_labels: (0..n).map(|k| format!("x{k}")).collect(),
            input_labels: (0..m).map(|k| format!("u{k}")).collect(),
            output_labels: (0..p).map(|k| format!("y{k}")).collect(),
            a,
            b,
            c,
            residual: 0.0,
        })
    }

    pub fn n_states(&self) -> usize {
        self.a.nrows()
    }

    /// `C (sI − A)⁻¹ B` at `s = jω`, first input to first output. `None`
    /// when `jωI − A` is singular.
    pub fn transfer(&self, omega: f64) -> Option<Complex64> {
        let n = self.n_states();
        let s = Complex64::new(0.0, omega);
        let m = DMatrix::from_fn(n, n, |r, c| {
            let a = Complex64::new(-self.a[(r, c)], 0.0);
            if r == c {
                a + s
            } else {
                a
            }
        });
        let rhs = DVector::from_fn(n, |r, _| Complex64::new(self.b[(r, 0)], 0.0));
        let x = m.lu().solve(&rhs)?;
        let y: Complex64 = (0..n).map(|k| x[k] * self.c[(0, k)]).sum();
        y.is_finite().then_some(y)
    }

    /// Zeros of the first input/output channel.
    ///
    /// Supported when `C` picks one state and `CB ≠ 0`: the zero dynamics
    /// hold that state at zero, which leaves the remaining block
    /// `A_rr − B_r A_yr / B_y`.
    pub fn transmission_zeros(&self) -> Result<Vec<Complex64>, AnalysisError> {
        let n = self.n_states();
        let row = self.c.row(0);
        let picks: Vec<usize> = (0..n).filter(|&k| row[k] != 0.0).collect();
        if self.b.ncols() != 1 || picks.len() != 1 || self.b[(picks[0], 0)] == 0.0 {
            return Err(AnalysisError::UnsupportedZeroStructure);
        }
        let y = picks[0];
        let rest: Vec<usize> = (0..n).filter(|&k| k != y).collect();
        let by = self.b[(y, 0)];
        let z = DMatrix::from_fn(rest.len(), rest.len(), |r, c| {
            let (i, j) = (rest[r], rest[c]);
            self.a[(i, j)] - self.b[(i, 0)] * self.a[(y, j)] / by
        });
        let mut zeros: Vec<Complex64> = z.complex_eigenvalues().iter().copied().collect();
        zeros.sort_by(|p, q| p.norm().total_cmp(&q.norm()));
        Ok(zeros)
    }
}

/// One point of a Bode plot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BodePoint {
    pub freq_hz: f64,
    /// `+∞` at a pole.
    pub gain_db: f64,
    pub phase_deg: f64,
}

pub fn frequency_response(model: &LinearModel, freqs_hz: &[f64]) -> Vec<BodePoint> {
    freqs_hz
        .iter()
        .map(|&f| {
            assert!(f > 0.0, "frequency must be positive, got {f}");
            match model.transfer(std::f64::consts::TAU * f) {
                Some(h) if h.norm() > 0.0 => BodePoint { freq_hz: f, gain_db: 20.0 * h.norm().log10(), phase_deg: h.arg().to_degrees() },
                Some(_) => BodePoint { freq_hz: f, gain_db: f64::NEG_INFINITY, phase_deg: 0.0 },
                None => BodePoint { freq_hz: f, gain_db: f64::INFINITY, phase_deg: f64::NAN },
            }
        })
        .collect()
}

/// `n` log-spaced frequencies from `lo` to `hi` Hz.
pub fn log_frequencies(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    assert!(lo > 0.0 && hi > lo && n >= 2);
    let (a, b) = (lo.ln(), hi.ln());
    (0..n).map(|k| (a + (b - a) * k as f64 / (n - 1) as f64).exp()).collect()
}

pub fn bode_csv(points: &[BodePoint]) -> String {
    let mut s = String::from("freq[Hz],gain[dB],phase[deg]\n");
    for p in points {
        let _ = writeln!(s, "{},{},{}", p.freq_hz, p.gain_db, p.phase_deg);
    }
    s
}

/// Which loops are closed around the DC node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearizeOptions {
    /// Speed-coupling loop closed; otherwise the motor torque is frozen.
    pub coupled: bool,
    /// DC voltage PI closed through an ideal power injection.
    pub dc_loop: bool,
    /// Load torque in p.u.
    pub load_pu: f64,
}

impl Default for LinearizeOptions {
    fn default() -> Self {
        Self { coupled: true, dc_loop: false, load_pu: 0.0 }
    }
}

/// State layout of the reduced model: `v_dc`, mass speeds, coupling
/// twists, then the speed and DC integrators when their loops are closed.
struct Layout {
    n_mass: usize,
    coupled: bool,
    dc_loop: bool,
}

impl Layout {
    fn speed(&self, k: usize) -> usize {
        1 + k
    }
    fn twist(&self, k: usize) -> usize {
        1 + self.n_mass + k
    }
    fn x_m(&self) -> usize {
        2 * self.n_mass
    }
    fn x_dc(&self) -> usize {
        2 * self.n_mass + usize::from(self.coupled)
    }
    fn len(&self) -> usize {
        2 * self.n_mass + usize::from(self.coupled) + usize::from(self.dc_loop)
    }
}

struct ReducedModel<'a> {
    plant: &'a PlantParams,
    layout: Layout,
    kp_m: f64,
    ki_m: f64,
    kp_dc: f64,
    ki_dc: f64,
    tau_l: f64,
    /// Motor torque when the speed loop is open.
    tau_frozen: f64,
    scale: Vec<f64>,
    u_scale: f64,
}

impl ReducedModel<'_> {
    fn rhs(&self, x: &[f64], u: f64) -> Vec<f64> {
        let p = self.plant;
        let l = &self.layout;
        let n = l.n_mass;
        let v = x[0];
        let k_dc = p.w_nom / p.vdc_ref;
        let w1 = x[l.speed(0)];
        let tau_m = if l.coupled { -self.kp_m * (w1 - k_dc * v) - self.ki_m * x[l.x_m()] } else { self.tau_frozen };
        let p_star = if l.dc_loop { -(self.kp_dc * (v - p.vdc_ref) + self.ki_dc * x[l.x_dc()]) * p.vdc_ref } else { 0.0 };

        let mut dx = vec![0.0; l.len()];
        dx[0] = (-p.gdc * v + u + p_star / v - tau_m * w1 / v) / p.cdc;
        let mut torque = vec![0.0; n];
        torque[0] += tau_m;
        torque[n - 1] -= self.tau_l;
        for k in 0..n - 1 {
            let c = p.shaft.couplings[k];
            let t = c.stiffness * x[l.twist(k)] + c.damping * (x[l.speed(k)] - x[l.speed(k + 1)]);
            torque[k] -= t;
            torque[k + 1] += t;
            dx[l.twist(k)] = x[l.speed(k)] - x[l.speed(k + 1)];
        }
        for k in 0..n {
            dx[l.speed(k)] = torque[k] / p.shaft.masses[k];
        }
        if l.coupled {
            dx[l.x_m()] = w1 - k_dc * v;
        }
        if l.dc_loop {
            dx[l.x_dc()] = v - p.vdc_ref;
        }
        dx
    }

    fn scaled_residual(&self, x: &[f64], u: f64) -> f64 {
        self.rhs(x, u).iter().zip(&self.scale).map(|(d, s)| (d / s).powi(2)).sum::<f64>().sqrt()
    }

    fn labels(&self) -> Vec<String> {
        let l = &self.layout;
        let mut out = vec![String::new(); l.len()];
        out[0] = "v_dc".into();
        for k in 0..l.n_mass {
            out[l.speed(k)] = format!("w{}", k + 1);
        }
        for k in 0..l.n_mass - 1 {
            out[l.twist(k)] = format!("twist{}{}", k + 1, k + 2);
        }
        if l.coupled {
            out[l.x_m()] = "x_speed".into();
        }
        if l.dc_loop {
            out[l.x_dc()] = "x_dc".into();
        }
        out
    }
}

const TRIM_TOL: f64 = 1e-8;
const FD_STEP: f64 = 1e-6;

/// Solve `f(z) = 0` for the unknowns in `free`, the rest held, by damped
/// Newton in scaled coordinates.
fn trim(model: &ReducedModel, x: &mut [f64], u: &mut f64, free: &[usize]) -> Result<f64, AnalysisError> {
    let n = x.len();
    // unknown index n is the input
    let scale_of = |k: usize| if k == n { model.u_scale } else { model.scale[k] };
    let residual_vec = |x: &[f64], u: f64| -> DVector<f64> {
        let d = model.rhs(x, u);
        DVector::from_fn(n, |r, _| d[r] / model.scale[r])
    };
    let mut res = model.scaled_residual(x, *u);
    let max_iter = 50;
    for iter in 0..max_iter {
        if res < TRIM_TOL {
            return Ok(res);
        }
        let mut jac = DMatrix::zeros(n, free.len());
        for (c, &k) in free.iter().enumerate() {
            let h = FD_STEP * scale_of(k);
            let (mut xp, mut up) = (x.to_vec(), *u);
            let (mut xm, mut um) = (x.to_vec(), *u);
            if k == n {
                up += h;
                um -= h;
            } else {
                xp[k] += h;
                xm[k] -= h;
            }
            let col = (residual_vec(&xp, up) - residual_vec(&xm, um)) / (2.0 * FD_STEP);
            jac.set_column(c, &col);
        }
        let r = residual_vec(x, *u);
        // least squares: some trims carry one redundant balance equation
        let step = jac.svd(true, true).solve(&(-&r), 1e-14).map_err(|_| AnalysisError::NoEquilibrium { residual: res, iterations: iter })?;
        let mut lambda = 1.0;
        loop {
            let (mut xt, mut ut) = (x.to_vec(), *u);
            for (c, &k) in free.iter().enumerate() {
                let d = lambda * step[c] * scale_of(k);
                if k == n {
                    ut += d;
                } else {
                    xt[k] += d;
                }
            }
            let rt = model.scaled_residual(&xt, ut);
            if rt.is_finite() && rt < res {
                x.copy_from_slice(&xt);
                *u = ut;
                res = rt;
                break;
            }
            lambda *= 0.5;
            if lambda < 1e-6 {
                return Err(AnalysisError::NoEquilibrium { residual: res, iterations: iter });
            }
        }
    }
    if res < TRIM_TOL {
        Ok(res)
    } else {
        Err(AnalysisError::NoEquilibrium { residual: res, iterations: max_iter })
    }
}

/// Linearize the DC link, shaft and speed-coupling loop around the
/// equilibrium at `v_dc = v_dc,ref` and the requested load.
///
/// Input: current injected into the DC node, A. Output: `v_dc`, V.
pub fn linearize(plant: &PlantParams, gains: &CascadeGains, opts: LinearizeOptions) -> Result<LinearModel, AnalysisError> {
    plant.validate().map_err(AnalysisError::Dimensions)?;
    let n_mass = plant.shaft.len();
    let layout = Layout { n_mass, coupled: opts.coupled, dc_loop: opts.dc_loop };
    let (kp_m, ki_m) = gains.speed_gains(plant.shaft.total_inertia());
    let (kp_dc, ki_dc) = gains.dc_gains(plant.c_total());
    let tau_l = opts.load_pu * plant.tau_nom();

    let mut scale = vec![0.0; layout.len()];
    // rates per second of each state's natural base
    scale[0] = plant.vdc_ref;
    for k in 0..n_mass {
        scale[layout.speed(k)] = plant.w_nom;
    }
    for k in 0..n_mass - 1 {
        scale[layout.twist(k)] = plant.tau_nom() / plant.shaft.couplings[k].stiffness;
    }
    if opts.coupled {
        scale[layout.x_m()] = plant.tau_nom() / ki_m;
    }
    if opts.dc_loop {
        scale[layout.x_dc()] = plant.p_nom / (ki_dc * plant.vdc_ref);
    }
    let model = ReducedModel { plant, layout, kp_m, ki_m, kp_dc, ki_dc, tau_l, tau_frozen: tau_l, scale, u_scale: plant.p_nom / plant.vdc_ref };
    let l = &model.layout;
    let n = l.len();

    let mut x = vec![0.0; n];
    x[0] = plant.vdc_ref;
    for k in 0..n_mass {
        x[l.speed(k)] = plant.w_nom;
    }
    let mut u = 0.0;
    // v_dc is pinned; the speed loop (or the frozen torque) sets the speed,
    // so with both loops open the speed is free and the input balances.
    let mut free: Vec<usize> = (1..n).collect();
    if !opts.dc_loop {
        free.push(n);
    }
    if !opts.coupled {
        // no speed feedback: pin the speed, the twist still trims
        free.retain(|&k| k != l.speed(0));
    }
    let residual = trim(&model, &mut x, &mut u, &free)?;

    let mut a = DMatrix::zeros(n, n);
    for k in 0..n {
        let h = FD_STEP * model.scale[k];
        let (mut xp, mut xm) = (x.clone(), x.clone());
        xp[k] += h;
        xm[k] -= h;
        let (fp, fm) = (model.rhs(&xp, u), model.rhs(&xm, u));
        for r in 0..n {
            a[(r, k)] = (fp[r] - fm[r]) / (2.0 * h);
        }
    }
    let hu = FD_STEP * model.u_scale;
    let (fp, fm) = (model.rhs(&x, u + hu), model.rhs(&x, u - hu));
    let b = DMatrix::from_fn(n, 1, |r, _| (fp[r] - fm[r]) / (2.0 * hu));
    let mut c = DMatrix::zeros(1, n);
    c[(0, 0)] = 1.0;

    Ok(LinearModel {
        a,
        b,
        c,
        x0: x,
        u0: vec![u],
        state_labels: model.labels(),
        input_labels: vec!["i_dc".into()],
        output_labels: vec!["v_dc".into()],
        residual,
    })
}

/// Capacitance seen by a current injection at `freq_hz`, `Im(1/Z(jω)) / ω`.
pub fn effective_capacitance(model: &LinearModel, freq_hz: f64) -> Option<f64> {
    let w = std::f64::consts::TAU * freq_hz;
    let z = model.transfer(w)?;
    Some((1.0 / z).im / w)
}

/// DC-loop coefficients recovered from a linearization, scaled by `1/η²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DcLoopCoefficients {
    pub kp_over_eta2: f64,
    pub ki_over_eta2: f64,
    /// Expected from the gain design, same scaling.
    pub kp_design: f64,
    pub ki_design: f64,
}

impl DcLoopCoefficients {
    pub fn max_rel_error(&self) -> f64 {
        let e = |a: f64, b: f64| ((a - b) / b).abs();
        e(self.kp_over_eta2, self.kp_design).max(e(self.ki_over_eta2, self.ki_design))
    }
}

/// Closed-loop DC coefficients in the matching-frequency coordinate
/// `ω = η v_dc`: the DC PI contributes `−(K_p,dc/η²)(ω − ω_pll)` and
/// `−(K_i,dc/η²)(θ − θ_pll)` to `(C_tot/η²) ω̇`.
pub fn dc_loop_coefficients(plant: &PlantParams, gains: &CascadeGains, load_pu: f64) -> Result<DcLoopCoefficients, AnalysisError> {
    let closed = linearize(plant, gains, LinearizeOptions { coupled: true, dc_loop: true, load_pu })?;
    let open = linearize(plant, gains, LinearizeOptions { coupled: true, dc_loop: false, load_pu })?;
    let eta = plant.eta();
    let v0 = closed.x0[0];
    let n = closed.n_states();
    // P*/v enters the DC node: ∂/∂v = −K_p v_ref / v0 − P*₀ / v0²
    let p0 = open.u0[0] * v0;
    let to_power = plant.cdc * v0 / plant.vdc_ref;
    let kp = -(closed.a[(0, 0)] - open.a[(0, 0)]) * to_power - p0 / (v0 * plant.vdc_ref);
    let ki = -closed.a[(0, n - 1)] * to_power;
    // θ = η x_dc + θ_pll and ω = η v turn both gains into K/η² per unit of
    // the η-scaled coordinates
    let (kp_d, ki_d) = gains.dc_gains(plant.c_total());
    let e2 = eta * eta;
    Ok(DcLoopCoefficients { kp_over_eta2: kp / e2, ki_over_eta2: ki / e2, kp_design: kp_d / e2, ki_design: ki_d / e2 })
}

/// Undamped torsional frequencies, Hz; re-exported here for the Bode tools.
pub use crate::plant::torsional_frequencies;

// ------------------------------------------------------ coupled-mass form

/// Inputs of an equivalence run, as phasors at `t = 0` that turn at the
/// nominal grid frequency.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EquivalenceInputs {
    pub m_g: PlanarVec,
    pub v_inf: PlanarVec,
    pub tau_l: f64,
}

impl EquivalenceInputs {
    fn modulation(&self, t: f64, plant: &PlantParams) -> PlanarVec {
        rotate(plant.omega0 * t, self.m_g)
    }

    fn source(&self, t: f64, plant: &PlantParams) -> PlanarVec {
        rotate(plant.omega0 * t, self.v_inf)
    }
}

/// Outcome of [`coupled_mass_equivalence`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EquivalenceReport {
    /// Largest per-state deviation over the run, relative to that state's
    /// largest magnitude.
    pub max_rel_error: f64,
    /// Largest `|τ_m| / τ_nom`; the comparison assumes this stays below 1.
    pub max_torque_pu: f64,
}

/// Plant with the speed PI closed in continuous time. Layout: plant
/// vector followed by the speed integrator.
fn speed_loop_rhs(t: f64, x: &[f64], inp: &EquivalenceInputs, plant: &PlantParams, kp: f64, ki: f64) -> Vec<f64> {
    let n = x.len() - 1;
    let st = PlantState::from_slice(&x[..n]);
    let w1 = st.shaft[0].speed;
    let w_dc = dc_as_speed(st.v_dc, plant.w_nom, plant.vdc_ref);
    let x_m = x[n];
    let tau_m = -kp * (w1 - w_dc) - ki * x_m;
    let u = PlantInputs { m_g: inp.modulation(t, plant), tau_m, tau_l: inp.tau_l, v_inf: inp.source(t, plant) };
    let mut d = derivative_unchecked(&st, &u, plant).to_vec();
    d.push(w1 - w_dc);
    d
}

/// The same system written as a chain with the DC link as mass 0 at angle
/// `x₀` and speed `w_dc`. Layout: `i_α, i_β, x₀, w_dc`, then `(x_k, w_k)`.
///
/// The coupling acts on mass 1 with the plain PI gains and on the DC mass
/// scaled by `w₁ / w_dc`, which keeps the rewrite exact away from
/// `w₁ = w_dc`.
fn coupled_mass_rhs(t: f64, y: &[f64], inp: &EquivalenceInputs, plant: &PlantParams, kp: f64, ki: f64) -> Vec<f64> {
    let r = plant.vdc_ref / plant.w_nom;
    let m_dc = r * r * plant.cdc;
    let g_dc = r * r * plant.gdc;
    let i = PlanarVec::new(y[0], y[1]);
    let (x0, w_dc) = (y[2], y[3]);
    let n = (y.len() - 4) / 2;
    let ang = |k: usize| y[4 + 2 * k];
    let spd = |k: usize| y[5 + 2 * k];

    let m_g = inp.modulation(t, plant);
    let v_g = inp.source(t, plant) - plant.z_grid.apply(i);
    let di = (v_g - i * plant.rg - m_g * (r * w_dc)) * (1.0 / plant.lg);
    // spring-damper between the DC mass and mass 1
    let t01 = kp * (w_dc - spd(0)) + ki * (x0 - ang(0));
    let ratio = spd(0) / w_dc;
    let tau_g = r * m_g.dot(i);

    let mut torque = vec![0.0; n];
    torque[0] += t01;
    torque[n - 1] -= inp.tau_l;
    for k in 0..n - 1 {
        let c = plant.shaft.couplings[k];
        let t = c.stiffness * (ang(k) - ang(k + 1)) + c.damping * (spd(k) - spd(k + 1));
        torque[k] -= t;
        torque[k + 1] += t;
    }
    let mut d = vec![di.x, di.y, w_dc, (-ratio * t01 + tau_g - g_dc * w_dc) / m_dc];
    for (k, (tq, m)) in torque.iter().zip(&plant.shaft.masses).enumerate() {
        d.push(spd(k));
        d.push(tq / m);
    }
    d
}

/// Integrate the plant with the speed-coupling PI and its coupled-mass
/// rewrite side by side with RK4 and compare the trajectories in the
/// plant's coordinates.
pub fn coupled_mass_equivalence(
    plant: &PlantParams,
    gains: &CascadeGains,
    start: &PlantState,
    x_m0: f64,
    inputs: &EquivalenceInputs,
    duration: f64,
    dt: f64,
) -> EquivalenceReport {
    let (kp, ki) = gains.speed_gains(plant.shaft.total_inertia());
    let r = plant.vdc_ref / plant.w_nom;
    let mut a = start.to_vec();
    a.push(x_m0);
    let n = a.len() - 1;

    let to_coupled = |a: &[f64]| {
        let st = PlantState::from_slice(&a[..n]);
        let mut y = vec![st.i_g.x, st.i_g.y, st.shaft[0].angle - a[n], st.v_dc / r];
        for m in &st.shaft {
            y.push(m.angle);
            y.push(m.speed);
        }
        y
    };
    let from_coupled = |y: &[f64]| {
        let mut a = vec![y[0], y[1], y[3] * r];
        a.extend_from_slice(&y[4..]);
        a.push(y[4] - y[2]);
        a
    };
    let mut b = to_coupled(&a);

    let steps = (duration / dt).round() as usize;
    let mut diff = vec![0.0_f64; a.len()];
    let mut peak = vec![0.0_f64; a.len()];
    let mut torque = 0.0_f64;
    for step in 0..steps {
        let t = step as f64 * dt;
        a = integrate::rk4(t, &a, dt, |t, x: &Vec<f64>| Ok::<_, Infallible>(speed_loop_rhs(t, x, inputs, plant, kp, ki))).unwrap();
        b = integrate::rk4(t, &b, dt, |t, y: &Vec<f64>| Ok::<_, Infallible>(coupled_mass_rhs(t, y, inputs, plant, kp, ki))).unwrap();
        let back = from_coupled(&b);
        for k in 0..a.len() {
            diff[k] = diff[k].max((a[k] - back[k]).abs());
            peak[k] = peak[k].max(a[k].abs());
        }
        let w_dc = dc_as_speed(a[2], plant.w_nom, plant.vdc_ref);
        torque = torque.max((-kp * (a[4] - w_dc) - ki * a[n]).abs() / plant.tau_nom());
    }
    let max_rel_error = diff.iter().zip(&peak).map(|(d, p)| if *p > 0.0 { d / p } else { *d }).fold(0.0, f64::max);
    EquivalenceReport { max_rel_error, max_torque_pu: torque }
}

/// Allowed current overshoot over `i_nom`.
pub const CURRENT_MARGIN: f64 = 1.02;
/// Allowed DC voltage band in p.u.
pub const VDC_BAND: (f64, f64) = (0.7, 1.3);

/// Limit checks on a finished run; empty when every bound holds.
pub fn limit_violations(trace: &SimTrace) -> Vec<String> {
    let x = &trace.extremes;
    let mut out = Vec::new();
    let i = x.max_i_norm / trace.i_nom;
    if !(i <= CURRENT_MARGIN) {
        out.push(format!("current {i:.3} i_nom above {CURRENT_MARGIN}"));
    }
    if !(x.max_m_norm <= MODULATION_LIMIT + 1e-12) {
        out.push(format!("modulation {:.6} above 1/sqrt(2)", x.max_m_norm));
    }
    let (lo, hi) = (x.min_v_dc / trace.bases.vdc, x.max_v_dc / trace.bases.vdc);
    if !(lo >= VDC_BAND.0 && hi <= VDC_BAND.1) {
        out.push(format!("v_dc range [{lo:.3}, {hi:.3}] p.u. outside [{}, {}]", VDC_BAND.0, VDC_BAND.1));
    }
    out
}

// ---------------------------------------------------------------- metrics

/// Settling band, relative to the post-event value.
pub const SETTLING_BAND: f64 = 0.02;

/// Time after `t_event` until `values` last leaves the band around its
/// final value on `[t_event, t_end)`. Zero if it never leaves.
pub fn settling_time(times: &[f64], values: &[f64], t_event: f64, t_end: f64, band: f64) -> f64 {
    settling_within(times, values, t_event, t_end, |fin| band * fin.abs())
}

/// Settling time with the band a fraction of the step, `|final − before|`,
/// where `before` averages the 0.1 s ahead of the event.
pub fn step_settling_time(times: &[f64], values: &[f64], t_event: f64, t_end: f64, frac: f64) -> f64 {
    let before = window_mean(times, values, t_event - STEADY_WINDOW, t_event);
    settling_within(times, values, t_event, t_end, |fin| frac * (fin - before).abs())
}

fn settling_within(times: &[f64], values: &[f64], t_event: f64, t_end: f64, tol: impl Fn(f64) -> f64) -> f64 {
    let idx: Vec<usize> = (0..times.len()).filter(|&k| times[k] >= t_event && times[k] < t_end).collect();
    let Some(&last) = idx.last() else { return 0.0 };
    let tail = tail_mean(times, values, times[idx[0]], times[last] + f64::EPSILON);
    let tol = tol(tail).max(f64::MIN_POSITIVE);
    idx.iter().rev().find(|&&k| (values[k] - tail).abs() > tol).map_or(0.0, |&k| (times[(k + 1).min(last)] - t_event).max(0.0))
}

/// Mean of `values` over `[t0, t1)`.
pub fn window_mean(times: &[f64], values: &[f64], t0: f64, t1: f64) -> f64 {
    let (s, n) = times.iter().zip(values).filter(|(t, _)| **t >= t0 && **t < t1).fold((0.0, 0usize), |(s, n), (_, v)| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Mean over the last tenth of `[t0, t1)`.
fn tail_mean(times: &[f64], values: &[f64], t0: f64, t1: f64) -> f64 {
    let start = t1 - 0.1 * (t1 - t0);
    window_mean(times, values, start, t1)
}

/// RMS of the `omega` component of `values` on `[t0, t1)`, from a
/// single-bin DFT over a whole number of periods.
pub fn harmonic_rms(times: &[f64], values: &[f64], omega: f64, t0: f64, t1: f64) -> f64 {
    let period = std::f64::consts::TAU / omega;
    let whole = ((t1 - t0) / period).floor() * period;
    let t1 = t0 + whole.max(period);
    let pts: Vec<(f64, f64)> = times.iter().zip(values).filter(|(t, _)| **t >= t0 && **t < t1 - 1e-12).map(|(t, v)| (*t, *v)).collect();
    if pts.is_empty() {
        return 0.0;
    }
    let mean = pts.iter().map(|p| p.1).sum::<f64>() / pts.len() as f64;
    let acc: Complex64 = pts.iter().map(|&(t, v)| Complex64::from_polar(v - mean, -omega * t)).sum();
    // amplitude 2|X|/N, RMS amplitude/√2
    2.0 * acc.norm() / pts.len() as f64 / std::f64::consts::SQRT_2
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceMetrics {
    pub max_i_pu: f64,
    pub max_m: f64,
    pub min_v_dc_pu: f64,
    pub max_v_dc_pu: f64,
    /// Largest excursion of `v_dc` above its final value after the first
    /// event, %.
    pub v_dc_overshoot_pct: f64,
    /// `(event time, settling time)` of `v_dc` for every event edge.
    pub settling: Vec<(f64, f64)>,
    pub p_before_pu: f64,
    pub q_before_pu: f64,
    pub p_after_pu: f64,
    pub q_after_pu: f64,
    /// Second-harmonic RMS of `v_dc` during single-phase faults, p.u.
    pub v_dc_second_harmonic_pu: Option<f64>,
    /// Time from the first event until the synchronization energy stays
    /// below `1e−4` of its post-event peak.
    pub resync_time: Option<f64>,
}

/// Window length for the steady P/Q averages, s.
const STEADY_WINDOW: f64 = 0.1;
/// Transient skipped before the harmonic window, s.
const HARMONIC_SKIP: f64 = 0.1;
const RESYNC_FRACTION: f64 = 1e-4;

pub fn trace_metrics(trace: &SimTrace) -> TraceMetrics {
    assert!(!trace.samples.is_empty(), "empty trace");
    let b = &trace.bases;
    let t = trace.times();
    let vdc = trace.column(|s| s.v_dc / b.vdc);
    let p = trace.column(|s| s.p_g / b.power);
    let q = trace.column(|s| s.q_g / b.power);
    let t_end = *t.last().unwrap() + trace.dt_sample;
    let t_first = trace.scenario.events.first().map_or(t_end, |e| e.t);

    let mut edges: Vec<f64> =
        trace.scenario.events.iter().flat_map(|e| std::iter::once(e.t).chain(e.event.duration().map(|d| e.t + d))).filter(|&x| x < t_end).collect();
    edges.sort_by(f64::total_cmp);
    edges.dedup();
    let settling = edges
        .iter()
        .enumerate()
        .map(|(k, &e)| {
            let next = edges.get(k + 1).copied().unwrap_or(t_end);
            (e, settling_time(&t, &vdc, e, next, SETTLING_BAND))
        })
        .collect();

    let final_v = tail_mean(&t, &vdc, t_first, t_end);
    let overshoot = t.iter().zip(&vdc).filter(|(x, _)| **x >= t_first).map(|(_, v)| (v - final_v) / final_v * 100.0).fold(0.0_f64, f64::max);

    let (p_before, q_before) = if t_first > t[0] {
        let a = (t_first - STEADY_WINDOW).max(t[0]);
        (window_mean(&t, &p, a, t_first), window_mean(&t, &q, a, t_first))
    } else {
        (p[0], q[0])
    };
    let a = (t_end - STEADY_WINDOW).max(t[0]);
    let (p_after, q_after) = (window_mean(&t, &p, a, t_end), window_mean(&t, &q, a, t_end));

    let harmonic = trace
        .scenario
        .events
        .iter()
        .filter_map(|e| match e.event {
            GridEvent::SinglePhaseDrop { duration_s, .. } => Some((e.t + HARMONIC_SKIP, (e.t + duration_s).min(t_end))),
            _ => None,
        })
        .filter(|(a, z)| z > a)
        .map(|(a, z)| harmonic_rms(&t, &vdc, 2.0 * b.omega, a, z))
        .reduce(f64::max);

    let resync_time = trace.scenario.events.first().and_then(|_| {
        let e = trace.column(|s| s.sync_energy);
        let post: Vec<usize> = (0..t.len()).filter(|&k| t[k] >= t_first).collect();
        let peak = post.iter().map(|&k| e[k]).fold(0.0, f64::max);
        if !(peak > 0.0) {
            return Some(0.0);
        }
        let thr = RESYNC_FRACTION * peak;
        match post.iter().rev().find(|&&k| e[k] >= thr) {
            None => Some(0.0),
            Some(&k) if k + 1 < t.len() => Some(t[k + 1] - t_first),
            Some(_) => None,
        }
    });

    TraceMetrics {
        max_i_pu: trace.extremes.max_i_norm / trace.i_nom,
        max_m: trace.extremes.max_m_norm,
        min_v_dc_pu: trace.extremes.min_v_dc / b.vdc,
        max_v_dc_pu: trace.extremes.max_v_dc / b.vdc,
        v_dc_overshoot_pct: overshoot,
        settling,
        p_before_pu: p_before,
        q_before_pu: q_before,
        p_after_pu: p_after,
        q_after_pu: q_after,
        v_dc_second_harmonic_pu: harmonic,
        resync_time,
    }
}

impl TraceMetrics {
    /// `key = value` lines.
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "max_i_over_inom = {}", self.max_i_pu);
        let _ = writeln!(s, "max_m_norm = {}", self.max_m);
        let _ = writeln!(s, "min_v_dc_pu = {}", self.min_v_dc_pu);
        let _ = writeln!(s, "max_v_dc_pu = {}", self.max_v_dc_pu);
        let _ = writeln!(s, "v_dc_overshoot_pct = {}", self.v_dc_overshoot_pct);
        for (k, (e, ts)) in self.settling.iter().enumerate() {
            let _ = writeln!(s, "settling_{k}_at_s = {e}");
            let _ = writeln!(s, "settling_{k}_s = {ts}");
        }
        let _ = writeln!(s, "p_before_pu = {}", self.p_before_pu);
        let _ = writeln!(s, "q_before_pu = {}", self.q_before_pu);
        let _ = writeln!(s, "p_after_pu = {}", self.p_after_pu);
        let _ = writeln!(s, "q_after_pu = {}", self.q_after_pu);
        if let Some(h) = self.v_dc_second_harmonic_pu {
            let _ = writeln!(s, "v_dc_second_harmonic_rms_pu = {h}");
        }
        match self.resync_time {
            Some(r) => {
                let _ = writeln!(s, "resync_time_s = {r}");
            }
            None => {
                let _ = writeln!(s, "resync_time_s = none");
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::TAU;

    fn integrator(c: f64) -> LinearModel {
        LinearModel::from_matrices(DMatrix::from_element(1, 1, 0.0), DMatrix::from_element(1, 1, 1.0 / c), DMatrix::from_element(1, 1, 1.0)).unwrap()
    }

    #[test]
    fn integrator_slope_and_phase() {
        let m = integrator(1.0);
        let r = frequency_response(&m, &[1.0, 10.0]);
        assert!((r[0].gain_db - r[1].gain_db - 20.0).abs() < 1e-9);
        assert!((r[0].phase_deg + 90.0).abs() < 1e-9);
    }

    #[test]
    fn first_order_lag_corner() {
        let wc = TAU * 3.0;
        let m =
            LinearModel::from_matrices(DMatrix::from_element(1, 1, -wc), DMatrix::from_element(1, 1, wc), DMatrix::from_element(1, 1, 1.0)).unwrap();
        let r = frequency_response(&m, &[3.0]);
        assert!((r[0].gain_db + 10.0 * 2f64.log10()).abs() < 1e-9);
        assert!((r[0].phase_deg + 45.0).abs() < 1e-9);
    }

    #[test]
    fn pole_on_axis_reports_infinite_gain() {
        let m = integrator(1.0);
        assert_eq!(m.transfer(0.0), None);
        let osc = LinearModel::from_matrices(
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -TAU * TAU, 0.0]),
            DMatrix::from_column_slice(2, 1, &[0.0, 1.0]),
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
        )
        .unwrap();
        assert_eq!(frequency_response(&osc, &[1.0])[0].gain_db, f64::INFINITY);
    }

    #[test]
    fn mismatched_dimensions_rejected() {
        let r = LinearModel::from_matrices(DMatrix::zeros(2, 2), DMatrix::zeros(3, 1), DMatrix::zeros(1, 2));
        assert!(matches!(r, Err(AnalysisError::Dimensions(_))));
    }

    #[test]
    fn equilibrium_residual_is_tiny() {
        let p = PlantParams::default();
        let g = CascadeGains::default();
        for coupled in [true, false] {
            for load_pu in [0.0, 0.95, -0.5] {
                let m = linearize(&p, &g, LinearizeOptions { coupled, dc_loop: false, load_pu }).unwrap();
                assert!(m.residual < 1e-8, "{coupled} {load_pu}: {}", m.residual);
                assert_eq!(m.state_labels.len(), m.n_states());
            }
        }
    }

    #[test]
    fn uncoupled_is_the_bare_capacitor() {
        let p = PlantParams::default();
        let m = linearize(&p, &CascadeGains::default(), LinearizeOptions { coupled: false, ..Default::default() }).unwrap();
        for f in [0.5, 5.0, 50.0] {
            let c = effective_capacitance(&m, f).unwrap();
            assert!((c / p.cdc - 1.0).abs() < 1e-6, "{f} Hz: {c}");
        }
    }

    #[test]
    fn coupled_low_frequency_capacitance() {
        let p = PlantParams::default();
        for load_pu in [0.0, 0.95] {
            let m = linearize(&p, &CascadeGains::default(), LinearizeOptions { coupled: true, dc_loop: false, load_pu }).unwrap();
            let c = effective_capacitance(&m, 0.01).unwrap();
            assert!((c / p.c_total() - 1.0).abs() < 0.01, "load {load_pu}: {c} vs {}", p.c_total());
        }
    }

    #[test]
    fn zero_near_lowest_shaft_mode() {
        let p = PlantParams::default();
        let m = linearize(&p, &CascadeGains::default(), LinearizeOptions::default()).unwrap();
        let zeros = m.transmission_zeros().unwrap();
        let f0 = torsional_frequencies(&p)[0];
        let hit = zeros.iter().filter(|z| z.im.abs() > 0.0).map(|z| z.norm() / TAU).any(|f| (f / f0 - 1.0).abs() < 0.1);
        assert!(hit, "zeros {zeros:?}, mode {f0} Hz");
    }

    #[test]
    fn dc_loop_matches_design_gains() {
        let p = PlantParams::default();
        for load_pu in [0.0, 0.95] {
            let c = dc_loop_coefficients(&p, &CascadeGains::default(), load_pu).unwrap();
            assert!(c.max_rel_error() < 1e-4, "{c:?}");
        }
    }

    #[test]
    fn constant_signal_settles_at_once() {
        let t: Vec<f64> = (0..1000).map(|k| k as f64 * 1e-3).collect();
        let v = vec![1.0; t.len()];
        assert_eq!(settling_time(&t, &v, 0.2, 1.0, SETTLING_BAND), 0.0);
    }

    #[test]
    fn step_response_settling() {
        let t: Vec<f64> = (0..5000).map(|k| k as f64 * 1e-3).collect();
        let tau = 0.1;
        let v: Vec<f64> = t.iter().map(|&x| 1.0 - (-x / tau).exp()).collect();
        let ts = settling_time(&t, &v, 0.0, 5.0, 0.02);
        // 2 % band: −τ ln 0.02
        assert!((ts - tau * 50f64.ln()).abs() < 2e-3, "{ts}");
    }

    #[test]
    fn step_band_scales_with_the_step() {
        let t: Vec<f64> = (0..3000).map(|k| k as f64 * 1e-3).collect();
        let v: Vec<f64> = t.iter().map(|&x| if x < 1.0 { 1.0 } else { 1.02 - 0.02 * (-(x - 1.0) / 0.1).exp() }).collect();
        let ts = step_settling_time(&t, &v, 1.0, 3.0, 0.02);
        assert!((ts - 0.1 * 50f64.ln()).abs() < 2e-3, "{ts}");
        // relative to the final value the same response is settled at once
        assert_eq!(settling_time(&t, &v, 1.0, 3.0, 0.02), 0.0);
    }

    #[test]
    fn harmonic_rms_calibration() {
        let w = TAU * 100.0;
        let t: Vec<f64> = (0..2000).map(|k| k as f64 * 1e-4).collect();
        let v: Vec<f64> = t.iter().map(|&x| 3.0 + 0.2 * (w * x + 0.4).sin() + 0.05 * (2.0 * w * x).cos()).collect();
        let r = harmonic_rms(&t, &v, w, 0.0, 0.2);
        assert!((r - 0.2 / 2f64.sqrt()).abs() < 1e-9, "{r}");
    }

    fn equivalence_case(plant: &PlantParams, load_pu: f64) -> EquivalenceReport {
        use crate::simulation::{operating_point, ControlConfig};
        let v_inf = PlanarVec::new(plant.vg_nom * 1.0, 0.0);
        let op = operating_point(plant, &ControlConfig::default(), load_pu, v_inf);
        let mut start = op.state.clone();
        start.v_dc *= 1.001;
        start.shaft[0].speed *= 0.9995;
        start.i_g = start.i_g * 1.02;
        let gains = CascadeGains::default();
        let (_, ki) = gains.speed_gains(plant.shaft.total_inertia());
        let inputs = EquivalenceInputs { m_g: op.m_g, v_inf, tau_l: op.tau };
        coupled_mass_equivalence(plant, &gains, &start, -op.tau / ki, &inputs, 5.0, 5e-5)
    }

    #[test]
    fn coupled_mass_rewrite_is_exact() {
        for shaft in [crate::plant::ShaftParams::two_mass(), crate::plant::ShaftParams::five_mass()] {
            let plant = PlantParams { shaft, ..PlantParams::default() };
            for load_pu in [-0.5, 0.6] {
                let r = equivalence_case(&plant, load_pu);
                assert!(r.max_torque_pu < 1.0, "{r:?}");
                assert!(r.max_rel_error < 1e-6, "{r:?}");
            }
        }
    }
}
