//! Fixed-step engine: RK4 on the plant, controllers sampled at the control
//! rate with zero-order hold, scripted grid and load events, uniformly
//! sampled traces.
//!
//! Simulation time runs from `−warmup` to the scenario duration. Event
//! times are given on the same axis, so `t = 0` is the end of the warm-up.

use std::f64::consts::{PI, TAU};
use std::io::{self, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cascade::{
    ac_voltage_step, current_control_step, current_reference, dc_as_speed, dc_reference, dc_voltage_step, CascadeGains, CurrentGuard, CurrentLoop,
    PiState, SpeedCoupling, VecPiState, MODULATION_LIMIT,
};
use crate::frames::{circular_sat, clarke, instantaneous_power, PlanarVec};
use crate::integrate;
use crate::matching::{matching_power_reference, matching_step, synchronization_energy, MatchingModel, MatchingParams, MatchingState};
use crate::plant::{derivative, pcc_voltage, GridStrength, PlantError, PlantInputs, PlantParams, PlantState};
use crate::pll::{pll_energy, pll_step_cartesian, PllParams, PllState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ControlMode {
    Cascaded,
    Matching,
}

impl ControlMode {
    pub const ALL: [ControlMode; 2] = [ControlMode::Cascaded, ControlMode::Matching];

    pub fn name(self) -> &'static str {
        match self {
            ControlMode::Cascaded => "cascaded",
            ControlMode::Matching => "matching",
        }
    }
}

impl FromStr for ControlMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL.into_iter().find(|c| c.name() == s).ok_or_else(|| format!("unknown control mode `{s}`"))
    }
}

impl FromStr for GridStrength {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL.into_iter().find(|g| g.name() == s).ok_or_else(|| format!("unknown grid strength `{s}`"))
    }
}

fn one_second() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GridEvent {
    /// Shift of the infinite-bus angle, degrees.
    PhaseJump { deg: f64 },
    /// Balanced drop of all three phases to `to_pu`.
    ThreePhaseDrop { to_pu: f64, duration_s: f64 },
    /// Change of the infinite-bus frequency, Hz. Phase stays continuous.
    FrequencyStep { hz: f64 },
    /// One phase (0, 1 or 2) forced to zero.
    SinglePhaseDrop {
        phase: usize,
        #[serde(default = "one_second")]
        duration_s: f64,
    },
    /// Balanced dip to `to_pu`.
    VoltageDip { to_pu: f64, duration_s: f64 },
    /// New load torque in p.u. of the nominal torque.
    LoadStep { to_pu: f64 },
}

impl GridEvent {
    /// End of the event's effect, for the events that have one.
    pub fn duration(&self) -> Option<f64> {
        match *self {
            GridEvent::ThreePhaseDrop { duration_s, .. }
            | GridEvent::SinglePhaseDrop { duration_s, .. }
            | GridEvent::VoltageDip { duration_s, .. } => Some(duration_s),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimedEvent {
    /// Seconds after the end of the warm-up.
    pub t: f64,
    #[serde(flatten)]
    pub event: GridEvent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioScript {
    pub name: String,
    pub grid: GridStrength,
    pub control: ControlMode,
    /// Initial load torque in p.u. (negative = generating).
    pub load_pu: f64,
    /// Recorded span after the warm-up, s.
    pub duration: f64,
    #[serde(default)]
    pub events: Vec<TimedEvent>,
}

impl ScenarioScript {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.load_pu.abs() <= 1.0) {
            return Err(format!("scenario.load_pu must lie in [-1, 1], got {}", self.load_pu));
        }
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(format!("scenario.duration must be positive, got {}", self.duration));
        }
        let mut last = 0.0;
        for (k, ev) in self.events.iter().enumerate() {
            if !(ev.t >= last && ev.t.is_finite()) {
                return Err(format!("scenario.events[{k}] is out of order or negative (t = {})", ev.t));
            }
            last = ev.t;
            if ev.t >= self.duration {
                return Err(format!("scenario.events[{k}] at t = {} is not before the end ({})", ev.t, self.duration));
            }
            match ev.event {
                GridEvent::SinglePhaseDrop { phase, .. } if phase > 2 => {
                    return Err(format!("scenario.events[{k}]: phase index {phase} is not 0, 1 or 2"));
                }
                GridEvent::LoadStep { to_pu } if !(to_pu.abs() <= 1.0) => {
                    return Err(format!("scenario.events[{k}]: load {to_pu} outside [-1, 1]"));
                }
                GridEvent::ThreePhaseDrop { to_pu, .. } | GridEvent::VoltageDip { to_pu, .. } if !(to_pu >= 0.0) => {
                    return Err(format!("scenario.events[{k}]: voltage {to_pu} p.u. is negative"));
                }
                _ => {}
            }
            if let Some(d) = ev.event.duration() {
                if !(d > 0.0) {
                    return Err(format!("scenario.events[{k}]: duration must be positive"));
                }
            }
        }
        Ok(())
    }

    /// Time of the first event, or zero.
    pub fn first_event(&self) -> f64 {
        self.events.first().map_or(0.0, |e| e.t)
    }
}

/// The seven built-in test cases.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScenarioKind {
    PhaseJump,
    ThreePhaseDrop,
    FrequencyUp,
    FrequencyDown,
    SinglePhaseDrop,
    VoltageDip,
    LoadStep,
}

/// Event time used by every preset.
pub const EVENT_TIME: f64 = 0.5;

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 7] = [
        ScenarioKind::PhaseJump,
        ScenarioKind::ThreePhaseDrop,
        ScenarioKind::FrequencyUp,
        ScenarioKind::FrequencyDown,
        ScenarioKind::SinglePhaseDrop,
        ScenarioKind::VoltageDip,
        ScenarioKind::LoadStep,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::PhaseJump => "phase-jump",
            ScenarioKind::ThreePhaseDrop => "3ph-drop",
            ScenarioKind::FrequencyUp => "freq-up",
            ScenarioKind::FrequencyDown => "freq-down",
            ScenarioKind::SinglePhaseDrop => "1ph-drop",
            ScenarioKind::VoltageDip => "dip",
            ScenarioKind::LoadStep => "load-step",
        }
    }

    pub fn script(self, grid: GridStrength, control: ControlMode) -> ScenarioScript {
        let at = |event| vec![TimedEvent { t: EVENT_TIME, event }];
        let (load_pu, duration, events) = match self {
            ScenarioKind::PhaseJump => (-0.5, 4.0, at(GridEvent::PhaseJump { deg: 60.0 })),
            ScenarioKind::ThreePhaseDrop => (-0.5, 10.0, at(GridEvent::ThreePhaseDrop { to_pu: 0.0, duration_s: 5.0 })),
            ScenarioKind::FrequencyUp => (-0.5, 14.0, at(GridEvent::FrequencyStep { hz: 1.0 })),
            ScenarioKind::FrequencyDown => (0.95, 14.0, at(GridEvent::FrequencyStep { hz: -1.0 })),
            ScenarioKind::SinglePhaseDrop => (0.95, 3.0, at(GridEvent::SinglePhaseDrop { phase: 0, duration_s: 1.0 })),
            ScenarioKind::VoltageDip => (0.95, 4.0, at(GridEvent::VoltageDip { to_pu: 0.5, duration_s: 1.0 })),
            ScenarioKind::LoadStep => (-0.5, 6.0, at(GridEvent::LoadStep { to_pu: 0.95 })),
        };
        ScenarioScript { name: self.name().to_string(), grid, control, load_pu, duration, events }
    }
}

impl FromStr for ScenarioKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| {
            let names: Vec<_> = Self::ALL.iter().map(|k| k.name()).collect();
            format!("unknown scenario `{s}` (expected one of {})", names.join(", "))
        })
    }
}

/// Every scenario × grid × controller combination, scenario-major.
pub fn sweep_plan() -> Vec<(ScenarioKind, GridStrength, ControlMode)> {
    let mut plan = Vec::with_capacity(28);
    for kind in ScenarioKind::ALL {
        for grid in [GridStrength::Stiff, GridStrength::Weak] {
            for control in ControlMode::ALL {
                plan.push((kind, grid, control));
            }
        }
    }
    plan
}

/// Which voltage the cascaded stack uses for its feed-forward, current
/// reference and voltage magnitude.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VoltageSource {
    /// Measured on stiff grids, PLL output on weak grids.
    #[default]
    Auto,
    Measured,
    Pll,
}

impl VoltageSource {
    pub fn resolve(self, grid: GridStrength) -> VoltageSource {
        match (self, grid) {
            (VoltageSource::Auto, GridStrength::Stiff) => VoltageSource::Measured,
            (VoltageSource::Auto, GridStrength::Weak) => VoltageSource::Pll,
            (s, _) => s,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlConfig {
    pub gains: CascadeGains,
    pub pll: PllParams,
    pub matching: MatchingParams,
    #[serde(default)]
    pub voltage_source: VoltageSource,
    /// Dead-voltage threshold as a fraction of the nominal voltage.
    pub v_eps_frac: f64,
    /// Overcurrent guard of the cascaded stack.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cascaded_guard: Option<CurrentGuard>,
    /// Overcurrent guard of the matching stack.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matching_guard: Option<CurrentGuard>,
}

impl Default for ControlConfig {
    fn default() -> Self {
        Self {
            gains: CascadeGains::default(),
            pll: PllParams::default(),
            matching: MatchingParams::default(),
            voltage_source: VoltageSource::Auto,
            v_eps_frac: 0.01,
            cascaded_guard: Some(CurrentGuard { threshold: 0.97, resistance: 8.0 }),
            matching_guard: Some(CurrentGuard { threshold: 0.9, resistance: 12.0 }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    /// Plant integration step, s.
    pub dt_plant: f64,
    /// Controller sample time, an integer multiple of `dt_plant`, s.
    pub dt_control: f64,
    /// Record every n-th control step.
    pub record_decimation: usize,
    /// Settling time before the event clock starts, s.
    pub warmup: f64,
    /// First-order lag on every measured channel, s.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub measurement_lag: Option<f64>,
    pub plant: PlantParams,
    pub control: ControlConfig,
    pub scenario: ScenarioScript,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self::preset(ScenarioKind::PhaseJump, GridStrength::Stiff, ControlMode::Cascaded)
    }
}

impl SimConfig {
    pub fn preset(kind: ScenarioKind, grid: GridStrength, control: ControlMode) -> Self {
        Self {
            dt_plant: 5e-5,
            dt_control: 1e-4,
            record_decimation: 10,
            warmup: 2.0,
            measurement_lag: None,
            plant: PlantParams::default(),
            control: ControlConfig::default(),
            scenario: kind.script(grid, control),
        }
    }

    pub fn substeps(&self) -> usize {
        (self.dt_control / self.dt_plant).round() as usize
    }

    /// Plant parameters with the grid impedance of the scenario.
    pub fn plant_for_run(&self) -> PlantParams {
        PlantParams { z_grid: self.scenario.grid.impedance(self.plant.omega0), ..self.plant.clone() }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.dt_plant > 0.0 && self.dt_plant <= 1e-3) {
            return Err(format!("dt_plant must lie in (0, 1e-3] s, got {}", self.dt_plant));
        }
        if !(self.dt_control >= self.dt_plant) {
            return Err("dt_control must not be shorter than dt_plant".into());
        }
        let ratio = self.dt_control / self.dt_plant;
        if (ratio - ratio.round()).abs() > 1e-9 * ratio {
            return Err(format!("dt_control ({}) must be an integer multiple of dt_plant ({})", self.dt_control, self.dt_plant));
        }
        if self.record_decimation == 0 {
            return Err("record_decimation must be at least 1".into());
        }
        if !(self.warmup >= 0.0 && self.warmup.is_finite()) {
            return Err(format!("warmup must be non-negative, got {}", self.warmup));
        }
        if let Some(lag) = self.measurement_lag {
            if !(lag > 0.0) {
                return Err(format!("measurement_lag must be positive, got {lag}"));
            }
        }
        if !(self.control.v_eps_frac > 0.0 && self.control.v_eps_frac < 1.0) {
            return Err(format!("control.v_eps_frac must lie in (0, 1), got {}", self.control.v_eps_frac));
        }
        if !(self.control.pll.kappa > 0.0) {
            return Err(format!("control.pll.kappa must be positive, got {}", self.control.pll.kappa));
        }
        self.plant.validate()?;
        self.control.gains.validate()?;
        self.control.matching.validate()?;
        for g in [&self.control.cascaded_guard, &self.control.matching_guard].into_iter().flatten() {
            g.validate()?;
        }
        self.scenario.validate()
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("at t = {t:.6} s: {source}")]
    Plant {
        t: f64,
        #[source]
        source: PlantError,
    },
    #[error("non-finite state at t = {t:.6} s")]
    NonFinite { t: f64 },
}

/// Infinite-bus voltage at time `t` on the event axis.
///
/// The three phase voltages are built individually and Clarke-transformed,
/// so an unbalanced event produces its negative sequence naturally.
pub fn grid_source(t: f64, script: &ScenarioScript, params: &PlantParams) -> PlanarVec {
    let mut angle = params.omega0 * t;
    let mut scale = 1.0;
    let mut dropped: Option<usize> = None;
    for ev in script.events.iter().filter(|e| t >= e.t) {
        let active = |d: f64| t < ev.t + d;
        match ev.event {
            GridEvent::PhaseJump { deg } => angle += deg.to_radians(),
            GridEvent::FrequencyStep { hz } => angle += TAU * hz * (t - ev.t),
            GridEvent::ThreePhaseDrop { to_pu, duration_s } | GridEvent::VoltageDip { to_pu, duration_s } => {
                if active(duration_s) {
                    scale = to_pu;
                }
            }
            GridEvent::SinglePhaseDrop { phase, duration_s } => {
                if active(duration_s) {
                    dropped = Some(phase);
                }
            }
            GridEvent::LoadStep { .. } => {}
        }
    }
    // phase peak that gives an αβ amplitude of vg_nom
    let peak = scale * params.vg_nom * (2.0f64 / 3.0).sqrt();
    let mut abc = [0.0; 3];
    for (k, v) in abc.iter_mut().enumerate() {
        if dropped != Some(k) {
            *v = peak * (angle - 2.0 * PI * k as f64 / 3.0).cos();
        }
    }
    clarke(abc).0
}

/// Load torque in p.u. at time `t`.
pub fn load_profile(t: f64, script: &ScenarioScript) -> f64 {
    script.events.iter().filter(|e| t >= e.t).fold(script.load_pu, |load, e| match e.event {
        GridEvent::LoadStep { to_pu } => to_pu,
        _ => load,
    })
}

/// Steady state at a given load with balanced nominal grid voltage.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatingPoint {
    pub state: PlantState,
    pub v_inf: PlanarVec,
    pub v_g: PlanarVec,
    pub m_g: PlanarVec,
    pub tau: f64,
    pub p_star: f64,
    pub q_star: f64,
}

/// Solve for the current that carries the load power plus losses with the
/// reactive power the voltage controller would ask for. Damped Newton from
/// the unity-power-factor guess, which selects the high-voltage solution.
pub fn operating_point(plant: &PlantParams, control: &ControlConfig, load_pu: f64, v_inf: PlanarVec) -> OperatingPoint {
    let tau = load_pu * plant.tau_nom();
    let p_dc = plant.gdc * plant.vdc_ref * plant.vdc_ref + tau * plant.w_nom;
    let g = &control.gains;
    let q_law = |v: PlanarVec, p: f64| ac_voltage_step(v, plant.vg_nom, g.kp_v, p, f64::INFINITY, g.projection);
    let residual = |i: PlanarVec| {
        let v_g = v_inf - plant.z_grid.apply(i);
        let p_star = p_dc + plant.rg * i.norm_sq();
        let (p, q) = instantaneous_power(v_g, i);
        PlanarVec::new(p - p_star, q - q_law(v_g, p_star))
    };
    let mut i = v_inf * (p_dc / v_inf.norm_sq());
    let mut r = residual(i);
    for _ in 0..100 {
        if r.norm() < 1e-6 * plant.p_nom {
            break;
        }
        let h = 1e-3 * plant.i_nom();
        let cx = (residual(i + PlanarVec::new(h, 0.0)) - residual(i - PlanarVec::new(h, 0.0))) * (0.5 / h);
        let cy = (residual(i + PlanarVec::new(0.0, h)) - residual(i - PlanarVec::new(0.0, h))) * (0.5 / h);
        let det = cx.x * cy.y - cy.x * cx.y;
        if det.abs() < f64::MIN_POSITIVE {
            break;
        }
        let step = PlanarVec::new((cy.y * r.x - cy.x * r.y) / det, (cx.x * r.y - cx.y * r.x) / det);
        let mut alpha = 1.0;
        loop {
            let trial = i - step * alpha;
            let rt = residual(trial);
            if rt.norm() < r.norm() || alpha < 1e-4 {
                i = trial;
                r = rt;
                break;
            }
            alpha *= 0.5;
        }
    }
    let v_g = v_inf - plant.z_grid.apply(i);
    let p_star = p_dc + plant.rg * i.norm_sq();
    let q_star = q_law(v_g, p_star);
    let e = v_g - plant.z_converter().apply(i);
    let state = PlantState::spinning(plant, plant.w_nom, tau, plant.vdc_ref, i);
    OperatingPoint { state, v_inf, v_g, m_g: e * (1.0 / plant.vdc_ref), tau, p_star, q_star }
}

/// Sampled signals handed to the controller.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Measurement {
    pub i_g: PlanarVec,
    pub v_g: PlanarVec,
    pub v_dc: f64,
    pub w1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ControlOutput {
    pub m_g: PlanarVec,
    pub tau_m: f64,
    pub p_star: f64,
    pub q_star: f64,
    pub i_star: PlanarVec,
    /// `ω_pll` for the cascaded stack, `θ̇` for matching.
    pub omega_sync: f64,
    /// PLL energy `U`, respectively synchronization energy `S`.
    pub sync_energy: f64,
}

#[derive(Debug, Clone, PartialEq)]
struct Limits {
    i_nom: f64,
    p_nom: f64,
    vg_ref: f64,
    v_eps: f64,
    v_hold: f64,
    vdc_ref: f64,
    w_nom: f64,
    eta: f64,
    omega0: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CascadeStack {
    pub pll: PllState,
    pub dc: PiState,
    pub current: VecPiState,
    i_star: PlanarVec,
    kp_dc: f64,
    ki_dc: f64,
    current_loop: CurrentLoop,
    kappa: f64,
    dc_coupled: bool,
    source: VoltageSource,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchingStack {
    pub state: MatchingState,
    model: MatchingModel,
    i_star: PlanarVec,
}

#[derive(Debug, Clone, PartialEq)]
pub enum GridSide {
    Cascaded(CascadeStack),
    Matching(MatchingStack),
}

/// Speed coupling plus one of the two grid-side stacks.
#[derive(Debug, Clone, PartialEq)]
pub struct Controller {
    pub speed: SpeedCoupling,
    pub grid_side: GridSide,
    guard: Option<CurrentGuard>,
    limits: Limits,
    gains: CascadeGains,
    dt: f64,
}

impl Controller {
    /// Controller preloaded to hold the operating point.
    pub fn new(config: &SimConfig, plant: &PlantParams, op: &OperatingPoint) -> Self {
        let dt = config.dt_control;
        let ctl = &config.control;
        let gains = ctl.gains.clone();
        let limits = Limits {
            i_nom: plant.i_nom(),
            p_nom: plant.p_nom,
            vg_ref: plant.vg_nom,
            v_eps: ctl.v_eps_frac * plant.vg_nom,
            v_hold: ctl.pll.hold_below * plant.vg_nom,
            vdc_ref: plant.vdc_ref,
            w_nom: plant.w_nom,
            eta: plant.eta(),
            omega0: plant.omega0,
        };
        let mut speed = SpeedCoupling::new(&gains, plant.shaft.total_inertia(), plant.tau_nom(), dt);
        speed.preload(op.tau, plant.w_nom);
        let i = op.state.i_g;
        let grid_side = match config.scenario.control {
            ControlMode::Cascaded => {
                let (kp_dc, ki_dc) = gains.dc_gains(plant.c_total());
                let (kp, ki) = gains.current_gains(plant.lg);
                let current_loop = CurrentLoop {
                    kp,
                    ki,
                    z_g: plant.z_converter(),
                    z_v: gains.z_virtual,
                    vdc_ref: plant.vdc_ref,
                    impedance_feedback: gains.impedance_feedback,
                };
                let pll = PllState::init(op.v_g, PlanarVec::new(plant.vg_nom, 0.0), limits.v_eps, plant.omega0);
                let held = if gains.impedance_feedback { PlanarVec::ZERO } else { gains.z_virtual.apply(i) };
                let integ = rotate_back(pll.theta_pll, held) * (1.0 / ki);
                GridSide::Cascaded(CascadeStack {
                    pll,
                    dc: PiState { integ: -op.p_star / (ki_dc * plant.vdc_ref), saturated: false },
                    current: VecPiState { integ, saturated: false },
                    i_star: i,
                    kp_dc,
                    ki_dc,
                    current_loop,
                    kappa: ctl.pll.kappa,
                    dc_coupled: ctl.pll.dc_coupled,
                    source: ctl.voltage_source.resolve(config.scenario.grid),
                })
            }
            ControlMode::Matching => GridSide::Matching(MatchingStack {
                state: MatchingState::from_modulation(op.m_g),
                model: MatchingModel::new(&ctl.matching, plant.lg, plant.z_converter(), plant.eta(), plant.omega0),
                i_star: i,
            }),
        };
        let guard = match config.scenario.control {
            ControlMode::Cascaded => ctl.cascaded_guard,
            ControlMode::Matching => ctl.matching_guard,
        };
        Self { speed, grid_side, guard, limits, gains, dt }
    }

    /// The PLL, if this stack has one.
    pub fn pll(&self) -> Option<&PllState> {
        match &self.grid_side {
            GridSide::Cascaded(c) => Some(&c.pll),
            GridSide::Matching(_) => None,
        }
    }

    pub fn step(&mut self, meas: &Measurement) -> ControlOutput {
        let lim = &self.limits;
        let g = &self.gains;
        let dt = self.dt;
        let tau_m = self.speed.step(meas.w1, dc_as_speed(meas.v_dc, lim.w_nom, lim.vdc_ref), dt);
        let mut out = match &mut self.grid_side {
            GridSide::Cascaded(c) => {
                let omega_ff = if c.dc_coupled { lim.eta * meas.v_dc } else { lim.omega0 };
                let target = if meas.v_g.norm() < lim.v_hold { c.pll.v_pll } else { meas.v_g };
                // energy of the estimate that saw this measurement
                let energy = pll_energy(c.pll.v_pll, meas.v_g);
                c.pll = pll_step_cartesian(&c.pll, target, c.kappa, omega_ff, dt);
                let v_dc_star = dc_reference(c.pll.omega_pll, lim.eta);
                let (p_star, dc) = dc_voltage_step(meas.v_dc, v_dc_star, &c.dc, c.kp_dc, c.ki_dc, lim.p_nom, lim.vdc_ref, dt);
                c.dc = dc;
                let v_src = match c.source {
                    VoltageSource::Pll => c.pll.v_pll,
                    _ => meas.v_g,
                };
                let q_star = ac_voltage_step(v_src, lim.vg_ref, g.kp_v, p_star, lim.i_nom, g.projection);
                let i_star = current_reference(p_star, q_star, v_src, lim.i_nom, lim.v_eps, c.i_star);
                c.i_star = i_star;
                let (m_g, current) = current_control_step(meas.i_g, i_star, v_src, c.pll.theta_pll, &c.current, &c.current_loop, dt);
                c.current = current;
                ControlOutput { m_g, tau_m, p_star, q_star, i_star, omega_sync: c.pll.omega_pll, sync_energy: energy }
            }
            GridSide::Matching(s) => {
                let p_star = matching_power_reference(tau_m, meas.w1);
                let q_star = ac_voltage_step(meas.v_g, lim.vg_ref, g.kp_v, p_star, lim.i_nom, g.projection);
                let i_star = current_reference(p_star, q_star, meas.v_g, lim.i_nom, lim.v_eps, s.i_star);
                s.i_star = i_star;
                let (m_g, next) = matching_step(&s.state, meas.i_g, i_star, meas.v_dc, &s.model, dt);
                let omega_sync = (next.theta - s.state.theta) / dt;
                s.state = next;
                ControlOutput { m_g, tau_m, p_star, q_star, i_star, omega_sync, sync_energy: synchronization_energy(meas.i_g, i_star, s.model.lg) }
            }
        };
        if let Some(g) = &self.guard {
            let extra = g.voltage(meas.i_g, lim.i_nom);
            if extra != PlanarVec::ZERO {
                out.m_g = circular_sat(out.m_g + extra * (1.0 / lim.vdc_ref), MODULATION_LIMIT);
            }
        }
        out
    }
}

fn rotate_back(theta: f64, v: PlanarVec) -> PlanarVec {
    crate::frames::rotate(-theta, v)
}

/// Per-unit bases used in traces.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PuBases {
    pub power: f64,
    pub voltage: f64,
    pub current: f64,
    pub omega: f64,
    pub vdc: f64,
    pub speed: f64,
    pub torque: f64,
}

impl PuBases {
    pub fn new(p: &PlantParams) -> Self {
        Self { power: p.p_nom, voltage: p.vg_nom, current: p.p_nom / p.vg_nom, omega: p.omega0, vdc: p.vdc_ref, speed: p.w_nom, torque: p.tau_nom() }
    }
}

/// One recorded row.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub t: f64,
    pub i_g: PlanarVec,
    pub v_g: PlanarVec,
    pub v_dc: f64,
    pub speeds: Vec<f64>,
    pub tau_m: f64,
    pub tau_shaft: f64,
    pub p_g: f64,
    pub q_g: f64,
    pub m_g: PlanarVec,
    pub omega_sync: f64,
    pub sync_energy: f64,
    pub p_star: f64,
    pub q_star: f64,
    pub i_star: PlanarVec,
}

/// Extremes over every plant step of the run, warm-up included.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunExtremes {
    pub max_i_norm: f64,
    pub max_m_norm: f64,
    pub min_v_dc: f64,
    pub max_v_dc: f64,
}

impl Default for RunExtremes {
    fn default() -> Self {
        Self { max_i_norm: 0.0, max_m_norm: 0.0, min_v_dc: f64::INFINITY, max_v_dc: f64::NEG_INFINITY }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimTrace {
    pub scenario: ScenarioScript,
    pub bases: PuBases,
    pub i_nom: f64,
    pub tau_nom: f64,
    pub dt_sample: f64,
    pub samples: Vec<Sample>,
    pub extremes: RunExtremes,
}

impl SimTrace {
    pub fn column(&self, f: impl Fn(&Sample) -> f64) -> Vec<f64> {
        self.samples.iter().map(f).collect()
    }

    pub fn times(&self) -> Vec<f64> {
        self.column(|s| s.t)
    }

    pub fn n_masses(&self) -> usize {
        self.samples.first().map_or(0, |s| s.speeds.len())
    }

    /// Header names with units, in output order.
    pub fn header(&self) -> Vec<String> {
        let n = self.n_masses();
        let mut h: Vec<String> = ["t[s]", "i_alpha[A]", "i_beta[A]", "i_norm[A]", "v_dc[V]", "vg_alpha[V]", "vg_beta[V]", "vg_norm[V]"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        h.extend((1..=n).map(|k| format!("w{k}[rad/s]")));
        h.extend(
            [
                "tau_m[N*m]",
                "tau_shaft[N*m]",
                "p_g[W]",
                "q_g[var]",
                "m_alpha[-]",
                "m_beta[-]",
                "m_norm[-]",
                "omega_sync[rad/s]",
                "sync_energy[J]",
                "p_star[W]",
                "q_star[var]",
                "istar_alpha[A]",
                "istar_beta[A]",
                "i_norm[pu]",
                "v_dc[pu]",
                "vg_norm[pu]",
            ]
            .iter()
            .map(|s| s.to_string()),
        );
        h.extend((1..=n).map(|k| format!("w{k}[pu]")));
        h.extend(["tau_m[pu]", "tau_shaft[pu]", "p_g[pu]", "q_g[pu]", "omega_sync[pu]", "p_star[pu]", "q_star[pu]"].iter().map(|s| s.to_string()));
        h
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "{}", self.header().join(","))?;
        let b = &self.bases;
        let mut row: Vec<f64> = Vec::new();
        for s in &self.samples {
            row.clear();
            row.extend([s.t, s.i_g.x, s.i_g.y, s.i_g.norm(), s.v_dc, s.v_g.x, s.v_g.y, s.v_g.norm()]);
            row.extend(&s.speeds);
            row.extend([
                s.tau_m,
                s.tau_shaft,
                s.p_g,
                s.q_g,
                s.m_g.x,
                s.m_g.y,
                s.m_g.norm(),
                s.omega_sync,
                s.sync_energy,
                s.p_star,
                s.q_star,
                s.i_star.x,
                s.i_star.y,
                s.i_g.norm() / b.current,
                s.v_dc / b.vdc,
                s.v_g.norm() / b.voltage,
            ]);
            row.extend(s.speeds.iter().map(|w| w / b.speed));
            row.extend([
                s.tau_m / b.torque,
                s.tau_shaft / b.torque,
                s.p_g / b.power,
                s.q_g / b.power,
                s.omega_sync / b.omega,
                s.p_star / b.power,
                s.q_star / b.power,
            ]);
            let text: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(out, "{}", text.join(","))?;
        }
        Ok(())
    }
}

struct MeasurementLag {
    alpha: f64,
    last: Option<Measurement>,
}

impl MeasurementLag {
    fn filter(&mut self, raw: Measurement) -> Measurement {
        let a = self.alpha;
        let out = match self.last {
            None => raw,
            Some(p) => Measurement {
                i_g: p.i_g + (raw.i_g - p.i_g) * a,
                v_g: p.v_g + (raw.v_g - p.v_g) * a,
                v_dc: p.v_dc + a * (raw.v_dc - p.v_dc),
                w1: p.w1 + a * (raw.w1 - p.w1),
            },
        };
        self.last = Some(out);
        out
    }
}

/// Integrate one scenario from the operating point at its initial load.
pub fn run_scenario(config: &SimConfig) -> Result<SimTrace, SimError> {
    config.validate().map_err(SimError::Config)?;
    let plant = config.plant_for_run();
    let script = &config.scenario;
    let t0 = -config.warmup;
    let op = operating_point(&plant, &config.control, script.load_pu, grid_source(t0, script, &plant));
    let mut controller = Controller::new(config, &plant, &op);
    let mut lag = config.measurement_lag.map(|tau| MeasurementLag { alpha: config.dt_control / (tau + config.dt_control), last: None });

    let substeps = config.substeps();
    let dt_c = config.dt_control;
    let dt_p = dt_c / substeps as f64;
    let n_warm = (config.warmup / dt_c).round() as usize;
    let n_total = n_warm + (script.duration / dt_c).round() as usize;
    let tau_nom = plant.tau_nom();

    let mut state = op.state.clone();
    let mut extremes = RunExtremes::default();
    let mut samples = Vec::with_capacity((n_total - n_warm) / config.record_decimation + 1);

    for k in 0..=n_total {
        let t = t0 + k as f64 * dt_c;
        if !state.is_finite() {
            return Err(SimError::NonFinite { t });
        }
        let v_inf = grid_source(t, script, &plant);
        let v_g = pcc_voltage(&state, v_inf, &plant);
        let raw = Measurement { i_g: state.i_g, v_g, v_dc: state.v_dc, w1: state.shaft[0].speed };
        let meas = match &mut lag {
            Some(l) => l.filter(raw),
            None => raw,
        };
        let out = controller.step(&meas);
        if !(out.m_g.is_finite() && out.tau_m.is_finite()) {
            return Err(SimError::NonFinite { t });
        }
        extremes.max_m_norm = extremes.max_m_norm.max(out.m_g.norm());

        if k >= n_warm && (k - n_warm) % config.record_decimation == 0 {
            let (p_g, q_g) = instantaneous_power(v_g, state.i_g);
            samples.push(Sample {
                t,
                i_g: state.i_g,
                v_g,
                v_dc: state.v_dc,
                speeds: state.shaft.iter().map(|m| m.speed).collect(),
                tau_m: out.tau_m,
                tau_shaft: state.coupling_torque(&plant, 0),
                p_g,
                q_g,
                m_g: out.m_g,
                omega_sync: out.omega_sync,
                sync_energy: out.sync_energy,
                p_star: out.p_star,
                q_star: out.q_star,
                i_star: out.i_star,
            });
        }
        if k == n_total {
            break;
        }

        for j in 0..substeps {
            let ts = t + j as f64 * dt_p;
            let tau_l = load_profile(ts, script) * tau_nom;
            state = integrate::rk4(ts, &state, dt_p, |tt, s| {
                let inputs = PlantInputs { m_g: out.m_g, tau_m: out.tau_m, tau_l, v_inf: grid_source(tt, script, &plant) };
                derivative(s, &inputs, &plant)
            })
            .map_err(|source| SimError::Plant { t: ts, source })?;
            extremes.max_i_norm = extremes.max_i_norm.max(state.i_g.norm());
            extremes.min_v_dc = extremes.min_v_dc.min(state.v_dc);
            extremes.max_v_dc = extremes.max_v_dc.max(state.v_dc);
        }
    }

    Ok(SimTrace {
        scenario: script.clone(),
        bases: PuBases::new(&plant),
        i_nom: plant.i_nom(),
        tau_nom,
        dt_sample: dt_c * config.record_decimation as f64,
        samples,
        extremes,
    })
}
