//! Shared fixtures for the benchmarks.

use drivesync::plant::{PlantInputs, PlantParams, PlantState};
use drivesync::simulation::{operating_point, ControlConfig, ControlMode, ScenarioKind, SimConfig};
use drivesync::{GridStrength, PlanarVec};

/// Preset shortened to `seconds` after a short warm-up.
pub fn short_run(kind: ScenarioKind, grid: GridStrength, control: ControlMode, seconds: f64) -> SimConfig {
    let mut cfg = SimConfig::preset(kind, grid, control);
    cfg.warmup = 0.2;
    cfg.scenario.duration = seconds;
    cfg
}

/// Plant state and inputs at the rated generating operating point.
pub fn equilibrium() -> (PlantParams, PlantState, PlantInputs) {
    let plant = PlantParams::default();
    let v_inf = PlanarVec::new(plant.vg_nom, 0.0);
    let op = operating_point(&plant, &ControlConfig::default(), -0.5, v_inf);
    let inputs = PlantInputs { m_g: op.m_g, tau_m: op.tau, tau_l: op.tau, v_inf };
    (plant, op.state, inputs)
}
