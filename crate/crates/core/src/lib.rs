//! Simulation and analysis of a grid-connected back-to-back drive whose
//! shaft inertia is coupled to the DC link and, through it, to the grid.

pub mod analysis;
pub mod cascade;
pub mod config;
pub mod frames;
pub mod integrate;
pub mod matching;
pub mod plant;
pub mod pll;
pub mod simulation;

pub use frames::{ComplexImpedance, PlanarVec, Rotation};
pub use plant::{GridStrength, PlantError, PlantInputs, PlantParams, PlantState, ShaftParams};
pub use simulation::{run_scenario, ControlMode, ScenarioKind, SimConfig, SimError, SimTrace};
