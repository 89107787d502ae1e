use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use drivesync::simulation::{ControlMode, ScenarioKind, SimConfig};
use drivesync::GridStrength;

mod bode;
mod plots;
mod run;
mod sweep;

pub const DEFAULT_CONFIG: &str = include_str!("../configs/default.toml");

/// Command failure, mapped onto the exit code.
#[derive(Debug)]
pub enum Failure {
    /// Bad flags or configuration, exit 2.
    Usage(String),
    /// The run itself failed, exit 1.
    Runtime(String),
}

impl Failure {
    fn io(path: &Path, e: std::io::Error) -> Self {
        Failure::Runtime(format!("{}: {e}", path.display()))
    }
}

#[derive(Parser)]
#[command(name = "drivesync", version, about = "Back-to-back drive simulator: cascaded PI versus synchronous-machine matching control")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write trace, metrics, manifest and a plot script.
    Simulate(SimulateArgs),
    /// Run every scenario × grid × controller combination.
    Sweep(SweepArgs),
    /// Frequency response of the DC link with and without the shaft coupling.
    Bode(BodeArgs),
    /// Print the default configuration file.
    Config,
}

#[derive(Args)]
struct SimulateArgs {
    /// phase-jump, 3ph-drop, freq-up, freq-down, 1ph-drop, dip or load-step.
    /// Replaces the [scenario] block of the configuration.
    #[arg(long)]
    scenario: Option<ScenarioKind>,
    /// stiff or weak
    #[arg(long)]
    grid: Option<GridStrength>,
    /// cascaded or matching
    #[arg(long)]
    control: Option<ControlMode>,
    /// Configuration file; the built-in defaults when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "drivesync-out")]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    /// Comma-separated names a run must all match, e.g. `matching` or
    /// `weak,freq-up`.
    #[arg(long, value_delimiter = ',')]
    only: Vec<String>,
    /// List the planned runs without executing them.
    #[arg(long)]
    dry_run: bool,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "drivesync-sweep")]
    out: PathBuf,
    /// Worker threads; all cores when absent.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Args)]
struct BodeArgs {
    /// `off` writes only the bare DC-link response.
    #[arg(long, value_enum, default_value = "on")]
    coupling: Switch,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "drivesync-bode")]
    out: PathBuf,
    /// Lowest frequency, Hz.
    #[arg(long, default_value_t = 0.01)]
    f_min: f64,
    /// Highest frequency, Hz.
    #[arg(long, default_value_t = 1000.0)]
    f_max: f64,
    #[arg(long, default_value_t = 400)]
    points: usize,
    /// Load torque of the operating point, p.u.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    load: f64,
}

/// Parse and validate a configuration file, or the shipped defaults.
pub fn load_config(path: Option<&Path>) -> Result<SimConfig, Failure> {
    let (text, name) = match path {
        Some(p) => (std::fs::read_to_string(p).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?, p.display().to_string()),
        None => (DEFAULT_CONFIG.to_string(), "built-in defaults".to_string()),
    };
    drivesync::config::parse_config(&text).map_err(|e| Failure::Usage(format!("{name}: {e}")))
}

fn simulate(args: SimulateArgs) -> Result<ExitCode, Failure> {
    let mut cfg = load_config(args.config.as_deref())?;
    let grid = args.grid.unwrap_or(cfg.scenario.grid);
    let control = args.control.unwrap_or(cfg.scenario.control);
    match args.scenario {
        Some(kind) => cfg.scenario = kind.script(grid, control),
        None => {
            cfg.scenario.grid = grid;
            cfg.scenario.control = control;
        }
    }
    let outcome = run::execute(&cfg, &args.out, args.config.as_deref())?;
    println!("{}", outcome.summary_line());
    println!("outputs in {}", args.out.display());
    if let Some(e) = &outcome.manifest.error {
        eprintln!("error: {e}");
    }
    for v in &outcome.manifest.violations {
        eprintln!("limit violated: {v}");
    }
    Ok(if outcome.passed() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn dispatch(cli: Cli) -> Result<ExitCode, Failure> {
    match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Sweep(a) => sweep::sweep(&sweep::SweepRequest { only: a.only, dry_run: a.dry_run, config: a.config, out: a.out, jobs: a.jobs }),
        Command::Bode(a) => bode::bode(&bode::BodeRequest {
            coupled: a.coupling == Switch::On,
            config: a.config,
            out: a.out,
            f_min: a.f_min,
            f_max: a.f_max,
            points: a.points,
            load_pu: a.load,
        }),
        Command::Config => {
            print!("{DEFAULT_CONFIG}");
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(code) => code,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_config_is_the_default() {
        assert_eq!(load_config(None).unwrap(), SimConfig::default());
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
