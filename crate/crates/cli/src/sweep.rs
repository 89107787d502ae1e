use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use drivesync::simulation::{sweep_plan, ControlMode, ScenarioKind};
use drivesync::GridStrength;
use rayon::prelude::*;

use crate::run::{execute, RunOutcome};
use crate::{load_config, Failure};

pub struct SweepRequest {
    pub only: Vec<String>,
    pub dry_run: bool,
    pub config: Option<PathBuf>,
    pub out: PathBuf,
    pub jobs: Option<usize>,
}

type Combo = (ScenarioKind, GridStrength, ControlMode);

fn names(c: &Combo) -> [&'static str; 3] {
    [c.0.name(), c.1.name(), c.2.name()]
}

pub fn run_dir_name(c: &Combo) -> String {
    names(c).join("_")
}

/// Plan entries matching every filter token.
pub fn filtered_plan(only: &[String]) -> Result<Vec<Combo>, Failure> {
    let plan = sweep_plan();
    let tokens: Vec<&str> = only.iter().map(|s| s.trim()).filter(|s| !s.is_empty()).collect();
    if let Some(bad) = tokens.iter().find(|t| !plan.iter().any(|c| names(c).contains(t))) {
        return Err(Failure::Usage(format!("--only: `{bad}` is not a scenario, grid or controller name")));
    }
    Ok(plan.into_iter().filter(|c| tokens.iter().all(|t| names(c).contains(t))).collect())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

fn table(plan: &[Combo], outcomes: &[RunOutcome]) -> String {
    let mut s = String::from(
        "scenario,grid,control,status,max_i_pu,max_m,min_vdc_pu,max_vdc_pu,vdc_overshoot_pct,settling_s,resync_s,vdc_h2_rms_pu,runtime_s\n",
    );
    for (c, o) in plan.iter().zip(outcomes) {
        let [k, g, ctl] = names(c);
        let _ = write!(s, "{k},{g},{ctl},{}", o.manifest.status);
        match &o.metrics {
            Some(m) => {
                let _ = write!(
                    s,
                    ",{:.4},{:.4},{:.4},{:.4},{:.3},{},{},{}",
                    m.max_i_pu,
                    m.max_m,
                    m.min_v_dc_pu,
                    m.max_v_dc_pu,
                    m.v_dc_overshoot_pct,
                    fmt_opt(m.settling.first().map(|x| x.1)),
                    fmt_opt(m.resync_time),
                    fmt_opt(m.v_dc_second_harmonic_pu)
                );
            }
            None => s.push_str(",-,-,-,-,-,-,-,-"),
        }
        let _ = writeln!(s, ",{:.2}", o.manifest.runtime_s);
    }
    s
}

fn print_table(csv: &str) {
    let rows: Vec<Vec<&str>> = csv.lines().map(|l| l.split(',').collect()).collect();
    let widths: Vec<usize> = (0..rows[0].len()).map(|k| rows.iter().map(|r| r[k].len()).max().unwrap_or(0)).collect();
    for r in &rows {
        let line: Vec<String> = r.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        println!("{}", line.join("  ").trim_end());
    }
}

pub fn sweep(req: &SweepRequest) -> Result<ExitCode, Failure> {
    let base = load_config(req.config.as_deref())?;
    let plan = filtered_plan(&req.only)?;
    if req.dry_run {
        for c in &plan {
            println!("{}", req.out.join(run_dir_name(c)).display());
        }
        println!("{} runs planned", plan.len());
        return Ok(ExitCode::SUCCESS);
    }
    let pool =
        rayon::ThreadPoolBuilder::new().num_threads(req.jobs.unwrap_or(0)).build().map_err(|e| Failure::Runtime(format!("worker pool: {e}")))?;
    fs::create_dir_all(&req.out).map_err(|e| Failure::io(&req.out, e))?;

    let clock = Instant::now();
    let results: Vec<Result<RunOutcome, Failure>> = pool.install(|| {
        plan.par_iter()
            .map(|c| {
                let mut cfg = base.clone();
                cfg.scenario = c.0.script(c.1, c.2);
                let r = execute(&cfg, &req.out.join(run_dir_name(c)), req.config.as_deref());
                if let Ok(o) = &r {
                    eprintln!("{}", o.summary_line());
                }
                r
            })
            .collect()
    });
    let outcomes = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let wall = clock.elapsed().as_secs_f64();

    let csv = table(&plan, &outcomes);
    let path = req.out.join("summary.csv");
    fs::write(&path, &csv).map_err(|e| Failure::io(&path, e))?;
    print_table(&csv);

    let failed: Vec<&RunOutcome> = outcomes.iter().filter(|o| !o.passed()).collect();
    for o in &failed {
        let m = &o.manifest;
        let why = m.error.clone().unwrap_or_else(|| m.violations.join("; "));
        println!("FAIL {} {} {}: {why}", m.scenario, m.grid, m.control);
    }
    println!("{} of {} runs pass, {wall:.1} s, summary in {}", outcomes.len() - failed.len(), outcomes.len(), path.display());
    Ok(if failed.is_empty() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}
