use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use drivesync::analysis::{bode_csv, effective_capacitance, frequency_response, linearize, log_frequencies, LinearModel, LinearizeOptions};
use drivesync::plant::torsional_frequencies;

use crate::{load_config, plots, Failure};

pub struct BodeRequest {
    pub coupled: bool,
    pub config: Option<PathBuf>,
    pub out: PathBuf,
    pub f_min: f64,
    pub f_max: f64,
    pub points: usize,
    pub load_pu: f64,
}

pub fn bode(req: &BodeRequest) -> Result<ExitCode, Failure> {
    if !(req.f_min > 0.0 && req.f_max > req.f_min && req.points >= 2) {
        return Err(Failure::Usage(format!(
            "need 0 < f-min < f-max and at least 2 points, got {} .. {} Hz, {} points",
            req.f_min, req.f_max, req.points
        )));
    }
    let cfg = load_config(req.config.as_deref())?;
    let plant = cfg.plant_for_run();
    let gains = &cfg.control.gains;
    let freqs = log_frequencies(req.f_min, req.f_max, req.points);
    fs::create_dir_all(&req.out).map_err(|e| Failure::io(&req.out, e))?;

    let mut cases = vec![("uncoupled", false)];
    if req.coupled {
        cases.push(("coupled", true));
    }
    let mut written = Vec::new();
    let mut models: Vec<(&str, LinearModel)> = Vec::new();
    for (name, coupled) in cases {
        let opts = LinearizeOptions { coupled, dc_loop: false, load_pu: req.load_pu };
        let model = linearize(&plant, gains, opts).map_err(|e| Failure::Runtime(format!("{name}: {e}")))?;
        let file = format!("{name}.csv");
        let path = req.out.join(&file);
        fs::write(&path, bode_csv(&frequency_response(&model, &freqs))).map_err(|e| Failure::io(&path, e))?;
        written.push(file);
        models.push((name, model));
    }
    let refs: Vec<&str> = written.iter().map(String::as_str).collect();
    let script = req.out.join("plot_bode.py");
    fs::write(&script, plots::bode_script(&refs)).map_err(|e| Failure::io(&script, e))?;

    println!("C_dc {:.4e} F, C_tot {:.4e} F (ratio {:.0})", plant.cdc, plant.c_total(), plant.c_total() / plant.cdc);
    for (name, model) in &models {
        let c = effective_capacitance(model, req.f_min).unwrap_or(f64::NAN);
        println!("{name}: capacitance seen at {} Hz {:.4e} F ({:.1} x C_dc)", req.f_min, c, c / plant.cdc);
        if *name == "coupled" {
            let modes = torsional_frequencies(&plant);
            let zeros: Vec<String> = model
                .transmission_zeros()
                .map_err(|e| Failure::Runtime(e.to_string()))?
                .iter()
                .filter(|z| z.im > 0.0)
                .map(|z| format!("{:.2}", z.norm() / std::f64::consts::TAU))
                .collect();
            let modes: Vec<String> = modes.iter().map(|f| format!("{f:.2}")).collect();
            println!("coupled: antiresonances [{}] Hz, torsional modes [{}] Hz", zeros.join(", "), modes.join(", "));
        }
    }
    println!("outputs in {}", req.out.display());
    Ok(ExitCode::SUCCESS)
}
