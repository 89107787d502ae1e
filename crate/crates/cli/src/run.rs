//! One run: effective config, trace, metrics, plot script and manifest in
//! one directory.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use drivesync::analysis::{limit_violations, trace_metrics, TraceMetrics};
use drivesync::config::to_toml;
use drivesync::simulation::{run_scenario, SimConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{plots, Failure};

pub const CONFIG_FILE: &str = "config.toml";
pub const TRACE_FILE: &str = "trace.csv";
pub const METRICS_FILE: &str = "metrics.txt";
pub const PLOT_FILE: &str = "plot_trace.py";
pub const MANIFEST_FILE: &str = "manifest.toml";

/// Provenance record written next to every run's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub scenario: String,
    pub grid: String,
    pub control: String,
    /// Effective configuration, relative to the manifest.
    pub config: String,
    /// SHA-256 of the bytes of `config`.
    pub config_sha256: String,
    /// File the configuration was loaded from, if any.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub source_config: Option<String>,
    pub outputs: Vec<String>,
    pub runtime_s: f64,
    /// `pass`, `fail` (limits violated) or `error` (the run aborted).
    pub status: String,
    pub violations: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

pub struct RunOutcome {
    pub manifest: RunManifest,
    pub metrics: Option<TraceMetrics>,
}

impl RunOutcome {
    pub fn passed(&self) -> bool {
        self.manifest.status == "pass"
    }

    pub fn summary_line(&self) -> String {
        let m = &self.manifest;
        format!("{} {} {}: {} ({:.2} s)", m.scenario, m.grid, m.control, m.status, m.runtime_s)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    fs::write(path, bytes).map_err(|e| Failure::io(path, e))
}

/// Run `cfg` and write everything into `dir`. Simulation errors end up in
/// the manifest; only I/O problems are returned as errors.
pub fn execute(cfg: &SimConfig, dir: &Path, source: Option<&Path>) -> Result<RunOutcome, Failure> {
    fs::create_dir_all(dir).map_err(|e| Failure::io(dir, e))?;
    let text = to_toml(cfg).map_err(|e| Failure::Runtime(e.to_string()))?;
    write_file(&dir.join(CONFIG_FILE), text.as_bytes())?;

    let clock = Instant::now();
    let result = run_scenario(cfg);
    let runtime_s = clock.elapsed().as_secs_f64();

    let mut outputs = vec![CONFIG_FILE.to_string()];
    let (status, violations, error, metrics) = match result {
        Ok(trace) => {
            let path = dir.join(TRACE_FILE);
            let file = File::create(&path).map_err(|e| Failure::io(&path, e))?;
            let mut w = BufWriter::new(file);
            trace.write_csv(&mut w).and_then(|_| w.flush()).map_err(|e| Failure::io(&path, e))?;

            let metrics = trace_metrics(&trace);
            let violations = limit_violations(&trace);
            let mut kv = metrics.to_key_values();
            kv.push_str(&format!("limits_ok = {}\n", violations.is_empty()));
            write_file(&dir.join(METRICS_FILE), kv.as_bytes())?;
            write_file(
                &dir.join(PLOT_FILE),
                plots::trace_script(
                    TRACE_FILE,
                    &format!("{} / {} grid / {}", cfg.scenario.name, cfg.scenario.grid.name(), cfg.scenario.control.name()),
                )
                .as_bytes(),
            )?;
            outputs.extend([TRACE_FILE, METRICS_FILE, PLOT_FILE].map(String::from));
            let status = if violations.is_empty() { "pass" } else { "fail" };
            (status, violations, None, Some(metrics))
        }
        Err(e) => ("error", Vec::new(), Some(e.to_string()), None),
    };

    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        scenario: cfg.scenario.name.clone(),
        grid: cfg.scenario.grid.name().to_string(),
        control: cfg.scenario.control.name().to_string(),
        config: CONFIG_FILE.to_string(),
        config_sha256: sha256_hex(text.as_bytes()),
        source_config: source.map(|p| p.display().to_string()),
        outputs,
        runtime_s,
        status: status.to_string(),
        violations,
        error,
    };
    let body = toml::to_string(&manifest).map_err(|e| Failure::Runtime(e.to_string()))?;
    write_file(&dir.join(MANIFEST_FILE), body.as_bytes())?;
    Ok(RunOutcome { manifest, metrics })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_matches_known_vector() {
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }

    #[test]
    fn manifest_round_trips() {
        let m = RunManifest {
            tool_version: "0.1.0".into(),
            scenario: "dip".into(),
            grid: "weak".into(),
            control: "matching".into(),
            config: CONFIG_FILE.into(),
            config_sha256: sha256_hex(b""),
            source_config: None,
            outputs: vec![CONFIG_FILE.into()],
            runtime_s: 1.5,
            status: "error".into(),
            violations: vec![],
            error: Some("non-finite state".into()),
        };
        let back: RunManifest = toml::from_str(&toml::to_string(&m).unwrap()).unwrap();
        assert_eq!(back, m);
    }
}
