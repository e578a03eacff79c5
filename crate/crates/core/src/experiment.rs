//! Running a configured experiment and writing its artifacts.
//!
//! Layout of the output directory:
//!
//! ```text
//! <out>/manifest.json
//! <out>/summary.csv            one row per run
//! <out>/<label>/metrics.csv
//! <out>/<label>/norm_series.csv
//! <out>/<label>/trajectories.csv   (when output.trajectories = true)
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::Result;
use crate::moments::NoiseMoments;
use crate::simulator::{self, Controller, Metrics};

#[derive(Debug, Clone, Serialize)]
pub struct RunEntry {
    pub label: String,
    pub protocol: String,
    pub success_probability: f64,
    pub noise_variance: Option<f64>,
    pub wall_seconds: f64,
    pub fallbacks: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub preset: &'static str,
    pub seed: u64,
    pub config_path: String,
    pub config_sha256: String,
    pub overrides: Vec<String>,
    pub paths: usize,
    pub steps: usize,
    pub moment_samples: usize,
    pub moment_seed: u64,
    pub moment_wall_seconds: f64,
    pub runs: Vec<RunEntry>,
    pub total_wall_seconds: f64,
}

/// Outcome of one labelled run.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub label: String,
    pub protocol: String,
    pub success_probability: f64,
    pub noise_variance: Option<f64>,
    pub metrics: Metrics,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn summary_csv(results: &[RunResult]) -> String {
    let mut s = String::from("label,protocol,success_probability,noise_variance");
    let names: Vec<&str> = results.first().map(|r| r.metrics.scalars().iter().map(|(k, _)| *k).collect()).unwrap_or_default();
    for n in &names {
        let _ = write!(s, ",{n}");
    }
    s.push('\n');
    for r in results {
        let var = r.noise_variance.map(|v| format!("{v:.16e}")).unwrap_or_default();
        let _ = write!(s, "{},{},{:.16e},{}", r.label, r.protocol, r.success_probability, var);
        for (_, v) in r.metrics.scalars() {
            let _ = write!(s, ",{v:.16e}");
        }
        s.push('\n');
    }
    s
}

/// Runs every configured simulation and writes CSVs plus `manifest.json`.
/// `config_text` is hashed into the manifest; `overrides` are recorded
/// verbatim.
pub fn run(cfg: &ExperimentConfig, out: &Path, config_path: &str, config_text: &str, overrides: &[String]) -> Result<(Manifest, Vec<RunResult>)> {
    let start = Instant::now();
    fs::create_dir_all(out)?;
    let runs = cfg.runs();

    // Noise moments depend on the covariance only; estimate each once.
    let t_mom = Instant::now();
    let mut moments: BTreeMap<String, NoiseMoments> = BTreeMap::new();
    for (_, sc) in &runs {
        let key = format!("{:?}", sc.noise.covariance().as_slice());
        if !moments.contains_key(&key) {
            log::info!("estimating noise moments ({} samples)", sc.moment_samples);
            moments.insert(key, sc.estimate_noise_moments(cfg.moment_cache.as_deref())?);
        }
    }
    let moment_wall_seconds = t_mom.elapsed().as_secs_f64();

    let mut entries = Vec::new();
    let mut results = Vec::new();
    for (label, sc) in &runs {
        let t0 = Instant::now();
        let key = format!("{:?}", sc.noise.covariance().as_slice());
        let controller = Controller::design(sc, &moments[&key])?;
        let (records, metrics) = simulator::run_paths_with(&controller, sc)?;
        let dir = out.join(label);
        fs::create_dir_all(&dir)?;
        if cfg.write_trajectories {
            fs::write(dir.join("trajectories.csv"), simulator::trajectories_csv(&records))?;
        }
        fs::write(dir.join("metrics.csv"), simulator::metrics_csv(&metrics))?;
        fs::write(dir.join("norm_series.csv"), simulator::norm_series_csv(&metrics))?;
        let wall = t0.elapsed().as_secs_f64();
        log::info!("{label}: cost/stage {:.3}, msb {:.3}, {wall:.2}s", metrics.avg_cost_per_stage, metrics.empirical_msb);
        let noise_variance = cfg.sweep.as_ref().map(|_| sc.noise.covariance()[(0, 0)]);
        entries.push(RunEntry {
            label: label.clone(),
            protocol: sc.protocol.name().to_string(),
            success_probability: sc.channel.mean_success_rate(),
            noise_variance,
            wall_seconds: wall,
            fallbacks: metrics.fallbacks,
        });
        results.push(RunResult {
            label: label.clone(),
            protocol: sc.protocol.name().to_string(),
            success_probability: sc.channel.mean_success_rate(),
            noise_variance,
            metrics,
        });
    }
    fs::write(out.join("summary.csv"), summary_csv(&results))?;

    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        preset: cfg.preset.name(),
        seed: cfg.base.seed,
        config_path: config_path.to_string(),
        config_sha256: sha256_hex(config_text.as_bytes()),
        overrides: overrides.to_vec(),
        paths: cfg.base.paths,
        steps: cfg.base.steps,
        moment_samples: cfg.base.moment_samples,
        moment_seed: cfg.base.moment_seed,
        moment_wall_seconds,
        runs: entries,
        total_wall_seconds: start.elapsed().as_secs_f64(),
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| crate::error::SmpcError::Format {
        what: "manifest",
        reason: e.to_string(),
    })?;
    fs::write(out.join("manifest.json"), json + "\n")?;
    Ok((manifest, results))
}
