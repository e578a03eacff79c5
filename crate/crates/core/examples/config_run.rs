//! Load a configuration file, apply overrides and write the experiment
//! artifacts, as the command-line tool does.
//!
//! ```text
//! cargo run --release --example config_run -- configs/custom.toml /tmp/out paths=20
//! ```

use std::path::PathBuf;

use erasure_smpc::{config, experiment};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let path = PathBuf::from(args.next().unwrap_or_else(|| "configs/custom.toml".into()));
    let out = PathBuf::from(args.next().unwrap_or_else(|| "target/example-out".into()));
    let overrides: Vec<String> = args.collect();

    let cfg = config::load(&path, &overrides)?;
    for key in ["preset", "paths", "steps", "channel.kind", "protocols"] {
        if let Some(v) = cfg.resolved.get(key) {
            println!("{key} = {v}");
        }
    }
    let text = std::fs::read_to_string(&path)?;
    let (manifest, results) = experiment::run(&cfg, &out, &path.display().to_string(), &text, &overrides)?;
    for r in &results {
        println!("{:<24} cost/stage {:10.3}  msb {:10.3}", r.label, r.metrics.avg_cost_per_stage, r.metrics.empirical_msb);
    }
    println!("wrote {} runs to {} ({:.1} s)", manifest.runs.len(), out.display(), manifest.total_wall_seconds);
    Ok(())
}
