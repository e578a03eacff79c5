use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use erasure_smpc::{config, experiment};

#[derive(Parser)]
#[command(name = "erasure-smpc", version, about = "Stochastic MPC over erasure channels: run configured experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write CSVs plus manifest.json into --out.
    Run {
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override a configuration key, e.g. --set paths=50.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Check a configuration without simulating.
    Validate { config: PathBuf },
}

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Validate { config } => {
            let cfg = match config::load(&config, &[]) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("{}: invalid\n{e}", config.display());
                    return ExitCode::from(EXIT_CONFIG);
                }
            };
            let v = cfg.violations();
            if v.is_empty() {
                println!("{}: valid ({} preset, {} runs)", config.display(), cfg.preset.name(), cfg.runs().len());
                ExitCode::SUCCESS
            } else {
                eprintln!("{}: invalid", config.display());
                for msg in v {
                    eprintln!("  {msg}");
                }
                ExitCode::from(EXIT_CONFIG)
            }
        }
        Command::Run { config, out, set } => {
            let cfg = match config::load(&config, &set) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("{}: invalid\n{e}", config.display());
                    return ExitCode::from(EXIT_CONFIG);
                }
            };
            let v = cfg.violations();
            if !v.is_empty() {
                eprintln!("{}: invalid", config.display());
                for msg in v {
                    eprintln!("  {msg}");
                }
                return ExitCode::from(EXIT_CONFIG);
            }
            let text = std::fs::read_to_string(&config).unwrap_or_default();
            match experiment::run(&cfg, &out, &config.display().to_string(), &text, &set) {
                Ok((manifest, _)) => {
                    println!("wrote {} runs to {} in {:.1}s", manifest.runs.len(), out.display(), manifest.total_wall_seconds);
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("run failed: {e}");
                    ExitCode::from(EXIT_RUNTIME)
                }
            }
        }
    }
}
