use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use pretrust::simulator::{
    audit_snapshot, run_scenario, SimConfig, Snapshot, SCENARIO_NAMES,
};

#[derive(Parser)]
#[command(name = "pretrust", version, about = "Off-chain guaranteed-payment network simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario from a JSON config and emit metrics as JSON lines.
    Run {
        /// Path to a JSON document matching the simulator config.
        #[arg(long)]
        config: PathBuf,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Metrics destination; `-` writes to standard output.
        #[arg(long, default_value = "-")]
        out: String,
        /// Also write a final-state snapshot for `audit`.
        #[arg(long)]
        snapshot: Option<PathBuf>,
    },
    /// List the built-in scenario names.
    Scenarios,
    /// Re-run conservation and chain-integrity checks on a snapshot.
    Audit {
        /// Path to a snapshot produced by `run --snapshot`.
        #[arg(long)]
        state: PathBuf,
    },
}

fn init_logging() {
    let level = match std::env::var("PRETRUST_LOG").as_deref() {
        Ok("info") => log::LevelFilter::Info,
        Ok("trace") => log::LevelFilter::Trace,
        _ => log::LevelFilter::Off, // quiet
    };
    env_logger::Builder::new().filter_level(level).init();
}

fn run_command(command: Command) -> Result<(), (u8, String)> {
    match command {
        Command::Run {
            config,
            seed,
            out,
            snapshot,
        } => {
            let raw = fs::read_to_string(&config)
                .map_err(|e| (2, format!("cannot read config {}: {e}", config.display())))?;
            let mut cfg: SimConfig = serde_json::from_str(&raw)
                .map_err(|e| (2, format!("invalid config {}: {e}", config.display())))?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            log::info!("running scenario {} with seed {}", cfg.scenario.name(), cfg.seed);
            let params = cfg.params.clone();
            let output = run_scenario(cfg).map_err(|e| (1, e.to_string()))?;
            let lines = output.metrics.to_json_lines();
            if out == "-" {
                std::io::stdout()
                    .write_all(lines.as_bytes())
                    .map_err(|e| (2, format!("cannot write to stdout: {e}")))?;
            } else {
                fs::write(&out, lines).map_err(|e| (2, format!("cannot write {out}: {e}")))?;
            }
            if let Some(path) = snapshot {
                let snap = output.snapshot_with_params(&params);
                let json = serde_json::to_string(&snap).expect("serializable snapshot");
                fs::write(&path, json)
                    .map_err(|e| (2, format!("cannot write {}: {e}", path.display())))?;
            }
            Ok(())
        }
        Command::Scenarios => {
            for name in SCENARIO_NAMES {
                println!("{name}");
            }
            Ok(())
        }
        Command::Audit { state } => {
            let raw = fs::read_to_string(&state)
                .map_err(|e| (2, format!("cannot read snapshot {}: {e}", state.display())))?;
            let snapshot: Snapshot = serde_json::from_str(&raw)
                .map_err(|e| (2, format!("invalid snapshot {}: {e}", state.display())))?;
            audit_snapshot(&snapshot).map_err(|e| (1, format!("audit failed: {e}")))?;
            println!("audit PASS");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    init_logging();
    let cli = Cli::parse();
    match run_command(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err((code, message)) => {
            eprintln!("error: {message}");
            ExitCode::from(code)
        }
    }
}
