use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ridgemc::experiments::{catalog, load_config, run_experiment, ExperimentConfig, ExperimentId};
use ridgemc::Error;

#[derive(Parser)]
#[command(name = "ridgemc", version, about = "RWM laboratory for two-scale ridged densities")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its artifacts plus manifest.json
    Run {
        experiment: String,
        /// JSON config; unset fields take the experiment's defaults
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, env = "RIDGEMC_OUTPUT_DIR")]
        output_dir: Option<PathBuf>,
        #[arg(long)]
        threads: Option<usize>,
        /// Exit with status 4 if any tolerance check fails
        #[arg(long)]
        check: bool,
    },
    /// Print the experiment catalogue
    ListExperiments,
}

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;
const EXIT_CHECK: u8 = 4;

fn exit_code(e: &Error) -> u8 {
    match e.root() {
        Error::Config { .. } => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

fn fmt_value(v: f64) -> String {
    if v == 0.0 || (1e-3..1e6).contains(&v.abs()) {
        format!("{v:.6}")
    } else {
        format!("{v:.3e}")
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::ListExperiments => {
            for line in catalog() {
                println!("{line}");
            }
            ExitCode::SUCCESS
        }
        Command::Run {
            experiment,
            config,
            seed,
            output_dir,
            threads,
            check,
        } => {
            let run = || -> Result<bool, Error> {
                let id: ExperimentId = experiment.parse()?;
                let mut cfg = match &config {
                    Some(p) => load_config(p)?,
                    None => ExperimentConfig::default(),
                };
                if seed.is_some() {
                    cfg.seed = seed;
                }
                if threads.is_some() {
                    cfg.threads = threads;
                }
                let dir = output_dir
                    .clone()
                    .or_else(|| cfg.output_dir.clone())
                    .unwrap_or_else(|| PathBuf::from("runs").join(id.name()));
                let m = run_experiment(id, cfg, &dir)?;
                for c in &m.checks {
                    println!(
                        "[{}] criterion {:>2} {}: {} (expected {})",
                        if c.pass { "PASS" } else { "FAIL" },
                        c.criterion,
                        c.name,
                        fmt_value(c.value),
                        c.expected
                    );
                }
                if let Some(tag) = &m.tag {
                    println!("tag: {tag}");
                }
                println!("wrote {} artifacts and manifest.json to {}", m.artifacts.len(), dir.display());
                Ok(m.all_pass())
            };
            match run() {
                Ok(true) => ExitCode::SUCCESS,
                Ok(false) if check => ExitCode::from(EXIT_CHECK),
                Ok(false) => ExitCode::SUCCESS,
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(exit_code(&e))
                }
            }
        }
    }
}
