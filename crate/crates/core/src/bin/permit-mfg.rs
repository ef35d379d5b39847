use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use permit_mfg::cli::{self, ExitStatus, Outcome};

#[derive(Parser)]
#[command(
    name = "permit-mfg",
    version,
    about = "Emission-permit mean field game solver"
)]
struct Args {
    /// TOML configuration; defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve one equilibrium.
    Equilibrium,
    /// Solve one equilibrium per price level.
    SweepPrice {
        /// Price levels (`price` or `s_max`, depending on the schedule).
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Grid-refinement study on N = K = 2^n.
    Converge {
        #[arg(long, default_value_t = 4)]
        n_min: u32,
        #[arg(long, default_value_t = 8)]
        n_max: u32,
        #[arg(long, default_value_t = 9)]
        n_ref: u32,
    },
    /// Particle simulation against the PDE density.
    ValidateMc {
        /// Overrides `validation.particles`.
        #[arg(long)]
        particles: Option<usize>,
        /// Overrides `validation.seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn main() -> ExitCode {
    cli::init_logging();
    let args = Args::parse();
    let result = cli::load_config(args.config.as_deref()).and_then(|cfg| match args.command {
        Command::Equilibrium => cli::cmd_equilibrium(&cfg, &args.out),
        Command::SweepPrice { values, jobs } => {
            cli::cmd_sweep_price(&cfg, &values, jobs, &args.out)
        }
        Command::Converge {
            n_min,
            n_max,
            n_ref,
        } => cli::cmd_converge(&cfg, n_min, n_max, n_ref, &args.out),
        Command::ValidateMc { particles, seed } => cli::cmd_validate_mc(
            &cfg,
            particles.unwrap_or(cfg.validation.particles),
            seed.unwrap_or(cfg.validation.seed),
            &args.out,
        ),
    });
    let status = match result {
        Ok(Outcome { status, messages }) => {
            for line in messages {
                println!("{line}");
            }
            status
        }
        Err(e) => {
            eprintln!("error: {e}");
            cli::exit_status_of(&e)
        }
    };
    if status != ExitStatus::Success && status != ExitStatus::Usage {
        eprintln!("exit status {}", status.code());
    }
    ExitCode::from(status.code() as u8)
}
