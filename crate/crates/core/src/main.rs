use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use discrim_distill::cli::{self, CliError};

/// Class-incremental learning experiments.
#[derive(Parser)]
#[command(name = "discrim-distill", version)]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured method for every seed.
    Run { config: PathBuf },
    /// Run several methods on identical seeds and rounds.
    Compare {
        config: PathBuf,
        /// Comma-separated method names.
        #[arg(long)]
        methods: String,
    },
    /// Sweep the number of similar old classes per new class.
    Ablate {
        config: PathBuf,
        /// Comma-separated counts, e.g. 0,1,2.
        #[arg(long = "m")]
        m_values: String,
    },
}

fn execute(command: Command) -> Result<(), CliError> {
    match command {
        Command::Run { config } => {
            let out = cli::cmd_run(&config)?;
            println!(
                "wrote {} round reports to {}",
                out.reports.len(),
                out.dir.display()
            );
        }
        Command::Compare { config, methods } => {
            let methods = cli::parse_methods(&methods)?;
            let (out, table) = cli::cmd_compare(&config, &methods)?;
            print!("{table}");
            println!("results in {}", out.dir.display());
        }
        Command::Ablate { config, m_values } => {
            let m_values = cli::parse_m_values(&m_values)?;
            let (out, rows) = cli::cmd_ablate(&config, &m_values)?;
            println!(
                "{:<8} {:>6} {:>10} {:>10}",
                "variant", "seed", "final", "average"
            );
            for r in rows {
                println!(
                    "{:<8} {:>6} {:>10.4} {:>10.4}",
                    r.variant, r.seed, r.final_accuracy, r.avg_over_rounds
                );
            }
            println!("results in {}", out.dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DISCRIM_DISTILL_LOG", "warn"))
        .init();
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match execute(args.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
