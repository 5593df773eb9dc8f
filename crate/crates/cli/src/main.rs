use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use raptr_lab::runner::{self, exit_code};
use raptr_lab::LabError;

#[derive(Parser)]
#[command(name = "raptr-lab", version, about = "Progressive-subnetwork training experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a JSON config.
    Run {
        config: PathBuf,
        /// Write artifacts here instead of the config's output_dir.
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Tabulate final losses and component errors of completed runs.
    Compare {
        #[arg(required = true, num_args = 2..)]
        dirs: Vec<PathBuf>,
        /// Also write the table to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Gradient checks, shared-base equivalence and scaling invariants.
    Selftest,
}

fn fail(err: LabError) -> ExitCode {
    eprintln!("error: {err}");
    ExitCode::from(exit_code(&err) as u8)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config, output_dir } => match runner::run_path(&config, output_dir) {
            Ok(report) => {
                for line in &report.lines {
                    println!("{line}");
                }
                println!("artifacts in {}", report.output_dir.display());
                ExitCode::SUCCESS
            }
            Err(e) => fail(e),
        },
        Command::Compare { dirs, out } => match runner::compare(&dirs) {
            Ok((_, table)) => {
                print!("{table}");
                if let Some(path) = out {
                    if let Err(e) = std::fs::write(&path, &table) {
                        return fail(e.into());
                    }
                }
                ExitCode::SUCCESS
            }
            Err(e) => fail(e),
        },
        Command::Selftest => match runner::selftest() {
            Ok(checks) => {
                let mut ok = true;
                for c in &checks {
                    let verdict = if c.passed() { "PASS" } else { "FAIL" };
                    println!("{verdict} {}: {:.3e} (limit {:.0e})", c.name, c.value, c.threshold);
                    ok &= c.passed();
                }
                if ok {
                    ExitCode::SUCCESS
                } else {
                    ExitCode::from(runner::EXIT_OTHER as u8)
                }
            }
            Err(e) => fail(e),
        },
    }
}
