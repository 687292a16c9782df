use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lgm_cmprsk::commands::{self, Flags};
use lgm_cmprsk::config::RunConfig;
use lgm_cmprsk::CliError;

#[derive(Parser)]
#[command(name = "lgm-cmprsk", version, about = "Competing-risks joint models fitted by nested Laplace approximation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (default: `[output] dir`, else the current directory).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for the hyperparameter grid.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Divide every time by the largest time before fitting.
    #[arg(long, global = true)]
    rescale_time: bool,
    /// Simulate with the published script's cause-first generator.
    #[arg(long, global = true)]
    legacy_appendix: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Write longitudinal.csv, survival.csv and truth.json.
    Simulate,
    /// Fit the configured model and write summary.json, latent.csv, hyper.csv and curves.csv.
    Fit,
    /// Simulate, fit and compare with the truth for each configured seed.
    Check,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let config = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None if matches!(cli.command, Command::Check) => RunConfig::default(),
        None => return Err(CliError::Usage(String::from("--config <path> is required"))),
    };
    let flags = Flags {
        out: cli.out,
        threads: cli.threads,
        rescale_time: cli.rescale_time,
        legacy_appendix: cli.legacy_appendix,
    };
    match cli.command {
        Command::Simulate => {
            for p in commands::simulate(&config, &flags)? {
                println!("wrote {}", p.display());
            }
        }
        Command::Fit => {
            for p in commands::fit(&config, &flags)? {
                println!("wrote {}", p.display());
            }
        }
        Command::Check => {
            let v = commands::check(&config, &flags)?;
            for s in &v.seeds {
                println!(
                    "seed {:>4}: covered {}/{}  points {}  signs {}",
                    s.seed,
                    s.covered,
                    s.parameters.len(),
                    if s.points_ok { "ok" } else { "FAIL" },
                    if s.signs_ok { "ok" } else { "FAIL" },
                );
            }
            for (name, (hit, total)) in &v.coverage {
                println!("coverage {name:<20} {hit}/{total}");
            }
            for (name, pass) in &v.criteria {
                println!("{:<18} {}", name, if *pass { "pass" } else { "FAIL" });
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
