use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use mortsurf::commands::{
    derive_command, fit_command, grid_command, simulate_command, validate_command, DeriveOptions,
    DeriveWhat,
};
use mortsurf::inference::SignificanceRule;
use mortsurf::Error;

#[derive(Parser)]
#[command(
    name = "mortsurf",
    version,
    about = "Small-area mortality surfaces by age, area and year"
)]
struct Cli {
    /// Worker threads; overrides `workers` in the config.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the model and write a model artifact.
    Fit { config: PathBuf },
    /// Search the smoothing-parameter grids.
    Grid { config: PathBuf },
    /// Derive life expectancy, dissimilarity, change or significance tables.
    Derive {
        artifact: PathBuf,
        #[arg(value_enum)]
        what: What,
        /// Comma-separated years.
        #[arg(long, value_delimiter = ',')]
        years: Option<Vec<i32>>,
        #[arg(long)]
        from: Option<i32>,
        #[arg(long)]
        to: Option<i32>,
        #[arg(long)]
        level: Option<f64>,
        #[arg(long)]
        draws: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        rule: Option<Rule>,
        /// Output directory; defaults to the artifact's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare grouped model life expectancy with direct estimates.
    Validate {
        artifact: PathBuf,
        grouping: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate synthetic data from the config's scenario.
    Simulate { config: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum What {
    E0,
    Id,
    Change,
    Significance,
}

#[derive(Clone, Copy, ValueEnum)]
enum Rule {
    Overlap,
    Difference,
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Fit { config } => {
            let summary = fit_command(&config, cli.workers)?;
            println!("{summary}");
        }
        Command::Grid { config } => {
            let best = grid_command(&config, cli.workers)?;
            println!(
                "best: lambda_a={} lambda_t={} lambda_lon={} lambda_lat={} lambda_a_reduced={} kappa={}",
                best.lambda_a, best.lambda_t, best.lambda_lon, best.lambda_lat, best.lambda_a_reduced, best.kappa
            );
        }
        Command::Derive {
            artifact,
            what,
            years,
            from,
            to,
            level,
            draws,
            seed,
            rule,
            out,
        } => {
            let what = match what {
                What::E0 => DeriveWhat::E0,
                What::Id => DeriveWhat::Id,
                What::Change => DeriveWhat::Change,
                What::Significance => DeriveWhat::Significance,
            };
            let opts = DeriveOptions {
                years,
                from,
                to,
                level,
                draws,
                seed,
                rule: rule.map(|r| match r {
                    Rule::Overlap => SignificanceRule::Overlap,
                    Rule::Difference => SignificanceRule::Difference,
                }),
                out,
                workers: cli.workers,
            };
            for p in derive_command(&artifact, what, &opts)? {
                println!("wrote {}", p.display());
            }
        }
        Command::Validate {
            artifact,
            grouping,
            out,
        } => {
            let p = validate_command(&artifact, &grouping, out.as_deref())?;
            println!("wrote {}", p.display());
        }
        Command::Simulate { config } => {
            for p in simulate_command(&config)? {
                println!("wrote {}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
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
