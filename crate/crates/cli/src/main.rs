use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fcrpeak_cli::commands::{self, SolveDayArgs};
use fcrpeak_cli::{CliError, RunConfig};

#[derive(Parser)]
#[command(name = "fcrpeak", version, about = "Battery FCR bidding combined with monthly peak shaving")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config worker count.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct DayArgs {
    /// Per-site monthly peak so far (MW), comma separated.
    #[arg(long, value_delimiter = ',')]
    state: Option<Vec<f64>>,
    /// Per-site value-function files; the end-of-month charge if absent.
    #[arg(long, value_delimiter = ',')]
    values: Vec<PathBuf>,
    /// Day whose value functions are read from `--values` (1-based).
    #[arg(long, default_value_t = 1)]
    day: usize,
}

impl DayArgs {
    fn into_args(self) -> SolveDayArgs {
        SolveDayArgs {
            state: self.state,
            values: self.values,
            day: self.day,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Solves one day's co-optimisation problem.
    SolveDay {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        day: DayArgs,
    },
    /// Computes value functions and simulates months of all strategies.
    RunMonth {
        #[command(flatten)]
        common: Common,
    },
    /// Tunes the rule-based controllers for one day.
    Tune {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        day: DayArgs,
    },
    /// Reduces scenario sets under both costs and reports the bias.
    Reduce {
        #[command(flatten)]
        common: Common,
    },
    /// Solves the FCR-only problem and checks it by Monte Carlo.
    FcrOnly {
        #[command(flatten)]
        common: Common,
        /// Simulated days for the violation check (0 skips it).
        #[arg(long, default_value_t = 1000)]
        mc_days: usize,
    },
    /// Prints a report CSV as a table.
    Report {
        /// Report file; defaults to `report.csv` in the output directory.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

struct Ctx {
    cfg: RunConfig,
    seed: u64,
    out: PathBuf,
}

fn setup(c: Common) -> Result<Ctx, CliError> {
    let mut cfg = RunConfig::load(&c.config)?;
    if let Some(w) = c.workers {
        if w == 0 {
            return Err(CliError::Config("--workers: must be positive".into()));
        }
        cfg.workers = w;
    }
    // the global pool can only be built once per process
    let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.workers).build_global();
    Ok(Ctx {
        seed: c.seed.unwrap_or(cfg.seed),
        out: c.out.unwrap_or_else(|| cfg.out_dir.clone()),
        cfg,
    })
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::SolveDay { common, day } => {
            let c = setup(common)?;
            let r = commands::solve_day(&c.cfg, c.seed, &c.out, &day.into_args())?;
            println!("r_agg {r:.4} MW, files in {}", c.out.display());
        }
        Command::RunMonth { common } => {
            let c = setup(common)?;
            commands::run_month(&c.cfg, c.seed, &c.out)?;
            print!("{}", commands::render_report(&c.out.join("report.csv"))?);
        }
        Command::Tune { common, day } => {
            let c = setup(common)?;
            commands::tune(&c.cfg, c.seed, &c.out, &day.into_args())?;
            print!("{}", commands::render_report(&c.out.join("tune.csv"))?);
        }
        Command::Reduce { common } => {
            let c = setup(common)?;
            commands::reduce(&c.cfg, c.seed, &c.out)?;
            print!("{}", commands::render_report(&c.out.join("bias.csv"))?);
        }
        Command::FcrOnly { common, mc_days } => {
            let c = setup(common)?;
            let r = commands::fcr_only(&c.cfg, c.seed, &c.out, mc_days)?;
            println!("r {r:.4} MW, files in {}", c.out.display());
        }
        Command::Report { input, config, out } => {
            let path = match (input, out, config) {
                (Some(p), _, _) => p,
                (None, Some(o), _) => o.join("report.csv"),
                (None, None, Some(cfg)) => RunConfig::load(&cfg)?.out_dir.join("report.csv"),
                (None, None, None) => return Err(CliError::Config("report: give --input, --out or --config".into())),
            };
            print!("{}", commands::render_report(&path)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
