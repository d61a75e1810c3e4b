use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use selfconf::commands;
use selfconf::config::{load, CliOverrides};
use selfconf::error::{CliError, CliResult};

#[derive(Parser)]
#[command(name = "selfconf", version, about = "Self-confidence post-training experiments on toy flow models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML config file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `experiment.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides `experiment.out_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// `key=value` with a dotted config key; repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the base velocity model with the rectified-flow loss.
    Pretrain {
        #[command(flatten)]
        common: Common,
    },
    /// Post-train low-rank adapters with self-confidence rewards.
    Posttrain {
        #[command(flatten)]
        common: Common,
        /// Pretrained checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Score one sampled group per condition.
    Score {
        #[command(flatten)]
        common: Common,
        /// Pretrained checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run the analytic and finite-difference checks.
    Oracle {
        #[command(flatten)]
        common: Common,
        /// Also check gradients at these weights.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Compare self-confidence across sampling regimes.
    Rationale {
        #[command(flatten)]
        common: Common,
        /// Pretrained checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run the collapse arms and the detector.
    Collapse {
        #[command(flatten)]
        common: Common,
        /// Pretrained checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Vary one setting at a time.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Pretrained checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// TOML mapping dotted keys to arrays of values.
        #[arg(long)]
        matrix: Option<PathBuf>,
    },
    /// Summarize one or two run directories.
    Report {
        #[command(flatten)]
        common: Common,
        /// Run directories; two are compared side by side.
        #[arg(required = true, num_args = 1..=2)]
        runs: Vec<PathBuf>,
    },
    /// Pretrain and post-train over several seeds and compare accuracy.
    Efficacy {
        #[command(flatten)]
        common: Common,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
    },
}

fn print<T: serde::Serialize>(value: &T) -> CliResult<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn execute(command: Command) -> CliResult<()> {
    let common = match &command {
        Command::Pretrain { common }
        | Command::Posttrain { common, .. }
        | Command::Score { common, .. }
        | Command::Oracle { common, .. }
        | Command::Rationale { common, .. }
        | Command::Collapse { common, .. }
        | Command::Ablate { common, .. }
        | Command::Report { common, .. }
        | Command::Efficacy { common, .. } => common.clone(),
    };
    if let Some(n) = common.workers {
        if n == 0 {
            return Err(CliError::Config("--workers must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Other(e.to_string()))?;
    }
    let cli = CliOverrides { overrides: common.overrides, seed: common.seed, out: common.out };
    let cfg = load(common.config.as_deref(), &cli)?;
    match command {
        Command::Pretrain { .. } => print(&commands::pretrain::run(&cfg)?),
        Command::Posttrain { checkpoint, .. } => print(&commands::posttrain::run(&cfg, &checkpoint)?),
        Command::Score { checkpoint, .. } => print(&commands::score::run(&cfg, &checkpoint)?),
        Command::Oracle { checkpoint, .. } => {
            let reports = commands::oracle::run(&cfg, checkpoint.as_deref())?;
            for r in &reports {
                println!("{} {}: {:.3e} (tol {:.1e})", if r.pass { "PASS" } else { "FAIL" }, r.name, r.statistic, r.tolerance);
            }
            Ok(())
        }
        Command::Rationale { checkpoint, .. } => {
            let r = commands::rationale::run(&cfg, &checkpoint)?;
            print!("{}", commands::rationale::markdown(&r));
            Ok(())
        }
        Command::Collapse { checkpoint, .. } => {
            let r = commands::collapse::run(&cfg, &checkpoint)?;
            for a in &r.arms {
                println!("{}: collapsed = {}", a.name, a.verdict.collapsed);
            }
            Ok(())
        }
        Command::Ablate { checkpoint, matrix, .. } => {
            let r = commands::ablate::run(&cfg, &checkpoint, matrix.as_deref())?;
            print!("{}", commands::ablate::markdown(&r));
            Ok(())
        }
        Command::Report { runs, .. } => {
            println!("{}", commands::report::run(&cfg, &runs)?.display());
            Ok(())
        }
        Command::Efficacy { seeds, .. } => print(&commands::efficacy::run(&cfg, &seeds)?),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
