use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use legato_cli::{
    cmd_metrics, cmd_report, cmd_rollout, cmd_sweep, cmd_train, OracleSuite, RunConfig, RunOptions, EXIT_CHECK_FAILED,
    EXIT_OK, EXIT_USAGE,
};

#[derive(Debug, Parser)]
#[command(name = "legato", version, about = "Train, roll out and score action-chunk continuation strategies")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Run config (TOML). Omitted sections take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Training seed for `train`, a single rollout seed for `rollout`,
    /// both for `sweep`, the case seed for `oracle-check`.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory; overrides `out` in the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    force: bool,

    /// Worker threads for grid cells.
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one checkpoint per policy family.
    Train,
    /// Run the strategy x schedule x seed grid.
    Rollout,
    /// Score every trace.
    Metrics,
    /// Aggregate traces into summary and drift CSVs.
    Report,
    /// Train, roll out, score and report.
    Sweep,
    /// Model-free invariant checks.
    OracleCheck,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    if let Some(seed) = cli.seed {
        match cli.command {
            Command::Train => cfg.train.seed = seed,
            Command::Rollout => cfg.seeds = vec![seed],
            Command::Sweep => {
                cfg.train.seed = seed;
                cfg.seeds = vec![seed];
            }
            _ => {}
        }
    }
    Ok(cfg)
}

fn oracle_check(seed: u64) -> i32 {
    let report = OracleSuite { seed, ..OracleSuite::default() }.run();
    for c in &report {
        let status = if c.passed { "PASS" } else { "FAIL" };
        println!("{status} {:<18} cases {:>5}  worst {:.3e}  tol {:.0e}", c.name, c.cases, c.worst, c.tolerance);
    }
    if report.iter().all(|c| c.passed) {
        EXIT_OK
    } else {
        EXIT_CHECK_FAILED
    }
}

fn run(cli: &Cli) -> Result<i32> {
    if let Command::OracleCheck = cli.command {
        return Ok(oracle_check(cli.seed.unwrap_or(0)));
    }
    let cfg = load_config(cli)?;
    let opts = RunOptions { force: cli.force, workers: cli.workers };
    let paths = match cli.command {
        Command::Train => cmd_train(&cfg, opts)?,
        Command::Rollout => cmd_rollout(&cfg, opts)?,
        Command::Metrics => cmd_metrics(&cfg, opts)?,
        Command::Report => cmd_report(&cfg, opts)?,
        Command::Sweep => cmd_sweep(&cfg, opts)?,
        Command::OracleCheck => unreachable!(),
    };
    println!("wrote {} files under {}", paths.len(), cfg.out.display());
    Ok(EXIT_OK)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    let code = match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_USAGE
        }
    };
    ExitCode::from(code as u8)
}
