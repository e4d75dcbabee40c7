use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use budgeted::schedules::ScheduleSpec;
use budgeted_cli::commands::{
    cmd_rank, cmd_run, cmd_subsample_compare, cmd_sweep, default_jobs, schedule_csv, CellStatus, Options,
};
use budgeted_cli::config::Config;
use clap::{Args, Parser, Subcommand};

/// Budgeted training experiments: learning-rate schedules under a fixed
/// iteration budget.
#[derive(Parser)]
#[command(name = "budgeted", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run and write its curves, manifest and report.
    Run(Common),
    /// Run a schedule x budget x seed grid and aggregate it.
    Sweep(Common),
    /// Kendall-tau rank prediction over random architecture families.
    Rank(Common),
    /// Iteration-limited full-data training against offline subsampling.
    SubsampleCompare(Common),
    /// Print a schedule as `progress,ratio` CSV.
    Schedule(ScheduleArgs),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Output directory; falls back to `out` in the config.
    #[arg(long, env = "BUDGETED_OUT")]
    out: Option<PathBuf>,
    /// Overrides the run seed, or replaces the list of training seeds.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; defaults to the number of available processors.
    #[arg(long, env = "BUDGETED_JOBS")]
    jobs: Option<usize>,
    /// Replace existing output instead of failing (sweeps: instead of
    /// resuming).
    #[arg(long)]
    overwrite: bool,
}

#[derive(Args)]
struct ScheduleArgs {
    /// `kind=<kind> key=value ...`, or a bare kind followed by parameters.
    #[arg(required = true, num_args = 1..)]
    spec: Vec<String>,
    #[arg(long, default_value_t = 101)]
    points: usize,
    /// Horizon of a budget-unaware schedule, in its own units.
    #[arg(long)]
    original_budget: Option<f64>,
}

impl Common {
    fn load(&self) -> Result<(Config, Options)> {
        let cfg = Config::load(&self.config)?;
        let out = self
            .out
            .clone()
            .or_else(|| cfg.out.clone())
            .context("no output directory: pass --out, set BUDGETED_OUT or set `out` in the config")?;
        let opts = Options {
            out,
            seed: self.seed,
            jobs: self.jobs.unwrap_or_else(default_jobs),
            overwrite: self.overwrite,
        };
        Ok((cfg, opts))
    }
}

fn parse_spec(words: &[String]) -> Result<ScheduleSpec> {
    let mut text = words.join(" ");
    if !words[0].contains('=') {
        text = format!("kind={text}");
    }
    text.parse().with_context(|| format!("invalid schedule `{text}`"))
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(c) => {
            let (cfg, opts) = c.load()?;
            let outcome = cmd_run(&cfg, &opts)?;
            let s = outcome.manifest.summary;
            println!("best_val_acc = {}", s.best_val_acc);
            println!("best_progress = {}", s.best_progress);
            if s.diverged {
                println!("diverged = true");
            }
            println!("output = {}", opts.out.display());
        }
        Command::Sweep(c) => {
            let (cfg, opts) = c.load()?;
            let outcome = cmd_sweep(&cfg, &opts)?;
            let failed = outcome.cells.iter().filter(|c| c.status == CellStatus::Failed).count();
            let resumed = outcome.cells.iter().filter(|c| c.status == CellStatus::Resumed).count();
            println!(
                "{} cells ({resumed} resumed, {failed} failed); table in {}",
                outcome.cells.len(),
                opts.out.join("sweep.csv").display()
            );
            for cell in outcome.cells.iter().filter(|c| c.status == CellStatus::Failed) {
                eprintln!("cell {} failed: {}", cell.id, cell.error.as_deref().unwrap_or(""));
            }
        }
        Command::Rank(c) => {
            let (cfg, opts) = c.load()?;
            let outcome = cmd_rank(&cfg, &opts)?;
            for s in &outcome.settings.schedules {
                for &f in &outcome.settings.budgets {
                    let tau = outcome.median_tau(s, f).map_or("undefined".into(), |t| t.to_string());
                    println!("{s} @ {f}: median tau {tau}");
                }
            }
        }
        Command::SubsampleCompare(c) => {
            let (cfg, opts) = c.load()?;
            let rows = cmd_subsample_compare(&cfg, &opts)?;
            for r in rows {
                println!(
                    "budget {} seed {}: full data {} subsampled {}",
                    r.fraction, r.seed, r.full_data_acc, r.subsampled_acc
                );
            }
        }
        Command::Schedule(a) => {
            let spec = parse_spec(&a.spec)?;
            print!("{}", schedule_csv(&spec, a.points, a.original_budget)?);
        }
    }
    Ok(())
}
