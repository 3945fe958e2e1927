use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

mod analyze;
mod config;
mod report;

use config::{Overrides, RunConfig};

/// k-FWER controlled discovery over sparse feature dictionaries.
#[derive(Parser, Debug)]
#[command(name = "discover", version, about)]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Select features, build confidence intervals and score descriptions.
    Analyze(AnalyzeArgs),
    /// Run a Monte Carlo grid and print its results table.
    Simulate(SimulateArgs),
    /// Turn inference and score reports into plot-ready rows.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    bootstrap_draws: Option<usize>,
    #[arg(long)]
    eval_fraction: Option<f64>,
    /// Use the offline mock backend for descriptions and classification.
    #[arg(long)]
    mock_llm: bool,
    /// Output directory (overrides the config).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// TOML grid with one `[[specs]]` table per design.
    #[arg(long)]
    config: PathBuf,
    /// Offset added to every spec seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Results file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    #[arg(long)]
    inference: PathBuf,
    #[arg(long)]
    scores: Option<PathBuf>,
    /// Output file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn emit(out: Option<&PathBuf>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn simulate(args: &SimulateArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.config).with_context(|| format!("reading {}", args.config.display()))?;
    let mut grid: discovery_core::sim::GridConfig =
        toml::from_str(&text).with_context(|| format!("parsing grid {}", args.config.display()))?;
    if let Some(offset) = args.seed {
        for s in &mut grid.specs {
            s.dgp.seed = s.dgp.seed.wrapping_add(offset);
        }
    }
    let rows = discovery_core::sim::run_grid(&grid)?;
    emit(args.out.as_ref(), &discovery_core::sim::format_grid(&rows))
}

fn report(args: &ReportArgs) -> Result<()> {
    let inference = discovery_core::inference::read_report(&args.inference)?;
    let scores = match &args.scores {
        Some(p) => discovery_core::scoring::read_scores(p)?,
        None => Vec::new(),
    };
    emit(args.out.as_ref(), &report::plot_rows(&inference, &scores)?)
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(t) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .context("configuring the worker pool")?;
    }
    match &cli.command {
        Command::Analyze(a) => {
            let ov = Overrides {
                seed: a.seed,
                alpha: a.alpha,
                k: a.k,
                bootstrap_draws: a.bootstrap_draws,
                eval_fraction: a.eval_fraction,
                mock_llm: a.mock_llm,
                out: a.out.clone(),
            };
            let cfg = RunConfig::load(&a.config, &ov)?;
            analyze::run(&cfg)
        }
        Command::Simulate(s) => simulate(s),
        Command::Report(r) => report(r),
    }
}
