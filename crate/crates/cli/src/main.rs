use std::io::{ErrorKind, Write};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use oracle_infer::metrics::{distribution_csv, distribution_report, funnel_csv, phase_funnel};
use oracle_infer::{run_campaign, validate_config, CampaignConfig64, Phase, PhaseLedger};

#[derive(Parser)]
#[command(name = "oracle-infer", version, about = "Infer end-to-end tests and oracles from production logs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a campaign and write its reports.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Override the campaign seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the horizon in days.
        #[arg(long)]
        days: Option<u32>,
        /// Override the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a config file and report every problem found.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Summarize a ledger snapshot.
    Report {
        #[arg(long)]
        ledger: PathBuf,
    },
}

fn run(config: PathBuf, seed: Option<u64>, days: Option<u32>, out: Option<PathBuf>) -> Result<()> {
    let checked = validate_config::<f64>(&config)?;
    for w in &checked.warnings {
        eprintln!("warning: {w}");
    }
    let mut cfg: CampaignConfig64 = checked.config;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(d) = days {
        cfg.pipeline.horizon_days = d;
    }
    let out = out
        .or_else(|| cfg.output_dir.clone())
        .context("no output directory: set `output_dir` in the config or pass --out")?;
    let start = Instant::now();
    let run = run_campaign(cfg, &out)?;
    let f = &run.report.funnel;
    let failures: usize = run.report.days.iter().map(|d| d.suite.failures.len()).sum();
    println!(
        "{} days in {:.2}s: explored {} keys, staged {}, deployed {}; {} suite failures; reports in {}",
        run.report.days.len(),
        start.elapsed().as_secs_f64(),
        f.exploration.keys,
        f.staging.keys,
        f.deployment.keys,
        failures,
        out.display()
    );
    Ok(())
}

fn validate(config: PathBuf) -> Result<()> {
    let checked = validate_config::<f64>(&config)?;
    for w in &checked.warnings {
        eprintln!("warning: {w}");
    }
    println!("{}: ok", config.display());
    Ok(())
}

fn report(ledger: PathBuf) -> Result<()> {
    let ledger = PhaseLedger::load(&ledger)?;
    let mut text = funnel_csv(&phase_funnel::<f64>(&ledger));
    for phase in [Phase::Exploration, Phase::Staging, Phase::Deployed] {
        text.push_str(&format!("\n# {}\n", phase.as_str()));
        text.push_str(&distribution_csv(&distribution_report(phase, &ledger)));
    }
    match std::io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() != ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, seed, days, out } => run(config, seed, days, out),
        Command::Validate { config } => validate(config),
        Command::Report { ledger } => report(ledger),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
