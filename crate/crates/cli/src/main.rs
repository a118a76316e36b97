use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use opflow::scenario::{cmd_run, cmd_validate, write_sweep, ScenarioConfig, SweepAxis};

/// Runs scheduling scenarios on the simulated device.
#[derive(Parser, Debug)]
#[command(name = "opflow", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build, partition and analyse a scenario without running it.
    Validate(Common),
    /// Run the sequential baseline and the configured strategy; write metrics and traces.
    Run(Common),
    /// Run the sweeps listed in the scenario; write sweep.csv.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Only run the sweep over this axis.
        #[arg(long)]
        axis: Option<SweepAxis>,
    },
}

#[derive(Args, Debug)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Output directory (defaults to the scenario's `output_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the scenario strategy name.
    #[arg(long)]
    strategy: Option<String>,
}

impl Common {
    fn load(&self) -> Result<(ScenarioConfig, PathBuf)> {
        let mut cfg = ScenarioConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(name) = &self.strategy {
            cfg.strategy.name = name.clone();
        }
        let out = self.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
        Ok((cfg, out))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("OPF_LOG", "warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Validate(common) => {
            let (cfg, _) = common.load()?;
            let report = cmd_validate(&cfg);
            for c in &report.checks {
                println!("{} {}: {}", if c.ok { "ok  " } else { "FAIL" }, c.name, c.detail);
            }
            Ok(if report.passed() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
        Command::Run(common) => {
            let (cfg, out) = common.load()?;
            let (metrics, files) = cmd_run(&cfg, &out).with_context(|| format!("running {}", cfg.name))?;
            for r in &metrics.runs {
                println!(
                    "{} batch {} repeat {}: makespan {:.4} (sequential {:.4}) speedup {:.4}",
                    r.strategy.strategy, r.batch_rows, r.repeat, r.strategy.makespan, r.sequential.makespan, r.speedup_vs_sequential
                );
            }
            println!("speedup_vs_sequential {:.4}", metrics.speedup_vs_sequential);
            info!("wrote {} files to {}", files.len(), out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Sweep { common, axis } => {
            let (cfg, out) = common.load()?;
            let rows = write_sweep(&cfg, axis, &out).with_context(|| format!("sweeping {}", cfg.name))?;
            for r in &rows {
                println!("{} {} batch {}: speedup {:.4}", r.axis.as_str(), r.value, r.batch_rows, r.speedup);
            }
            info!("wrote sweep.csv to {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}
