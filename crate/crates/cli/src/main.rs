use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use ftarga::neural::Mlp;
use ftarga::runner::{self, ExperimentConfig, ExperimentId};

const SEED_ENV: &str = "FTARGA_SEED";

#[derive(Parser)]
#[command(name = "ftarga", version, about = "Neural first-transition analysis with residual-gradient training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network; writes manifest.json, loss.csv, checkpoint.
    Train(Common),
    /// Compare a checkpoint with the oracle; writes grids, comparison.csv, summary.json.
    Validate(WithCheckpoint),
    /// Evaluate the ground truth on the validation lattice (grid_oracle.csv).
    Oracle(Common),
    /// Evaluate a checkpoint on the visualization lattice (grid_learned.csv).
    Grid(WithCheckpoint),
    /// Train and validate every experiment; exits nonzero if any gate fails.
    RunAll(RunAll),
    /// Estimate the residual loss of a checkpoint.
    LossProbe(Probe),
}

#[derive(Args)]
struct Common {
    /// JSON config or a run manifest.
    #[arg(long, required_unless_present = "experiment")]
    config: Option<PathBuf>,
    /// Use the built-in defaults for this experiment instead of a config file.
    #[arg(long, conflicts_with = "config")]
    experiment: Option<String>,
    /// Overrides the config seed; FTARGA_SEED is used when neither is set.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    paper_scale: bool,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct WithCheckpoint {
    #[command(flatten)]
    common: Common,
    /// Defaults to `<out>/checkpoint`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct Probe {
    #[command(flatten)]
    inner: WithCheckpoint,
    #[arg(long, default_value_t = 100_000)]
    samples: usize,
}

#[derive(Args)]
struct RunAll {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    paper_scale: bool,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => Ok(Some(v.trim().parse().with_context(|| format!("{SEED_ENV}={v}"))?)),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => bail!("{SEED_ENV}: {e}"),
    }
}

/// Precedence: flag, then config file, then `FTARGA_SEED`, then 0.
fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let (mut cfg, file_has_seed) = match (&c.config, &c.experiment) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let raw: serde_json::Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            let body = raw.get("config").unwrap_or(&raw);
            let has_seed = body.get("seed").is_some();
            let cfg = ExperimentConfig::from_json(&text, c.paper_scale)
                .with_context(|| format!("config {}", path.display()))?;
            (cfg, has_seed)
        }
        (None, Some(id)) => (ExperimentConfig::defaults(ExperimentId::parse(id)?, c.paper_scale), false),
        (None, None) => bail!("either --config or --experiment is required"),
    };
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    } else if !file_has_seed {
        if let Some(seed) = env_seed()? {
            cfg.seed = seed;
        }
    }
    if let Some(t) = c.threads {
        cfg.threads = t;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_checkpoint(w: &WithCheckpoint) -> Result<Mlp> {
    let path = w.checkpoint.clone().unwrap_or_else(|| w.common.out.join("checkpoint"));
    Mlp::load(&path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn print_json(v: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn gate_exit(passed: bool) -> ExitCode {
    if passed {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train(c) => {
            let cfg = load_config(&c)?;
            let art = runner::run_train(&cfg, &c.out)?;
            if let (Some(first), Some(last)) = (art.log.first(), art.log.last()) {
                eprintln!(
                    "{}: loss {:.6} -> {:.6} after {} iterations",
                    cfg.experiment, first.mean, last.mean, last.iteration
                );
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Validate(w) => {
            let cfg = load_config(&w.common)?;
            let net = load_checkpoint(&w)?;
            let summary = runner::run_validate(&cfg, &net, &w.common.out)?;
            print_json(&summary)?;
            Ok(gate_exit(summary.gate.passed))
        }
        Command::Oracle(c) => {
            let cfg = load_config(&c)?;
            let rows = runner::run_oracle(&cfg, &c.out)?;
            eprintln!("wrote {} oracle points", rows.len());
            Ok(ExitCode::SUCCESS)
        }
        Command::Grid(w) => {
            let cfg = load_config(&w.common)?;
            let net = load_checkpoint(&w)?;
            let rows = runner::run_grid(&cfg, &net, &w.common.out)?;
            eprintln!("wrote {} grid points", rows.len());
            Ok(ExitCode::SUCCESS)
        }
        Command::LossProbe(p) => {
            let cfg = load_config(&p.inner.common)?;
            let net = load_checkpoint(&p.inner)?;
            let est = runner::run_loss_probe(&cfg, &net, p.samples)?;
            print_json(&serde_json::json!({ "mean": est.mean, "stderr": est.stderr, "n": est.n }))?;
            Ok(ExitCode::SUCCESS)
        }
        Command::RunAll(r) => {
            let seed = match r.seed {
                Some(s) => s,
                None => env_seed()?.unwrap_or(0),
            };
            let report = runner::run_all(seed, r.paper_scale, r.threads, &r.out, &|_| {})?;
            for e in &report.entries {
                match (&e.summary, &e.error) {
                    (Some(s), _) => eprintln!(
                        "{:<28} {} {} = {:.4} (threshold {})",
                        e.experiment.as_str(),
                        if s.gate.passed { "PASS" } else { "FAIL" },
                        s.gate.metric,
                        s.gate.value,
                        s.gate.threshold
                    ),
                    (None, Some(err)) => eprintln!("{:<28} ERROR {err}", e.experiment.as_str()),
                    (None, None) => {}
                }
            }
            Ok(gate_exit(report.all_passed()))
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
