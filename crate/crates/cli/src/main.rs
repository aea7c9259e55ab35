//! `forkjoin`: reproducible experiments on (n,k) fork-join queues with
//! probabilistic two-rate server slowdown.

mod manifest;
mod ops;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use forkjoin_core::ctmc::{default_y_max, DEFAULT_STATE_CAP};
use forkjoin_core::{PowerModel, SimMode, SimSettings, SystemConfig};

use manifest::{SlaSpec, SweepSpec, ValidateSpec};
use ops::CliError;

#[derive(Parser)]
#[command(name = "forkjoin", version, about)]
struct Cli {
    /// JSON config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Master RNG seed for simulations.
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,
    /// Worker threads for parallel replications (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigFlags {
    #[arg(long)]
    n: Option<u32>,
    #[arg(long)]
    k: Option<u32>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    mu0: Option<f64>,
    #[arg(long)]
    mu1: Option<f64>,
    #[arg(long)]
    p: Option<f64>,
    /// Power model: `quadratic:ALPHA` or `explicit:P0,P1`.
    #[arg(long)]
    power: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Closed-form approximation report (CSV + JSON).
    Approx {
        #[command(flatten)]
        flags: ConfigFlags,
    },
    /// Run a simulator; writes per-replication CSV and an aggregate JSON.
    Simulate {
        #[command(flatten)]
        flags: ConfigFlags,
        /// `server_des` (alias `des`) or `ctmc_trajectory` (alias `ctmc`).
        #[arg(long, default_value = "server_des")]
        mode: String,
        #[arg(long, default_value_t = 100_000.0)]
        horizon: f64,
        /// Discarded initial time (default: 10% of the horizon).
        #[arg(long)]
        warmup: Option<f64>,
        #[arg(long, default_value_t = 5)]
        replications: u32,
        /// Also write a CSV event log with this file name.
        #[arg(long)]
        event_log: Option<String>,
    },
    /// Sweep lambda or p, emitting figure-ready CSVs per metric.
    Sweep {
        #[command(flatten)]
        flags: ConfigFlags,
        /// Swept variable: `lambda` or `p`.
        #[arg(long)]
        sweep: String,
        #[arg(long)]
        from: f64,
        #[arg(long)]
        to: f64,
        #[arg(long)]
        step: f64,
        /// Also simulate each grid point at this horizon.
        #[arg(long)]
        sim_horizon: Option<f64>,
        #[arg(long, default_value_t = 3)]
        sim_replications: u32,
        #[arg(long, default_value = "server_des")]
        mode: String,
    },
    /// Minimum-power p subject to an SLA on mean queries or sojourn.
    Optimize {
        #[command(flatten)]
        flags: ConfigFlags,
        #[arg(long)]
        max_queries: Option<f64>,
        #[arg(long)]
        max_sojourn: Option<f64>,
        #[arg(long, default_value_t = 0.01)]
        grid_step: f64,
        #[arg(long, default_value_t = 1e-6)]
        refine_tol: f64,
    },
    /// Cross-check solver, simulators, and approximation on a small instance.
    Validate {
        #[command(flatten)]
        flags: ConfigFlags,
        /// Per-stage occupancy cap (default: tail-bound heuristic).
        #[arg(long)]
        y_max: Option<u32>,
        #[arg(long, default_value_t = 200_000.0)]
        horizon: f64,
        #[arg(long, default_value_t = 5)]
        replications: u32,
        /// Abort chain construction beyond this many states.
        #[arg(long, default_value_t = DEFAULT_STATE_CAP)]
        state_cap: usize,
        /// Dump the truncated chain as an edge list.
        #[arg(long, default_value_t = false)]
        dump_chain: bool,
    },
    /// Re-execute the command recorded in a manifest.
    Rerun {
        #[arg(long)]
        manifest: PathBuf,
        /// Write outputs here instead of the manifest's directory.
        #[arg(long)]
        rerun_out: Option<PathBuf>,
    },
}

fn parse_power(text: &str) -> Result<PowerModel, CliError> {
    let (kind, rest) = text
        .split_once(':')
        .ok_or_else(|| CliError::Invalid(format!("power `{text}`: expected kind:params")))?;
    match kind {
        "quadratic" => {
            let alpha: f64 = rest
                .parse()
                .map_err(|_| CliError::Invalid(format!("power alpha `{rest}` is not a number")))?;
            Ok(PowerModel::Quadratic { alpha })
        }
        "explicit" => {
            let (a, b) = rest.split_once(',').ok_or_else(|| {
                CliError::Invalid(format!("power `{text}`: expected explicit:P0,P1"))
            })?;
            let p0: f64 = a
                .parse()
                .map_err(|_| CliError::Invalid(format!("power P0 `{a}` is not a number")))?;
            let p1: f64 = b
                .parse()
                .map_err(|_| CliError::Invalid(format!("power P1 `{b}` is not a number")))?;
            Ok(PowerModel::Explicit { p0, p1 })
        }
        other => Err(CliError::Invalid(format!("unknown power kind `{other}`"))),
    }
}

fn parse_mode(text: &str) -> Result<SimMode, CliError> {
    match text {
        "server_des" | "des" => Ok(SimMode::ServerDes),
        "ctmc_trajectory" | "ctmc" => Ok(SimMode::CtmcTrajectory),
        other => Err(CliError::Invalid(format!("unknown mode `{other}`"))),
    }
}

/// Flags override config-file values; the merged config is what the
/// manifest records.
fn resolve_config(file: &Option<PathBuf>, flags: &ConfigFlags) -> Result<SystemConfig, CliError> {
    let base: Option<SystemConfig> = match file {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Invalid(format!("config {}: {e}", path.display())))?;
            Some(
                serde_json::from_str(&text)
                    .map_err(|e| CliError::Invalid(format!("config {}: {e}", path.display())))?,
            )
        }
        None => None,
    };
    let power = match &flags.power {
        Some(text) => Some(parse_power(text)?),
        None => None,
    };
    let missing = |name: &str| CliError::Invalid(format!("missing --{name} (or --config)"));
    let cfg = SystemConfig {
        n: flags
            .n
            .or(base.as_ref().map(|c| c.n))
            .ok_or_else(|| missing("n"))?,
        k: flags
            .k
            .or(base.as_ref().map(|c| c.k))
            .ok_or_else(|| missing("k"))?,
        lambda: flags
            .lambda
            .or(base.as_ref().map(|c| c.lambda))
            .ok_or_else(|| missing("lambda"))?,
        mu0: flags
            .mu0
            .or(base.as_ref().map(|c| c.mu0))
            .ok_or_else(|| missing("mu0"))?,
        mu1: flags
            .mu1
            .or(base.as_ref().map(|c| c.mu1))
            .ok_or_else(|| missing("mu1"))?,
        p: flags
            .p
            .or(base.as_ref().map(|c| c.p))
            .ok_or_else(|| missing("p"))?,
        power: power
            .or(base.map(|c| c.power))
            .unwrap_or(PowerModel::Quadratic { alpha: 1.0 }),
    };
    cfg.validate().map_err(|e| CliError::Invalid(e.to_string()))
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(threads) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| CliError::Invalid(format!("threads: {e}")))?;
    }
    match cli.command {
        Command::Approx { flags } => {
            let config = resolve_config(&cli.config, &flags)?;
            ops::cmd_approx(&config, &cli.out)
        }
        Command::Simulate {
            flags,
            mode,
            horizon,
            warmup,
            replications,
            event_log,
        } => {
            let config = resolve_config(&cli.config, &flags)?;
            let mut settings = SimSettings::new(horizon, cli.seed, replications, parse_mode(&mode)?);
            if let Some(w) = warmup {
                settings.warmup = w;
            }
            settings
                .validate()
                .map_err(|e| CliError::Invalid(e.to_string()))?;
            ops::cmd_simulate(&config, &settings, event_log.as_deref(), &cli.out)
        }
        Command::Sweep {
            flags,
            sweep,
            from,
            to,
            step,
            sim_horizon,
            sim_replications,
            mode,
        } => {
            let config = resolve_config(&cli.config, &flags)?;
            let sim = match sim_horizon {
                Some(h) => {
                    let s = SimSettings::new(h, cli.seed, sim_replications, parse_mode(&mode)?);
                    s.validate().map_err(|e| CliError::Invalid(e.to_string()))?;
                    Some(s)
                }
                None => None,
            };
            let spec = SweepSpec {
                variable: sweep,
                from,
                to,
                step,
                sim,
            };
            ops::cmd_sweep(&config, &spec, &cli.out)
        }
        Command::Optimize {
            flags,
            max_queries,
            max_sojourn,
            grid_step,
            refine_tol,
        } => {
            let config = resolve_config(&cli.config, &flags)?;
            let spec = SlaSpec {
                max_queries,
                max_sojourn,
                grid_step,
                refine_tol,
            };
            ops::cmd_optimize(&config, &spec, &cli.out)
        }
        Command::Validate {
            flags,
            y_max,
            horizon,
            replications,
            state_cap,
            dump_chain,
        } => {
            let config = resolve_config(&cli.config, &flags)?;
            let spec = ValidateSpec {
                y_max: y_max.unwrap_or_else(|| default_y_max(&config)),
                horizon,
                replications,
                seed: cli.seed,
                dump_chain,
            };
            ops::cmd_validate(&config, &spec, state_cap, &cli.out)
        }
        Command::Rerun {
            manifest,
            rerun_out,
        } => ops::cmd_rerun(&manifest, rerun_out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
