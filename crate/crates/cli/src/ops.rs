//! Command implementations: each resolves its inputs, writes outputs and
//! a manifest into the chosen directory, and reports a typed error that
//! main maps to an exit code.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;

use forkjoin_core::approx::{ApproxError, ApproxReport};
use forkjoin_core::ctmc::{
    build_truncated_chain, chain_metrics, stationary_distribution, CtmcError,
};
use forkjoin_core::model::MetricsReport;
use forkjoin_core::optimizer::{
    min_power_for_sla, tradeoff_curve, OptimizerError, SlaConstraint, SlaQuery, TradeoffPoint,
};
use forkjoin_core::sim::{simulate, simulate_with_event_log, ReplicationResult, SimOutput};
use forkjoin_core::{format_sig, SimMode, SimSettings, SystemConfig};

use crate::manifest::{RunManifest, SlaSpec, SweepSpec, ValidateSpec, MANIFEST_FILE};

#[derive(Debug)]
pub enum CliError {
    Invalid(String),
    Unstable { lambda_max: f64 },
    SlaInfeasible { r_at_p1: f64 },
    ValidationFailed(String),
    Io(std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Invalid(_) | CliError::Io(_) => 1,
            CliError::Unstable { .. } => 2,
            CliError::SlaInfeasible { .. } => 3,
            CliError::ValidationFailed(_) => 4,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Invalid(m) => write!(f, "invalid input: {m}"),
            CliError::Unstable { lambda_max } => {
                write!(f, "unstable: lambda_max={}", format_sig(*lambda_max))
            }
            CliError::SlaInfeasible { r_at_p1 } => write!(
                f,
                "SLA infeasible: mean queries at p=1 is {}",
                format_sig(*r_at_p1)
            ),
            CliError::ValidationFailed(m) => write!(f, "validation failed: {m}"),
            CliError::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e)
    }
}

impl From<ApproxError> for CliError {
    fn from(e: ApproxError) -> Self {
        match e {
            ApproxError::Unstable { lambda_max, .. } => CliError::Unstable { lambda_max },
            ApproxError::DegenerateRatio => CliError::Invalid(e.to_string()),
        }
    }
}

impl From<OptimizerError> for CliError {
    fn from(e: OptimizerError) -> Self {
        match e {
            OptimizerError::SlaInfeasible { r_at_p1 } => CliError::SlaInfeasible { r_at_p1 },
            OptimizerError::Approx(ApproxError::Unstable { lambda_max, .. }) => {
                CliError::Unstable { lambda_max }
            }
            other => CliError::Invalid(other.to_string()),
        }
    }
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<(), CliError> {
    fs::create_dir_all(dir)?;
    let mut f = fs::File::create(dir.join(name))?;
    f.write_all(contents.as_bytes())?;
    Ok(())
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Invalid(format!("serialization: {e}")))?;
    write_file(dir, name, &(text + "\n"))
}

fn finish_manifest(dir: &Path, manifest: &RunManifest) -> Result<(), CliError> {
    write_json(dir, MANIFEST_FILE, manifest)
}

pub fn cmd_approx(config: &SystemConfig, out: &Path) -> Result<(), CliError> {
    let report = ApproxReport::compute(config)?;
    let csv = format!("{}\n{}\n", ApproxReport::csv_header(), report.csv_row());
    write_file(out, "approx.csv", &csv)?;
    write_json(out, "approx.json", &report)?;
    let mut manifest = RunManifest::new("approx", config.clone());
    manifest.outputs = vec!["approx.csv".into(), "approx.json".into()];
    finish_manifest(out, &manifest)?;
    println!("{}", ApproxReport::csv_header());
    println!("{}", report.csv_row());
    Ok(())
}

pub fn cmd_simulate(
    config: &SystemConfig,
    settings: &SimSettings,
    event_log: Option<&str>,
    out: &Path,
) -> Result<(), CliError> {
    let output = match event_log {
        Some(name) => {
            fs::create_dir_all(out)?;
            let mut f = fs::File::create(out.join(name))?;
            simulate_with_event_log(config, settings, &mut f)
        }
        None => simulate(config, settings),
    }
    .map_err(|e| CliError::Invalid(e.to_string()))?;

    let mut csv = String::from(ReplicationResult::csv_header());
    csv.push('\n');
    for rep in &output.replications {
        csv.push_str(&rep.csv_row());
        csv.push('\n');
    }
    write_file(out, "replications.csv", &csv)?;
    write_json(out, "summary.json", &output.report)?;

    let mut manifest = RunManifest::new("simulate", config.clone());
    manifest.settings = Some(settings.clone());
    manifest.event_log = event_log.map(str::to_string);
    manifest.outputs = vec!["replications.csv".into(), "summary.json".into()];
    if let Some(name) = event_log {
        manifest.outputs.push(name.to_string());
    }
    finish_manifest(out, &manifest)?;

    let r = &output.report;
    println!(
        "R={} M={} Mh={} P={} sojourn={} completed={} nonstationary={}",
        format_sig(r.mean_queries.mean),
        format_sig(r.mean_active.mean),
        format_sig(r.mean_high_rate.mean),
        format_sig(r.mean_power.mean),
        format_sig(r.mean_sojourn.mean),
        r.completed,
        r.nonstationary,
    );
    Ok(())
}

pub const SWEEP_METRICS: [&str; 5] = ["R", "sojourn", "M", "Mh", "P"];
pub const SWEEP_CSV_HEADER: &str = "sweep_value,approx_value,sim_value,sim_ci";

pub fn sweep_grid(from: f64, to: f64, step: f64) -> Result<Vec<f64>, CliError> {
    if step.is_nan() || step <= 0.0 {
        return Err(CliError::Invalid("sweep step must be > 0".into()));
    }
    if to < from {
        return Err(CliError::Invalid("sweep range must satisfy from <= to".into()));
    }
    let mut grid = Vec::new();
    let mut i = 0u64;
    loop {
        let v = from + step * i as f64;
        if v > to + step * 1e-9 {
            break;
        }
        grid.push(v);
        i += 1;
    }
    Ok(grid)
}

pub fn cmd_sweep(
    config: &SystemConfig,
    spec: &SweepSpec,
    out: &Path,
) -> Result<(), CliError> {
    if spec.variable != "lambda" && spec.variable != "p" {
        return Err(CliError::Invalid(format!(
            "unknown sweep variable `{}` (expected lambda or p)",
            spec.variable
        )));
    }
    let grid = sweep_grid(spec.from, spec.to, spec.step)?;
    if spec.variable == "p" && grid.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(CliError::Invalid("p sweep must stay within [0, 1]".into()));
    }

    struct Row {
        value: f64,
        approx: Option<ApproxReport>,
        sim: Option<MetricsReport>,
    }
    let mut rows = Vec::with_capacity(grid.len());
    for (idx, &v) in grid.iter().enumerate() {
        let point_cfg = match spec.variable.as_str() {
            "lambda" => SystemConfig {
                lambda: v,
                ..config.clone()
            },
            _ => SystemConfig {
                p: v,
                ..config.clone()
            },
        };
        let approx = ApproxReport::compute(&point_cfg).ok();
        let sim = match &spec.sim {
            Some(base) => {
                let settings = SimSettings {
                    seed: base.seed.wrapping_add(idx as u64),
                    ..base.clone()
                };
                simulate(&point_cfg, &settings)
                    .ok()
                    .map(|o: SimOutput| o.report)
            }
            None => None,
        };
        rows.push(Row {
            value: v,
            approx,
            sim,
        });
    }

    let mut outputs = Vec::new();
    for metric in SWEEP_METRICS {
        let mut csv = String::from(SWEEP_CSV_HEADER);
        csv.push('\n');
        for row in &rows {
            let approx_val = row.approx.as_ref().map(|a| match metric {
                "R" => a.mean_queries,
                "sojourn" => a.mean_sojourn,
                "M" => a.mean_active,
                "Mh" => a.mean_high_rate,
                _ => a.mean_power,
            });
            let sim_val = row.sim.as_ref().map(|s| match metric {
                "R" => s.mean_queries,
                "sojourn" => s.mean_sojourn,
                "M" => s.mean_active,
                "Mh" => s.mean_high_rate,
                _ => s.mean_power,
            });
            csv.push_str(&format!(
                "{},{},{},{}\n",
                format_sig(row.value),
                approx_val.map(format_sig).unwrap_or_default(),
                sim_val.map(|e| format_sig(e.mean)).unwrap_or_default(),
                sim_val.map(|e| format_sig(e.ci95)).unwrap_or_default(),
            ));
        }
        let name = format!("sweep_{}_{}.csv", spec.variable, metric);
        write_file(out, &name, &csv)?;
        outputs.push(name);
    }

    let mut manifest = RunManifest::new("sweep", config.clone());
    manifest.sweep = Some(spec.clone());
    manifest.outputs = outputs;
    finish_manifest(out, &manifest)?;
    println!(
        "swept {} over [{}, {}] step {} ({} points)",
        spec.variable,
        format_sig(spec.from),
        format_sig(spec.to),
        format_sig(spec.step),
        grid.len()
    );
    Ok(())
}

pub fn cmd_optimize(
    config: &SystemConfig,
    spec: &SlaSpec,
    out: &Path,
) -> Result<(), CliError> {
    let constraint = match (spec.max_queries, spec.max_sojourn) {
        (Some(r), None) => SlaConstraint::MaxMeanQueries(r),
        (None, Some(t)) => SlaConstraint::MaxMeanSojourn(t),
        _ => {
            return Err(CliError::Invalid(
                "exactly one of --max-queries / --max-sojourn is required".into(),
            ))
        }
    };
    let mut query = SlaQuery::new(config.lambda, constraint);
    query.p_grid_step = spec.grid_step;
    query.refine_tol = spec.refine_tol;
    let answer = min_power_for_sla(config, &query)?;
    let metrics = answer
        .point
        .metrics
        .as_ref()
        .expect("optimum is a stable point");
    let result = json!({
        "p_star": answer.p_star,
        "R": metrics.mean_queries,
        "sojourn": metrics.mean_sojourn,
        "P": metrics.mean_power,
        "binding": answer.binding,
    });
    let text = serde_json::to_string_pretty(&result).expect("json") + "\n";
    write_file(out, "optimize.json", &text)?;

    // the tradeoff curve the optimum was chosen from
    let grid = sweep_grid(0.0, 1.0, spec.grid_step)?;
    let curve = tradeoff_curve(config, config.lambda, &grid);
    let mut csv = String::from(TradeoffPoint::csv_header());
    csv.push('\n');
    for pt in &curve {
        csv.push_str(&pt.csv_row());
        csv.push('\n');
    }
    write_file(out, "tradeoff.csv", &csv)?;

    let mut manifest = RunManifest::new("optimize", config.clone());
    manifest.sla = Some(spec.clone());
    manifest.outputs = vec!["optimize.json".into(), "tradeoff.csv".into()];
    finish_manifest(out, &manifest)?;
    print!("{text}");
    Ok(())
}

#[derive(Debug, Serialize)]
struct Check {
    name: String,
    pass: bool,
    detail: String,
}

fn check(checks: &mut Vec<Check>, name: &str, pass: bool, detail: String) {
    checks.push(Check {
        name: name.to_string(),
        pass,
        detail,
    });
}

/// Cross-validates the stationary solver, both simulators, and the
/// approximation on a small instance.
pub fn cmd_validate(
    config: &SystemConfig,
    spec: &ValidateSpec,
    state_cap: usize,
    out: &Path,
) -> Result<(), CliError> {
    let mut checks: Vec<Check> = Vec::new();
    let mut outputs = vec!["validate.json".into()];

    // exact solver, if the state space fits
    let solver = match build_truncated_chain(config, spec.y_max, state_cap) {
        Ok(chain) => {
            if spec.dump_chain {
                fs::create_dir_all(out)?;
                let name = format!("chain_{}_{}.txt", config.n, config.k);
                let mut f = fs::File::create(out.join(name.clone()))?;
                chain
                    .dump_edge_list(&mut f)
                    .map_err(CliError::Io)?;
                outputs.push(name);
            }
            match stationary_distribution(&chain, 1e-10) {
                Ok(pi) => {
                    let metrics = chain_metrics(&chain, &pi, config);
                    // truncation self-consistency on a smaller cap
                    if spec.y_max >= 40 {
                        let smaller = build_truncated_chain(config, spec.y_max - 20, state_cap)
                            .ok()
                            .and_then(|c2| {
                                stationary_distribution(&c2, 1e-10)
                                    .ok()
                                    .map(|pi2| chain_metrics(&c2, &pi2, config))
                            });
                        if let Some(m2) = smaller {
                            let delta =
                                (metrics.mean_queries.mean - m2.mean_queries.mean).abs();
                            check(
                                &mut checks,
                                "truncation_self_consistency",
                                delta < 1e-8,
                                format!("|R(y_max) - R(y_max-20)| = {delta:.3e}"),
                            );
                        }
                    }
                    // single-rate reduction: with mu0 = mu1 the h-bookkeeping
                    // must not affect the occupancy marginal
                    if config.mu0 == config.mu1 {
                        let flat = SystemConfig {
                            p: 0.0,
                            ..config.clone()
                        };
                        if let Ok(c2) = build_truncated_chain(&flat, spec.y_max, state_cap) {
                            if let Ok(pi2) = stationary_distribution(&c2, 1e-10) {
                                let m2 = chain_metrics(&c2, &pi2, &flat);
                                let delta =
                                    (metrics.mean_queries.mean - m2.mean_queries.mean).abs();
                                check(
                                    &mut checks,
                                    "single_rate_reduction",
                                    delta < 1e-8,
                                    format!("|R(p) - R(p=0)| = {delta:.3e} at mu0 = mu1"),
                                );
                            }
                        }
                    }
                    Some(metrics)
                }
                Err(e) => {
                    check(&mut checks, "solver", false, e.to_string());
                    None
                }
            }
        }
        Err(CtmcError::StateSpaceTooLarge { count, cap }) => {
            check(
                &mut checks,
                "solver_skipped",
                true,
                format!("state space exceeds cap ({count} > {cap}); solver skipped"),
            );
            None
        }
        Err(e) => return Err(CliError::Invalid(e.to_string())),
    };

    let base = SimSettings::new(spec.horizon, spec.seed, spec.replications, SimMode::ServerDes);
    let des = simulate(config, &base).map_err(|e| CliError::Invalid(e.to_string()))?;
    let traj_settings = SimSettings {
        mode: SimMode::CtmcTrajectory,
        ..base.clone()
    };
    let traj = simulate(config, &traj_settings).map_err(|e| CliError::Invalid(e.to_string()))?;

    type MetricGetter = fn(&MetricsReport) -> &forkjoin_core::Estimate;
    let metric_pairs: [(&str, MetricGetter); 4] = [
        ("R", |m| &m.mean_queries),
        ("M", |m| &m.mean_active),
        ("Mh", |m| &m.mean_high_rate),
        ("P", |m| &m.mean_power),
    ];

    if let Some(exact) = &solver {
        for (sim_name, sim) in [("des", &des), ("ctmc_sim", &traj)] {
            for (metric, get) in metric_pairs {
                let est = get(&sim.report);
                let truth = get(exact).mean;
                let delta = (est.mean - truth).abs();
                check(
                    &mut checks,
                    &format!("solver_vs_{sim_name}_{metric}"),
                    delta <= est.ci95,
                    format!("|sim - exact| = {delta:.5} vs CI {:.5}", est.ci95),
                );
            }
        }
    }

    // the two simulators against each other (overlapping CIs)
    for (metric, get) in metric_pairs {
        let a = get(&des.report);
        let b = get(&traj.report);
        let delta = (a.mean - b.mean).abs();
        let tol = a.ci95 + b.ci95;
        check(
            &mut checks,
            &format!("des_vs_ctmc_sim_{metric}"),
            delta <= tol,
            format!("|des - ctmc| = {delta:.5} vs CI sum {tol:.5}"),
        );
    }

    // approximation within 10% of the simulated mean queries
    let approx = ApproxReport::compute(config).ok();
    if let Some(a) = &approx {
        let sim_r = des.report.mean_queries.mean;
        if sim_r > 0.0 {
            let rel = (a.mean_queries - sim_r).abs() / sim_r;
            check(
                &mut checks,
                "approx_vs_sim_R",
                rel <= 0.10,
                format!("relative gap {rel:.4}"),
            );
        }
    }

    let pass = checks.iter().all(|c| c.pass);
    let report = json!({
        "config": config,
        "y_max": spec.y_max,
        "solver": solver,
        "des": des.report,
        "ctmc_sim": traj.report,
        "approx": approx,
        "checks": checks,
        "pass": pass,
    });
    write_json(out, "validate.json", &report)?;
    let mut manifest = RunManifest::new("validate", config.clone());
    manifest.validate = Some(spec.clone());
    manifest.outputs = outputs;
    finish_manifest(out, &manifest)?;

    for c in report["checks"].as_array().expect("array") {
        println!(
            "{}: {} ({})",
            c["name"].as_str().unwrap_or("?"),
            if c["pass"].as_bool().unwrap_or(false) {
                "pass"
            } else {
                "FAIL"
            },
            c["detail"].as_str().unwrap_or(""),
        );
    }
    if pass {
        Ok(())
    } else {
        Err(CliError::ValidationFailed(
            "one or more cross-checks failed (see validate.json)".into(),
        ))
    }
}

/// Re-executes the command recorded in a manifest.
pub fn cmd_rerun(manifest_path: &Path, out_override: Option<PathBuf>) -> Result<(), CliError> {
    let text = fs::read_to_string(manifest_path)?;
    let manifest: RunManifest = serde_json::from_str(&text)
        .map_err(|e| CliError::Invalid(format!("manifest: {e}")))?;
    let out = out_override.unwrap_or_else(|| {
        manifest_path
            .parent()
            .unwrap_or(Path::new("."))
            .to_path_buf()
    });
    let config = manifest
        .config
        .clone()
        .validate()
        .map_err(|e| CliError::Invalid(e.to_string()))?;
    match manifest.command.as_str() {
        "approx" => cmd_approx(&config, &out),
        "simulate" => {
            let settings = manifest
                .settings
                .ok_or_else(|| CliError::Invalid("manifest lacks settings".into()))?;
            cmd_simulate(&config, &settings, manifest.event_log.as_deref(), &out)
        }
        "sweep" => {
            let spec = manifest
                .sweep
                .ok_or_else(|| CliError::Invalid("manifest lacks sweep spec".into()))?;
            cmd_sweep(&config, &spec, &out)
        }
        "optimize" => {
            let spec = manifest
                .sla
                .ok_or_else(|| CliError::Invalid("manifest lacks sla spec".into()))?;
            cmd_optimize(&config, &spec, &out)
        }
        "validate" => {
            let spec = manifest
                .validate
                .ok_or_else(|| CliError::Invalid("manifest lacks validate spec".into()))?;
            cmd_validate(&config, &spec, forkjoin_core::ctmc::DEFAULT_STATE_CAP, &out)
        }
        other => Err(CliError::Invalid(format!("unknown command `{other}`"))),
    }
}
