//! Closed-form performance metrics of the independent tandem-queue
//! approximation: effective service rate, per-level virtual server counts,
//! product-form loads, and the derived means (queries, sojourn, active and
//! high-rate servers, power).
//!
//! Every function is a pure function of its inputs and safe to evaluate in
//! parallel over parameter grids.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::SystemConfig;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ApproxError {
    /// Arrival rate at or beyond the stability boundary (n/k)·mu_bar.
    #[error("unstable: lambda={lambda} >= lambda_max={lambda_max}")]
    Unstable { lambda: f64, lambda_max: f64 },
    /// k = n makes the large-system log formula singular.
    #[error("degenerate ratio: k = n")]
    DegenerateRatio,
}

/// Effective per-server rate: reciprocal of the mean service time when a
/// service is high-rate with probability `p`.
pub fn mean_service_rate(p: f64, mu0: f64, mu1: f64) -> f64 {
    1.0 / (p / mu1 + (1.0 - p) / mu0)
}

/// Stability boundary. Returns `(stable, lambda_max)` with
/// `lambda_max = (n/k)·mu_bar(p)`.
pub fn stability_region(config: &SystemConfig) -> (bool, f64) {
    let mu_bar = mean_service_rate(config.p, config.mu0, config.mu1);
    let lambda_max = config.n as f64 / config.k as f64 * mu_bar;
    (config.lambda < lambda_max, lambda_max)
}

fn require_stable(config: &SystemConfig) -> Result<f64, ApproxError> {
    let (stable, lambda_max) = stability_region(config);
    if stable {
        Ok(lambda_max)
    } else {
        Err(ApproxError::Unstable {
            lambda: config.lambda,
            lambda_max,
        })
    }
}

/// Mean pooled server counts of the approximating tandem:
/// `N_i = (n - i) - (k - 1 - i)·lambda/mu_bar`.
pub fn virtual_servers(
    n: u32,
    k: u32,
    lambda: f64,
    mu_bar: f64,
) -> Result<Vec<f64>, ApproxError> {
    let lambda_max = n as f64 / k as f64 * mu_bar;
    if lambda >= lambda_max {
        return Err(ApproxError::Unstable { lambda, lambda_max });
    }
    let r = lambda / mu_bar;
    Ok((0..k)
        .map(|i| (n - i) as f64 - (k - 1 - i) as f64 * r)
        .collect())
}

/// Per-level utilizations and empty probabilities of the product form:
/// `rho_i = lambda/(N_i·mu_bar)`, `pi0_i = 1 - rho_i`.
pub fn queue_loads(
    n_bar: &[f64],
    lambda: f64,
    mu_bar: f64,
) -> Result<(Vec<f64>, Vec<f64>), ApproxError> {
    let mut rho = Vec::with_capacity(n_bar.len());
    for &nb in n_bar {
        let r = lambda / (nb * mu_bar);
        if r >= 1.0 {
            return Err(ApproxError::Unstable {
                lambda,
                lambda_max: nb * mu_bar,
            });
        }
        rho.push(r);
    }
    let pi0 = rho.iter().map(|r| 1.0 - r).collect();
    Ok((rho, pi0))
}

/// Mean number of queries: sum of per-level M/M/1 means,
/// `sum_i lambda / ((n-i)·mu_bar - (k-i)·lambda)`.
pub fn mean_queries(config: &SystemConfig) -> Result<f64, ApproxError> {
    require_stable(config)?;
    let mu_bar = mean_service_rate(config.p, config.mu0, config.mu1);
    let (n, k, lambda) = (config.n, config.k, config.lambda);
    Ok((0..k)
        .map(|i| lambda / ((n - i) as f64 * mu_bar - (k - i) as f64 * lambda))
        .sum())
}

/// Mean sojourn time, `R/lambda = sum_i 1/((n-i)·mu_bar - (k-i)·lambda)`.
/// At lambda = 0 this is the empty-system latency through the k stages.
pub fn mean_sojourn(config: &SystemConfig) -> Result<f64, ApproxError> {
    require_stable(config)?;
    let mu_bar = mean_service_rate(config.p, config.mu0, config.mu1);
    let (n, k, lambda) = (config.n, config.k, config.lambda);
    Ok((0..k)
        .map(|i| 1.0 / ((n - i) as f64 * mu_bar - (k - i) as f64 * lambda))
        .sum())
}

/// Mean active servers: `sum_i (n-i)·p_i` with
/// `p_i = rho_i · prod_{j<i} pi0_j` (the first-busy-level decomposition).
pub fn mean_active_servers(config: &SystemConfig) -> Result<f64, ApproxError> {
    require_stable(config)?;
    if config.lambda == 0.0 {
        return Ok(0.0);
    }
    let mu_bar = mean_service_rate(config.p, config.mu0, config.mu1);
    let n_bar = virtual_servers(config.n, config.k, config.lambda, mu_bar)?;
    let (rho, pi0) = queue_loads(&n_bar, config.lambda, mu_bar)?;
    let mut total = 0.0;
    let mut prod = 1.0;
    for i in 0..config.k as usize {
        total += (config.n as f64 - i as f64) * rho[i] * prod;
        prod *= pi0[i];
    }
    debug_assert!(
        (total - mean_active_servers_alt(config).unwrap()).abs() < 1e-9,
        "the two active-server forms disagree"
    );
    Ok(total)
}

/// Alternative form of the mean active servers:
/// `(n-k)(1 - p_empty) + sum_j (1 - pi0_0···pi0_j)` where
/// `p_empty = pi0_0···pi0_{k-1}`. Agrees with [`mean_active_servers`]
/// to floating precision.
pub fn mean_active_servers_alt(config: &SystemConfig) -> Result<f64, ApproxError> {
    require_stable(config)?;
    if config.lambda == 0.0 {
        return Ok(0.0);
    }
    let mu_bar = mean_service_rate(config.p, config.mu0, config.mu1);
    let n_bar = virtual_servers(config.n, config.k, config.lambda, mu_bar)?;
    let (_, pi0) = queue_loads(&n_bar, config.lambda, mu_bar)?;
    let mut prod = 1.0;
    let mut sum = 0.0;
    for &pi in &pi0 {
        prod *= pi;
        sum += 1.0 - prod;
    }
    Ok((config.n - config.k) as f64 * (1.0 - prod) + sum)
}

/// Mean high-rate servers, `p · M`.
pub fn mean_high_rate_servers(config: &SystemConfig) -> Result<f64, ApproxError> {
    Ok(config.p * mean_active_servers(config)?)
}

/// Mean power, `M · (P0 + (P1 - P0)·p)`.
pub fn mean_power(config: &SystemConfig) -> Result<f64, ApproxError> {
    let m = mean_active_servers(config)?;
    let (p0, p1) = config.power_levels();
    Ok(m * (p0 + (p1 - p0) * config.p))
}

/// Large-system sojourn approximation at fixed k/n:
/// `(1/(mu_bar - lambda))·[ln(1 - k·lambda/(n·mu_bar)) - ln(1 - k/n)]`.
pub fn large_system_sojourn(config: &SystemConfig) -> Result<f64, ApproxError> {
    require_stable(config)?;
    if config.k == config.n {
        return Err(ApproxError::DegenerateRatio);
    }
    let mu_bar = mean_service_rate(config.p, config.mu0, config.mu1);
    let (n, k, lambda) = (config.n as f64, config.k as f64, config.lambda);
    Ok(((1.0 - k * lambda / (n * mu_bar)).ln() - (1.0 - k / n).ln()) / (mu_bar - lambda))
}

/// Closed-form quantities of the approximation for one configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApproxReport {
    pub n: u32,
    pub k: u32,
    pub lambda: f64,
    pub mu0: f64,
    pub mu1: f64,
    pub p: f64,
    pub mu_bar: f64,
    pub n_bar: Vec<f64>,
    pub rho: Vec<f64>,
    pub pi0: Vec<f64>,
    pub mean_queries: f64,
    pub mean_sojourn: f64,
    pub mean_active: f64,
    pub mean_high_rate: f64,
    pub mean_power: f64,
    pub stable: bool,
    pub lambda_max: f64,
    /// `(n/k)·mu_bar - lambda`.
    pub stability_margin: f64,
}

impl ApproxReport {
    pub fn compute(config: &SystemConfig) -> Result<Self, ApproxError> {
        let mu_bar = mean_service_rate(config.p, config.mu0, config.mu1);
        let (stable, lambda_max) = stability_region(config);
        if !stable {
            return Err(ApproxError::Unstable {
                lambda: config.lambda,
                lambda_max,
            });
        }
        let n_bar = virtual_servers(config.n, config.k, config.lambda, mu_bar)?;
        let (rho, pi0) = queue_loads(&n_bar, config.lambda, mu_bar)?;
        Ok(ApproxReport {
            n: config.n,
            k: config.k,
            lambda: config.lambda,
            mu0: config.mu0,
            mu1: config.mu1,
            p: config.p,
            mu_bar,
            n_bar,
            rho,
            pi0,
            mean_queries: mean_queries(config)?,
            mean_sojourn: mean_sojourn(config)?,
            mean_active: mean_active_servers(config)?,
            mean_high_rate: mean_high_rate_servers(config)?,
            mean_power: mean_power(config)?,
            stable,
            lambda_max,
            stability_margin: lambda_max - config.lambda,
        })
    }

    pub fn csv_header() -> &'static str {
        "n,k,lambda,mu0,mu1,p,mu_bar,stable,lambda_max,R,sojourn,M,Mh,P"
    }

    /// One CSV row matching [`Self::csv_header`], numbers at 12
    /// significant digits.
    pub fn csv_row(&self) -> String {
        let f = crate::format_sig;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.n,
            self.k,
            f(self.lambda),
            f(self.mu0),
            f(self.mu1),
            f(self.p),
            f(self.mu_bar),
            self.stable,
            f(self.lambda_max),
            f(self.mean_queries),
            f(self.mean_sojourn),
            f(self.mean_active),
            f(self.mean_high_rate),
            f(self.mean_power),
        )
    }
}
