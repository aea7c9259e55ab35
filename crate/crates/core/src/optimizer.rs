//! Tradeoff-curve generation over the high-rate probability p and
//! SLA-constrained minimum-power selection, built on the closed-form
//! approximation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::approx::{self, ApproxError, ApproxReport};
use crate::model::SystemConfig;

/// One point of a power-vs-queries tradeoff curve. Unstable points carry
/// no metric values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffPoint {
    pub p: f64,
    pub stable: bool,
    pub metrics: Option<TradeoffMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffMetrics {
    pub mean_queries: f64,
    pub mean_sojourn: f64,
    pub mean_active: f64,
    pub mean_high_rate: f64,
    pub mean_power: f64,
}

impl TradeoffPoint {
    pub fn csv_header() -> &'static str {
        "p,stable,R,sojourn,M,Mh,P"
    }

    pub fn csv_row(&self) -> String {
        let f = crate::format_sig;
        match &self.metrics {
            Some(m) => format!(
                "{},{},{},{},{},{},{}",
                f(self.p),
                self.stable,
                f(m.mean_queries),
                f(m.mean_sojourn),
                f(m.mean_active),
                f(m.mean_high_rate),
                f(m.mean_power),
            ),
            None => format!("{},{},,,,,", f(self.p), self.stable),
        }
    }
}

/// SLA constraint: a cap on the mean queries or the mean sojourn
/// (converted via Little's law).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlaConstraint {
    MaxMeanQueries(f64),
    MaxMeanSojourn(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlaQuery {
    pub lambda: f64,
    pub constraint: SlaConstraint,
    pub p_grid_step: f64,
    pub refine_tol: f64,
}

impl SlaQuery {
    pub fn new(lambda: f64, constraint: SlaConstraint) -> Self {
        SlaQuery {
            lambda,
            constraint,
            p_grid_step: 0.01,
            refine_tol: 1e-6,
        }
    }

    pub fn validate(&self) -> Result<(), OptimizerError> {
        let bound = match self.constraint {
            SlaConstraint::MaxMeanQueries(r) => r,
            SlaConstraint::MaxMeanSojourn(t) => t,
        };
        if bound.is_nan() || bound <= 0.0 {
            return Err(OptimizerError::InvalidQuery(
                "SLA bound must be positive".into(),
            ));
        }
        if self.p_grid_step.is_nan() || self.p_grid_step <= 0.0 || self.p_grid_step > 0.25 {
            return Err(OptimizerError::InvalidQuery(
                "p_grid_step must lie in (0, 0.25]".into(),
            ));
        }
        if self.refine_tol.is_nan() || self.refine_tol <= 0.0 {
            return Err(OptimizerError::InvalidQuery(
                "refine_tol must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OptimizerError {
    #[error("no p stabilizes lambda: even p=1 gives lambda_max={lambda_max_at_p1}")]
    Infeasible { lambda_max_at_p1: f64 },
    #[error("SLA infeasible: mean queries at p=1 is {r_at_p1}, above the bound")]
    SlaInfeasible { r_at_p1: f64 },
    #[error("invalid SLA query: {0}")]
    InvalidQuery(String),
    #[error(transparent)]
    Approx(#[from] ApproxError),
}

fn with_p_lambda(base: &SystemConfig, p: f64, lambda: f64) -> SystemConfig {
    SystemConfig {
        p,
        lambda,
        ..base.clone()
    }
}

/// Evaluates the approximation at each p; unstable points are flagged and
/// carry no values.
pub fn tradeoff_curve(base: &SystemConfig, lambda: f64, ps: &[f64]) -> Vec<TradeoffPoint> {
    ps.iter()
        .map(|&p| {
            let cfg = with_p_lambda(base, p, lambda);
            match ApproxReport::compute(&cfg) {
                Ok(rep) => TradeoffPoint {
                    p,
                    stable: true,
                    metrics: Some(TradeoffMetrics {
                        mean_queries: rep.mean_queries,
                        mean_sojourn: rep.mean_sojourn,
                        mean_active: rep.mean_active,
                        mean_high_rate: rep.mean_high_rate,
                        mean_power: rep.mean_power,
                    }),
                },
                Err(_) => TradeoffPoint {
                    p,
                    stable: false,
                    metrics: None,
                },
            }
        })
        .collect()
}

/// Smallest p with `lambda < (n/k)·mu_bar(p)`, solved in closed form from
/// the harmonic-mean rate. Returns 0 when even p = 0 is stable.
pub fn feasible_p_threshold(base: &SystemConfig, lambda: f64) -> Result<f64, OptimizerError> {
    let ratio = base.n as f64 / base.k as f64;
    let lambda_max_at_p1 = ratio * base.mu1;
    if lambda >= lambda_max_at_p1 {
        return Err(OptimizerError::Infeasible { lambda_max_at_p1 });
    }
    if lambda < ratio * base.mu0 || base.mu1 == base.mu0 {
        return Ok(0.0);
    }
    // 1/mu_bar(p) = 1/mu0 - p(1/mu0 - 1/mu1); stability needs
    // 1/mu_bar(p) < n/(k·lambda)
    let p_min = (1.0 / base.mu0 - ratio / lambda) / (1.0 / base.mu0 - 1.0 / base.mu1);
    Ok(p_min.clamp(0.0, 1.0))
}

/// Result of the SLA optimization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlaAnswer {
    pub p_star: f64,
    pub point: TradeoffPoint,
    /// True when the SLA constraint holds with equality at the optimum.
    pub binding: bool,
}

/// Minimum-power p meeting the SLA: bisects the monotone-decreasing
/// mean-queries curve for the smallest feasible p, then grid-scans the
/// (not necessarily monotone) power curve with golden-section refinement
/// around the grid argmin.
pub fn min_power_for_sla(
    base: &SystemConfig,
    query: &SlaQuery,
) -> Result<SlaAnswer, OptimizerError> {
    query.validate()?;
    let lambda = query.lambda;
    let r_max = match query.constraint {
        SlaConstraint::MaxMeanQueries(r) => r,
        SlaConstraint::MaxMeanSojourn(t) => lambda * t,
    };

    let p_min = feasible_p_threshold(base, lambda).map_err(|e| match e {
        OptimizerError::Infeasible { lambda_max_at_p1 } => OptimizerError::Approx(
            ApproxError::Unstable {
                lambda,
                lambda_max: lambda_max_at_p1,
            },
        ),
        other => other,
    })?;

    let r_of = |p: f64| -> Option<f64> {
        approx::mean_queries(&with_p_lambda(base, p, lambda)).ok()
    };
    let power_of = |p: f64| -> Option<f64> {
        approx::mean_power(&with_p_lambda(base, p, lambda)).ok()
    };

    let r_at_p1 = r_of(1.0).ok_or(OptimizerError::Approx(ApproxError::Unstable {
        lambda,
        lambda_max: base.n as f64 / base.k as f64 * base.mu1,
    }))?;
    if r_at_p1 > r_max {
        return Err(OptimizerError::SlaInfeasible { r_at_p1 });
    }

    // smallest p meeting the SLA; mean queries decrease strictly in p
    let p_sla = if r_of(p_min.min(1.0 - f64::EPSILON))
        .or_else(|| r_of(p_min + query.refine_tol))
        .map(|r| r <= r_max)
        .unwrap_or(false)
        && r_of(p_min).map(|r| r <= r_max).unwrap_or(false)
    {
        p_min
    } else {
        let mut lo = p_min; // infeasible or unstable end
        let mut hi = 1.0; // feasible end
        while hi - lo > query.refine_tol {
            let mid = 0.5 * (lo + hi);
            match r_of(mid) {
                Some(r) if r <= r_max => hi = mid,
                _ => lo = mid,
            }
        }
        hi
    };

    // scan power over the feasible band
    let start = p_sla.max(p_min);
    let mut best_p = start;
    let mut best_power = power_of(start).unwrap_or(f64::INFINITY);
    let mut grid = Vec::new();
    let mut p = start;
    while p < 1.0 {
        grid.push(p);
        p += query.p_grid_step;
    }
    grid.push(1.0);
    for &p in &grid {
        if let Some(w) = power_of(p) {
            if w < best_power {
                best_power = w;
                best_p = p;
            }
        }
    }
    // golden-section refinement in the bracket around the grid argmin
    let lo = (best_p - query.p_grid_step).max(start);
    let hi = (best_p + query.p_grid_step).min(1.0);
    let (gp, gw) = golden_min(lo, hi, query.refine_tol, |p| {
        power_of(p).unwrap_or(f64::INFINITY)
    });
    if gw < best_power {
        best_p = gp;
    }

    let point = tradeoff_curve(base, lambda, &[best_p]).pop().expect("one point");
    let binding = r_max.is_finite()
        && point
            .metrics
            .as_ref()
            .map(|m| m.mean_queries >= r_max * (1.0 - 1e-6) - 1e-9)
            .unwrap_or(false);
    Ok(SlaAnswer {
        p_star: best_p,
        point,
        binding,
    })
}

fn golden_min(mut a: f64, mut b: f64, tol: f64, f: impl Fn(f64) -> f64) -> (f64, f64) {
    const INV_PHI: f64 = 0.618_033_988_749_894_8;
    let mut c = b - (b - a) * INV_PHI;
    let mut d = a + (b - a) * INV_PHI;
    let mut fc = f(c);
    let mut fd = f(d);
    while (b - a).abs() > tol {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - (b - a) * INV_PHI;
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + (b - a) * INV_PHI;
            fd = f(d);
        }
    }
    let mid = 0.5 * (a + b);
    (mid, f(mid))
}
