//! Domain types shared by every other module: system configuration with
//! validation, power model, and the tandem/full Markov state vectors.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Full parameterization of one experiment.
///
/// `n` servers, query departs after `k` responses, Poisson arrivals at
/// `lambda`, two service rates `mu0 <= mu1`, each service independently
/// runs at the high rate with probability `p`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    pub n: u32,
    pub k: u32,
    pub lambda: f64,
    pub mu0: f64,
    pub mu1: f64,
    pub p: f64,
    pub power: PowerModel,
}

/// Per-server power draw at each rate. Idle servers draw nothing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PowerModel {
    /// Explicit power levels (P0 at mu0, P1 at mu1).
    Explicit { p0: f64, p1: f64 },
    /// P(mu) = alpha * mu^2.
    Quadratic { alpha: f64 },
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("invalid parameter `{name}`: {reason}")]
pub struct InvalidParameter {
    pub name: &'static str,
    pub reason: String,
}

fn bad(name: &'static str, reason: impl Into<String>) -> InvalidParameter {
    InvalidParameter {
        name,
        reason: reason.into(),
    }
}

impl SystemConfig {
    /// Checks every type invariant and returns the config unchanged.
    pub fn validate(self) -> Result<Self, InvalidParameter> {
        if self.n == 0 {
            return Err(bad("n", "must be positive"));
        }
        if self.k == 0 || self.k > self.n {
            return Err(bad("k", format!("1 <= k <= n violated (k={}, n={})", self.k, self.n)));
        }
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(bad("lambda", "must be finite and >= 0"));
        }
        if !self.mu0.is_finite() || self.mu0 <= 0.0 {
            return Err(bad("mu0", "must be finite and > 0"));
        }
        if !self.mu1.is_finite() || self.mu1 <= 0.0 {
            return Err(bad("mu1", "must be finite and > 0"));
        }
        if self.mu0 > self.mu1 {
            return Err(bad("mu1", format!("mu0 <= mu1 violated ({} > {})", self.mu0, self.mu1)));
        }
        if !(0.0..=1.0).contains(&self.p) || !self.p.is_finite() {
            return Err(bad("p", "must lie in [0, 1]"));
        }
        let (p0, p1) = self.power.levels(self.mu0, self.mu1)?;
        if self.mu1 > self.mu0 && p1 <= p0 {
            return Err(bad("power", format!("P1 > P0 required when mu1 > mu0 (P0={p0}, P1={p1})")));
        }
        Ok(self)
    }

    /// (P0, P1) for this config's power model.
    pub fn power_levels(&self) -> (f64, f64) {
        self.power
            .levels(self.mu0, self.mu1)
            .expect("validated config has positive power levels")
    }

    pub fn parse_json(text: &str) -> Result<Self, InvalidParameter> {
        let cfg: SystemConfig =
            serde_json::from_str(text).map_err(|e| bad("config", e.to_string()))?;
        cfg.validate()
    }
}

impl PowerModel {
    /// Per-server power at each rate.
    pub fn levels(&self, mu0: f64, mu1: f64) -> Result<(f64, f64), InvalidParameter> {
        let (p0, p1) = match *self {
            PowerModel::Explicit { p0, p1 } => (p0, p1),
            PowerModel::Quadratic { alpha } => (alpha * mu0 * mu0, alpha * mu1 * mu1),
        };
        if !p0.is_finite() || !p1.is_finite() || p0 <= 0.0 || p1 <= 0.0 {
            return Err(bad("power", "power levels must be finite and > 0"));
        }
        Ok((p0, p1))
    }
}

/// Occupancy vector of the tandem representation: `y[i]` queries hold
/// exactly `i` completed responses, `i` in `0..k`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TandemOccupancy(pub Vec<u32>);

impl TandemOccupancy {
    pub fn empty(k: u32) -> Self {
        TandemOccupancy(vec![0; k as usize])
    }

    pub fn stages(&self) -> usize {
        self.0.len()
    }

    /// Total queries in the system.
    pub fn total(&self) -> u32 {
        self.0.iter().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.0.iter().all(|&y| y == 0)
    }
}

/// Lumped Markov state: occupancy plus per-stage counts of servers
/// currently serving at the high rate.
///
/// Invariants enforced on construction: `h[i] == 0` whenever `y[i] == 0`,
/// and `h[i] <= N_i(y)` on occupied stages.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FullState {
    pub y: TandemOccupancy,
    pub h: Vec<u32>,
}

impl FullState {
    /// Asserts the state invariants. `n` is the server count.
    pub fn new(y: TandemOccupancy, h: Vec<u32>, n: u32) -> Self {
        let k = y.stages();
        assert_eq!(h.len(), k, "h must have one entry per stage");
        let crews = crate::ctmc::active_servers(&y, n);
        for i in 0..k {
            if y.0[i] == 0 {
                assert_eq!(h[i], 0, "h[{i}] must be 0 on an empty stage");
            } else {
                assert!(
                    h[i] <= crews[i],
                    "h[{i}]={} exceeds crew size {}",
                    h[i],
                    crews[i]
                );
            }
        }
        FullState { y, h }
    }

    pub fn empty(k: u32) -> Self {
        FullState {
            y: TandemOccupancy::empty(k),
            h: vec![0; k as usize],
        }
    }

    pub fn total_high(&self) -> u32 {
        self.h.iter().sum()
    }
}

/// One outgoing transition of the full chain.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub target: FullState,
    pub rate: f64,
    pub label: TransitionLabel,
}

/// What the transition represents.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransitionLabel {
    /// External arrival; `drawn_high` is the number of high-rate draws
    /// among the pooled idle servers (0 when the stage was occupied).
    Arrival { drawn_high: u32 },
    /// Service completion at `stage` by a server of the given class,
    /// with `drawn_high` fresh high-rate draws among the servers that
    /// started new services as a result.
    Completion {
        stage: usize,
        high_server: bool,
        drawn_high: u32,
    },
}

/// Long-run time-average estimates with replication statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mean_queries: Estimate,
    pub mean_active: Estimate,
    pub mean_high_rate: Estimate,
    pub mean_power: Estimate,
    pub mean_sojourn: Estimate,
    /// Simulated time per replication.
    pub horizon: f64,
    /// Completed queries, summed over replications.
    pub completed: u64,
    pub seed: u64,
    /// Heuristic flag: R(t) trending upward after warmup.
    pub nonstationary: bool,
}

/// Point estimate with standard error and 95% CI half-width across
/// replications (zero for exact computations).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub std_error: f64,
    pub ci95: f64,
}

impl Estimate {
    pub fn exact(mean: f64) -> Self {
        Estimate {
            mean,
            std_error: 0.0,
            ci95: 0.0,
        }
    }
}
