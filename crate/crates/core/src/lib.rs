//! Simulator and analytics toolkit for (n,k) fork-join query-response
//! systems whose servers probabilistically select one of two service
//! rates.
//!
//! - [`model`]: configuration, validation, and the Markov state types.
//! - [`approx`]: closed-form tandem-queue approximation of the metrics.
//! - [`ctmc`]: the exact lumped chain, truncation, and stationary solver.
//! - [`sim`]: jump-chain and server-level discrete-event simulators.
//! - [`optimizer`]: tradeoff curves and SLA-constrained power minimization.
//!
//! ```
//! use forkjoin_core::{ApproxReport, PowerModel, SystemConfig};
//!
//! let cfg = SystemConfig {
//!     n: 20, k: 18, lambda: 0.5, mu0: 0.54, mu1: 0.9, p: 0.6,
//!     power: PowerModel::Quadratic { alpha: 1.0 },
//! }
//! .validate()?;
//! let report = ApproxReport::compute(&cfg)?;
//! assert!((report.mean_queries - 2.96186232941204).abs() < 1e-9);
//! # Ok::<(), Box<dyn std::error::Error>>(())
//! ```

pub mod approx;
pub mod ctmc;
pub mod model;
pub mod optimizer;
pub mod sim;

pub use approx::{ApproxError, ApproxReport};
pub use model::{
    Estimate, FullState, InvalidParameter, MetricsReport, PowerModel, SystemConfig,
    TandemOccupancy, Transition, TransitionLabel,
};
pub use sim::{SimMode, SimOutput, SimSettings};

/// Formats a number with 12 significant digits, plain decimal notation,
/// '.' separator, no locale dependence. Used by every CSV/JSON writer.
pub fn format_sig(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let mag = x.abs().log10().floor() as i32;
    if !(-5..15).contains(&mag) {
        return format!("{x:.11e}");
    }
    let decimals = (11 - mag).max(0) as usize;
    let s = format!("{x:.decimals$}");
    if s.contains('.') {
        let t = s.trim_end_matches('0').trim_end_matches('.');
        t.to_string()
    } else {
        s
    }
}

#[cfg(test)]
mod tests {
    use super::format_sig;

    #[test]
    fn significant_digit_formatting() {
        assert_eq!(format_sig(0.0), "0");
        assert_eq!(format_sig(1.0), "1");
        assert_eq!(format_sig(2.96186232941204), "2.96186232941");
        assert_eq!(format_sig(0.427985686434393), "0.427985686434");
        assert_eq!(format_sig(-0.5), "-0.5");
        assert_eq!(format_sig(123456.0), "123456");
        assert!(format_sig(1e20).contains('e'));
    }
}
