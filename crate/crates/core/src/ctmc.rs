//! The exact lumped Markov chain of the fork-join system: pooled-server
//! recursion, transition enumeration for the (occupancy, high-rate-count)
//! state, breadth-first truncation, and a uniformization-based stationary
//! solver for small instances.

use std::collections::{HashMap, VecDeque};
use std::io::Write;

use thiserror::Error;

use crate::model::{
    Estimate, FullState, MetricsReport, SystemConfig, TandemOccupancy, Transition,
    TransitionLabel,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CtmcError {
    #[error("stage {stage} is empty; no query can depart from it")]
    EmptyStage { stage: usize },
    #[error("state space too large: {count} states exceeds cap {cap}")]
    StateSpaceTooLarge { count: usize, cap: usize },
    #[error("solver did not converge: residual {residual} after {iterations} iterations")]
    NotConverged { iterations: u64, residual: f64 },
    #[error("truncated chain is not irreducible from the empty state")]
    Reducible,
}

/// Pooled server counts `N_i(y)`: the last stage always has `n - k + 1`
/// servers; an empty downstream stage lends its pool upstream,
/// `N_i = 1 + N_{i+1}·1{{y_{i+1} = 0}}`.
pub fn active_servers(y: &TandemOccupancy, n: u32) -> Vec<u32> {
    let k = y.stages();
    let mut crews = vec![0u32; k];
    crews[k - 1] = n - k as u32 + 1;
    for i in (0..k - 1).rev() {
        crews[i] = 1 + if y.0[i + 1] == 0 { crews[i + 1] } else { 0 };
    }
    crews
}

/// The occupancy move `a_i(y)`: `i = 0` is an arrival, `i in 1..k` moves
/// the head of stage `i-1` up, `i = k` is a departure.
pub fn apply_move(y: &TandemOccupancy, i: usize) -> Result<TandemOccupancy, CtmcError> {
    let k = y.stages();
    debug_assert!(i <= k);
    let mut out = y.clone();
    if i == 0 {
        out.0[0] += 1;
        return Ok(out);
    }
    if y.0[i - 1] == 0 {
        return Err(CtmcError::EmptyStage { stage: i - 1 });
    }
    out.0[i - 1] -= 1;
    if i < k {
        out.0[i] += 1;
    }
    Ok(out)
}

/// Binomial(m, p) probability mass function as a dense vector.
pub fn binomial_pmf(m: u32, p: f64) -> Vec<f64> {
    let m = m as usize;
    let mut pmf = vec![0.0; m + 1];
    if p <= 0.0 {
        pmf[0] = 1.0;
        return pmf;
    }
    if p >= 1.0 {
        pmf[m] = 1.0;
        return pmf;
    }
    let q = 1.0 - p;
    pmf[0] = q.powi(m as i32);
    for b in 0..m {
        pmf[b + 1] = pmf[b] * (m - b) as f64 / (b + 1) as f64 * (p / q);
    }
    pmf
}

/// All outgoing transitions of one state with their exact rates.
#[derive(Debug, Clone)]
pub struct TransitionSet {
    pub source: FullState,
    pub transitions: Vec<Transition>,
    /// Sum of all transition rates; equals
    /// `lambda + sum_i (h_i·mu1 + (N_i - h_i)·mu0)` over occupied stages.
    pub total_rate: f64,
}

/// Enumerates the transitions of the lumped chain.
///
/// Arrival: the occupancy gains a stage-0 query; if stage 0 was empty the
/// pooled idle servers start fresh services, drawing high independently
/// with probability p (binomial split).
///
/// Completion at stage i by a high (rate `h_i·mu1`) or low
/// (rate `(N_i - h_i)·mu0`) server:
/// - the served query moves to stage i+1; if that stage was empty, the
///   rest of the crew follows it mid-service, carrying their rate classes;
/// - the completing server starts the next head-of-line service with a
///   fresh Bernoulli(p) draw, at stage i if it is still occupied,
///   otherwise at the highest occupied stage below;
/// - a departure from stage k-1 frees the whole crew of n-k+1 servers
///   (one completion, n-k cancellations); all of them start fresh
///   services, so the receiving stage's high count gains a
///   Binomial(n-k+1, p) draw.
pub fn enumerate_transitions(state: &FullState, config: &SystemConfig) -> TransitionSet {
    let n = config.n;
    let k = state.y.stages();
    let (mu0, mu1, p, lambda) = (config.mu0, config.mu1, config.p, config.lambda);
    let crews = active_servers(&state.y, n);
    let mut transitions = Vec::new();

    // External arrival.
    if lambda > 0.0 {
        let y_next = apply_move(&state.y, 0).expect("arrival is always possible");
        if state.y.0[0] > 0 {
            transitions.push(Transition {
                target: FullState::new(y_next, state.h.clone(), n),
                rate: lambda,
                label: TransitionLabel::Arrival { drawn_high: 0 },
            });
        } else {
            let pool = active_servers(&y_next, n)[0];
            for (b, w) in binomial_pmf(pool, p).into_iter().enumerate() {
                if w <= 0.0 {
                    continue;
                }
                let mut h = state.h.clone();
                h[0] = b as u32;
                transitions.push(Transition {
                    target: FullState::new(y_next.clone(), h, n),
                    rate: lambda * w,
                    label: TransitionLabel::Arrival {
                        drawn_high: b as u32,
                    },
                });
            }
        }
    }

    // Service completions.
    for i in 0..k {
        if state.y.0[i] == 0 {
            continue;
        }
        let crew = crews[i];
        let high = state.h[i];
        let y_next = apply_move(&state.y, i + 1).expect("stage is occupied");
        // highest occupied stage below i, the cascade target when i empties
        let below = (0..i).rev().find(|&j| state.y.0[j] > 0);
        for (completer_high, class_rate) in [
            (true, high as f64 * mu1),
            (false, (crew - high) as f64 * mu0),
        ] {
            if class_rate <= 0.0 {
                continue;
            }
            let c = completer_high as u32;
            let mut base = state.h.clone();
            if i < k - 1 {
                if state.y.0[i + 1] == 0 {
                    // crew minus the completer follows the query, classes kept
                    base[i + 1] = high - c;
                }
                if state.y.0[i] >= 2 {
                    // completer serves the new head with a fresh draw
                    for (xi, w) in [(0u32, 1.0 - p), (1u32, p)] {
                        if w <= 0.0 {
                            continue;
                        }
                        let mut h = base.clone();
                        h[i] = xi;
                        transitions.push(Transition {
                            target: FullState::new(y_next.clone(), h, n),
                            rate: class_rate * w,
                            label: TransitionLabel::Completion {
                                stage: i,
                                high_server: completer_high,
                                drawn_high: xi,
                            },
                        });
                    }
                } else {
                    // stage empties; the completer cascades below or idles
                    base[i] = 0;
                    match below {
                        Some(j) => {
                            for (xi, w) in [(0u32, 1.0 - p), (1u32, p)] {
                                if w <= 0.0 {
                                    continue;
                                }
                                let mut h = base.clone();
                                h[j] += xi;
                                transitions.push(Transition {
                                    target: FullState::new(y_next.clone(), h, n),
                                    rate: class_rate * w,
                                    label: TransitionLabel::Completion {
                                        stage: i,
                                        high_server: completer_high,
                                        drawn_high: xi,
                                    },
                                });
                            }
                        }
                        None => transitions.push(Transition {
                            target: FullState::new(y_next.clone(), base.clone(), n),
                            rate: class_rate,
                            label: TransitionLabel::Completion {
                                stage: i,
                                high_server: completer_high,
                                drawn_high: 0,
                            },
                        }),
                    }
                }
            } else {
                // departure: the whole crew of n-k+1 redraws
                let freed = n - k as u32 + 1;
                if state.y.0[i] >= 2 {
                    for (b, w) in binomial_pmf(freed, p).into_iter().enumerate() {
                        if w <= 0.0 {
                            continue;
                        }
                        let mut h = base.clone();
                        h[i] = b as u32;
                        transitions.push(Transition {
                            target: FullState::new(y_next.clone(), h, n),
                            rate: class_rate * w,
                            label: TransitionLabel::Completion {
                                stage: i,
                                high_server: completer_high,
                                drawn_high: b as u32,
                            },
                        });
                    }
                } else {
                    base[i] = 0;
                    match below {
                        Some(j) => {
                            for (b, w) in binomial_pmf(freed, p).into_iter().enumerate() {
                                if w <= 0.0 {
                                    continue;
                                }
                                let mut h = base.clone();
                                h[j] += b as u32;
                                transitions.push(Transition {
                                    target: FullState::new(y_next.clone(), h, n),
                                    rate: class_rate * w,
                                    label: TransitionLabel::Completion {
                                        stage: i,
                                        high_server: completer_high,
                                        drawn_high: b as u32,
                                    },
                                });
                            }
                        }
                        None => transitions.push(Transition {
                            target: FullState::new(y_next.clone(), base.clone(), n),
                            rate: class_rate,
                            label: TransitionLabel::Completion {
                                stage: i,
                                high_server: completer_high,
                                drawn_high: 0,
                            },
                        }),
                    }
                }
            }
        }
    }

    let total_rate = transitions.iter().map(|t| t.rate).sum();
    TransitionSet {
        source: state.clone(),
        transitions,
        total_rate,
    }
}

/// Reachable state space under a per-stage occupancy cap, with its sparse
/// generator. Transitions that would exceed the cap are dropped.
#[derive(Debug, Clone)]
pub struct TruncatedChain {
    pub states: Vec<FullState>,
    pub index: HashMap<FullState, usize>,
    pub y_max: u32,
    /// Retained off-diagonal entries per row: `(column, rate)`.
    pub rows: Vec<Vec<(usize, f64)>>,
    /// Diagonal entries: minus the retained outflow.
    pub diag: Vec<f64>,
}

pub const DEFAULT_STATE_CAP: usize = 5_000_000;

/// Smallest per-stage cap (at least 60) whose product-form tail bound
/// `max_i rho_i^y_max` is below 1e-12, when the config is stable.
pub fn default_y_max(config: &SystemConfig) -> u32 {
    let mu_bar = crate::approx::mean_service_rate(config.p, config.mu0, config.mu1);
    if let Ok(n_bar) = crate::approx::virtual_servers(config.n, config.k, config.lambda, mu_bar) {
        if let Ok((rho, _)) = crate::approx::queue_loads(&n_bar, config.lambda, mu_bar) {
            let max_rho = rho.iter().cloned().fold(0.0f64, f64::max);
            if max_rho > 0.0 && max_rho < 1.0 {
                let needed = (1e-12f64.ln() / max_rho.ln()).ceil() as u32;
                return needed.max(60);
            }
        }
    }
    60
}

/// Breadth-first reachability from the empty state, assembling the sparse
/// generator as it goes.
pub fn build_truncated_chain(
    config: &SystemConfig,
    y_max: u32,
    state_cap: usize,
) -> Result<TruncatedChain, CtmcError> {
    let k = config.k;
    let root = FullState::empty(k);
    let mut states = vec![root.clone()];
    let mut index = HashMap::new();
    index.insert(root.clone(), 0usize);
    let mut rows: Vec<Vec<(usize, f64)>> = Vec::new();
    let mut queue = VecDeque::from([0usize]);

    while let Some(si) = queue.pop_front() {
        let set = enumerate_transitions(&states[si].clone(), config);
        let mut row = Vec::with_capacity(set.transitions.len());
        for t in set.transitions {
            if t.target.y.0.iter().any(|&y| y > y_max) {
                continue; // truncated: outflow dropped
            }
            let ti = match index.get(&t.target) {
                Some(&ti) => ti,
                None => {
                    let ti = states.len();
                    if ti >= state_cap {
                        return Err(CtmcError::StateSpaceTooLarge {
                            count: ti + 1,
                            cap: state_cap,
                        });
                    }
                    states.push(t.target.clone());
                    index.insert(t.target.clone(), ti);
                    queue.push_back(ti);
                    ti
                }
            };
            row.push((ti, t.rate));
        }
        rows.push(row);
    }

    // merge duplicate columns within each row
    for row in &mut rows {
        row.sort_by_key(|&(c, _)| c);
        let mut merged: Vec<(usize, f64)> = Vec::with_capacity(row.len());
        for &(c, r) in row.iter() {
            match merged.last_mut() {
                Some(last) if last.0 == c => last.1 += r,
                _ => merged.push((c, r)),
            }
        }
        *row = merged;
    }

    let diag = rows
        .iter()
        .map(|row| -row.iter().map(|&(_, r)| r).sum::<f64>())
        .collect();

    Ok(TruncatedChain {
        states,
        index,
        y_max,
        rows,
        diag,
    })
}

impl TruncatedChain {
    pub fn n_states(&self) -> usize {
        self.states.len()
    }

    /// Edge-list dump: a state-index table in comment lines, then one
    /// `src_index dst_index rate` line per retained transition.
    pub fn dump_edge_list(&self, mut out: impl Write) -> std::io::Result<()> {
        for (i, s) in self.states.iter().enumerate() {
            let y: Vec<String> = s.y.0.iter().map(u32::to_string).collect();
            let h: Vec<String> = s.h.iter().map(u32::to_string).collect();
            writeln!(out, "# state {i} y=[{}] h=[{}]", y.join(","), h.join(","))?;
        }
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, rate) in row {
                writeln!(out, "{i} {j} {}", crate::format_sig(rate))?;
            }
        }
        Ok(())
    }

    /// True when every state can reach the empty state through retained
    /// transitions (reverse BFS over the generator).
    fn all_states_reach_empty(&self) -> bool {
        let m = self.n_states();
        let mut incoming: Vec<Vec<usize>> = vec![Vec::new(); m];
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, _) in row {
                incoming[j].push(i);
            }
        }
        let mut seen = vec![false; m];
        seen[0] = true;
        let mut queue = VecDeque::from([0usize]);
        let mut count = 1;
        while let Some(j) = queue.pop_front() {
            for &i in &incoming[j] {
                if !seen[i] {
                    seen[i] = true;
                    count += 1;
                    queue.push_back(i);
                }
            }
        }
        count == m
    }
}

pub const SOLVER_MAX_ITERATIONS: u64 = 1_000_000;

/// Stationary distribution via uniformization and power iteration:
/// `pi <- pi·(I + Q/Lambda)` until the generator residual `||pi·Q||_inf`
/// falls below `tol`.
pub fn stationary_distribution(chain: &TruncatedChain, tol: f64) -> Result<Vec<f64>, CtmcError> {
    let m = chain.n_states();
    if m == 1 {
        return Ok(vec![1.0]);
    }
    if !chain.all_states_reach_empty() {
        return Err(CtmcError::Reducible);
    }
    let lambda_u = chain.diag.iter().map(|d| -d).fold(0.0f64, f64::max) * 1.02;
    if lambda_u <= 0.0 {
        return Err(CtmcError::Reducible);
    }
    let mut pi = vec![1.0 / m as f64; m];
    let mut flow = vec![0.0f64; m];
    for it in 1..=SOLVER_MAX_ITERATIONS {
        flow.iter_mut().for_each(|x| *x = 0.0);
        for (i, row) in chain.rows.iter().enumerate() {
            let w = pi[i];
            if w == 0.0 {
                continue;
            }
            for &(j, rate) in row {
                flow[j] += w * rate;
            }
            flow[i] += w * chain.diag[i];
        }
        let residual = flow.iter().cloned().fold(0.0f64, |a, b| a.max(b.abs()));
        if residual < tol {
            return Ok(pi);
        }
        let mut sum = 0.0;
        for (p, f) in pi.iter_mut().zip(&flow) {
            // rounding can leave -0-scale dust; keep pi a probability vector
            *p = (*p + f / lambda_u).max(0.0);
            sum += *p;
        }
        pi.iter_mut().for_each(|p| *p /= sum);
        if it == SOLVER_MAX_ITERATIONS {
            return Err(CtmcError::NotConverged {
                iterations: it,
                residual,
            });
        }
    }
    unreachable!()
}

/// Exact long-run metrics from a stationary vector. CI fields are zero.
pub fn chain_metrics(chain: &TruncatedChain, pi: &[f64], config: &SystemConfig) -> MetricsReport {
    let mut r = 0.0;
    let mut m_active = 0.0;
    let mut m_high = 0.0;
    for (s, &w) in chain.states.iter().zip(pi) {
        r += w * s.y.total() as f64;
        m_high += w * s.total_high() as f64;
        let crews = active_servers(&s.y, config.n);
        let busy: u32 = s
            .y
            .0
            .iter()
            .zip(&crews)
            .filter(|(&y, _)| y > 0)
            .map(|(_, &c)| c)
            .sum();
        m_active += w * busy as f64;
    }
    let (p0, p1) = config.power_levels();
    let power = p0 * (m_active - m_high) + p1 * m_high;
    let sojourn = if config.lambda > 0.0 {
        r / config.lambda
    } else {
        0.0
    };
    MetricsReport {
        mean_queries: Estimate::exact(r),
        mean_active: Estimate::exact(m_active),
        mean_high_rate: Estimate::exact(m_high),
        mean_power: Estimate::exact(power),
        mean_sojourn: Estimate::exact(sojourn),
        horizon: 0.0,
        completed: 0,
        seed: 0,
        nonstationary: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::PowerModel;

    fn cfg(n: u32, k: u32, lambda: f64, p: f64) -> SystemConfig {
        SystemConfig {
            n,
            k,
            lambda,
            mu0: 0.54,
            mu1: 0.9,
            p,
            power: PowerModel::Quadratic { alpha: 1.0 },
        }
    }

    #[test]
    fn active_servers_recursion() {
        // occupied next stage pins the crew to one
        let y = TandemOccupancy(vec![2, 1, 0]);
        let crews = active_servers(&y, 5);
        assert_eq!(crews, vec![1, 1 + 3, 3]);

        // a lone fresh query pools all n servers
        let mut y = TandemOccupancy::empty(18);
        y.0[0] = 1;
        let crews = active_servers(&y, 20);
        for (i, &c) in crews.iter().enumerate() {
            assert_eq!(c, 20 - i as u32);
        }

        // last stage is always n-k+1
        let y = TandemOccupancy(vec![4, 0, 7, 1, 2, 0, 0, 3, 0, 0, 0, 0, 5, 0, 0, 0, 0, 1]);
        assert_eq!(active_servers(&y, 20)[17], 3);
    }

    #[test]
    fn occupancy_moves() {
        let y = TandemOccupancy(vec![0, 0]);
        assert_eq!(apply_move(&y, 0).unwrap().0, vec![1, 0]);
        let y = TandemOccupancy(vec![1, 0]);
        assert_eq!(apply_move(&y, 1).unwrap().0, vec![0, 1]);
        let y = TandemOccupancy(vec![0, 1]);
        assert_eq!(apply_move(&y, 2).unwrap().0, vec![0, 0]);
        assert_eq!(
            apply_move(&y, 1),
            Err(CtmcError::EmptyStage { stage: 0 })
        );
    }

    #[test]
    fn arrival_into_empty_system_splits_binomially() {
        let c = cfg(3, 2, 0.7, 0.4);
        let set = enumerate_transitions(&FullState::empty(2), &c);
        // N_0(a_0(empty)) = 1 + N_1 = 3, so four binomial targets
        assert_eq!(set.transitions.len(), 4);
        let pmf = binomial_pmf(3, 0.4);
        for t in &set.transitions {
            match t.label {
                TransitionLabel::Arrival { drawn_high } => {
                    assert!((t.rate - 0.7 * pmf[drawn_high as usize]).abs() < 1e-15);
                    assert_eq!(t.target.h[0], drawn_high);
                }
                _ => panic!("only arrivals leave the empty state"),
            }
        }
        assert!((set.total_rate - 0.7).abs() < 1e-15);
    }

    #[test]
    fn departure_exit_rates_conserve_service_capacity() {
        // n=2, k=1, one query served by both servers, one of them high
        let c = cfg(2, 1, 0.3, 0.5);
        let z = FullState::new(TandemOccupancy(vec![1]), vec![1], 2);
        let set = enumerate_transitions(&z, &c);
        let completion_total: f64 = set
            .transitions
            .iter()
            .filter(|t| matches!(t.label, TransitionLabel::Completion { .. }))
            .map(|t| t.rate)
            .sum();
        assert!((completion_total - (0.9 + 0.54)).abs() < 1e-12);
        // the system empties, so every completion target is the zero state
        for t in &set.transitions {
            if matches!(t.label, TransitionLabel::Completion { .. }) {
                assert!(t.target.y.is_empty());
                assert_eq!(t.target.h, vec![0]);
            }
        }
        assert!((set.total_rate - (0.3 + 1.44)).abs() < 1e-12);
    }

    #[test]
    fn departure_with_backlog_redraws_the_whole_crew() {
        // n=2, k=1, two queued queries: a departure frees both servers
        // (one completion, one cancellation) and both draw fresh classes
        let c = cfg(2, 1, 0.3, 0.5);
        let z = FullState::new(TandemOccupancy(vec![2]), vec![1], 2);
        let set = enumerate_transitions(&z, &c);
        let mut by_h: HashMap<u32, f64> = HashMap::new();
        for t in &set.transitions {
            if matches!(t.label, TransitionLabel::Completion { .. }) {
                assert_eq!(t.target.y.0, vec![1]);
                *by_h.entry(t.target.h[0]).or_default() += t.rate;
            }
        }
        let total = 0.9 + 0.54;
        let pmf = binomial_pmf(2, 0.5);
        for (b, w) in pmf.iter().enumerate() {
            assert!((by_h[&(b as u32)] - total * w).abs() < 1e-12);
        }
    }

    #[test]
    fn y_max_default_tracks_the_tail_bound() {
        // light load: the floor of 60 applies
        assert_eq!(default_y_max(&cfg(20, 18, 0.1, 0.6)), 60);
        // near the boundary the cap grows so max rho^y_max < 1e-12
        let c = cfg(20, 18, 0.77, 0.6);
        let ym = default_y_max(&c);
        assert!(ym > 60);
        let mu_bar = crate::approx::mean_service_rate(0.6, 0.54, 0.9);
        let n_bar = crate::approx::virtual_servers(20, 18, 0.77, mu_bar).unwrap();
        let (rho, _) = crate::approx::queue_loads(&n_bar, 0.77, mu_bar).unwrap();
        let max_rho = rho.iter().cloned().fold(0.0f64, f64::max);
        assert!(max_rho.powi(ym as i32) < 1e-12);
    }

    #[test]
    fn rate_conservation_on_assorted_states() {
        let c = cfg(6, 4, 0.8, 0.35);
        let states = [
            FullState::new(TandemOccupancy(vec![2, 0, 1, 3]), vec![1, 0, 1, 2], 6),
            FullState::new(TandemOccupancy(vec![0, 1, 0, 0]), vec![0, 2, 0, 0], 6),
            FullState::new(TandemOccupancy(vec![1, 0, 0, 0]), vec![3, 0, 0, 0], 6),
            FullState::new(TandemOccupancy(vec![0, 0, 0, 2]), vec![0, 0, 0, 1], 6),
        ];
        for z in states {
            let crews = active_servers(&z.y, 6);
            let expected: f64 = c.lambda
                + (0..4)
                    .filter(|&i| z.y.0[i] > 0)
                    .map(|i| z.h[i] as f64 * 0.9 + (crews[i] - z.h[i]) as f64 * 0.54)
                    .sum::<f64>();
            let set = enumerate_transitions(&z, &c);
            assert!(
                (set.total_rate - expected).abs() < 1e-12,
                "rate conservation failed for {z:?}"
            );
            for t in &set.transitions {
                assert!(t.rate > 0.0);
                assert_ne!(t.target, z);
            }
        }
    }

    #[test]
    fn equal_rates_marginalize_to_single_rate_chain() {
        let c = SystemConfig {
            mu0: 0.7,
            mu1: 0.7,
            ..cfg(5, 3, 0.6, 0.4)
        };
        let z = FullState::new(TandemOccupancy(vec![1, 2, 1]), vec![1, 0, 2], 5);
        let crews = active_servers(&z.y, 5);
        let set = enumerate_transitions(&z, &c);
        // group rates by the target occupancy
        let mut by_y: HashMap<Vec<u32>, f64> = HashMap::new();
        for t in &set.transitions {
            *by_y.entry(t.target.y.0.clone()).or_default() += t.rate;
        }
        for (i, &crew) in crews.iter().enumerate() {
            if z.y.0[i] == 0 {
                continue;
            }
            let target = apply_move(&z.y, i + 1).unwrap();
            let got = by_y[&target.0];
            assert!((got - crew as f64 * 0.7).abs() < 1e-12);
        }
        let arr = apply_move(&z.y, 0).unwrap();
        assert!((by_y[&arr.0] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn truncated_chain_small_instances() {
        let chain = build_truncated_chain(&cfg(2, 1, 0.3, 0.5), 50, DEFAULT_STATE_CAP).unwrap();
        assert!(chain.n_states() <= 51 * 3 + 1);
        // rows sum to zero with the retained-outflow diagonal
        for (row, &d) in chain.rows.iter().zip(&chain.diag) {
            let s: f64 = row.iter().map(|&(_, r)| r).sum();
            assert!((s + d).abs() < 1e-12);
        }

        let chain = build_truncated_chain(&cfg(3, 2, 0.4, 0.5), 30, DEFAULT_STATE_CAP).unwrap();
        assert!(chain.n_states() > 100);
        for (row, &d) in chain.rows.iter().zip(&chain.diag) {
            for &(_, r) in row {
                assert!(r >= 0.0);
            }
            let s: f64 = row.iter().map(|&(_, r)| r).sum();
            assert!((s + d).abs() < 1e-12);
        }
    }

    #[test]
    fn state_cap_guard() {
        let err = build_truncated_chain(&cfg(3, 2, 0.4, 0.5), 30, 10).unwrap_err();
        assert!(matches!(err, CtmcError::StateSpaceTooLarge { cap: 10, .. }));
    }

    #[test]
    fn stationary_vector_is_a_probability_distribution() {
        let c = cfg(3, 2, 0.5, 0.5);
        let chain = build_truncated_chain(&c, 40, DEFAULT_STATE_CAP).unwrap();
        let pi = stationary_distribution(&chain, 1e-12).unwrap();
        assert!(pi.iter().all(|&w| w >= 0.0));
        assert!((pi.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pooled_single_stage_recovers_mm1() {
        // n=2, k=1, p=1: both servers always high, pooled rate 2*mu1
        let c = cfg(2, 1, 0.6, 1.0);
        let chain = build_truncated_chain(&c, 60, DEFAULT_STATE_CAP).unwrap();
        let pi = stationary_distribution(&chain, 1e-12).unwrap();
        let rho: f64 = 0.6 / (2.0 * 0.9);
        for (s, &w) in chain.states.iter().zip(&pi) {
            let m = s.y.total();
            let expect = (1.0 - rho) * rho.powi(m as i32);
            assert!(
                (w - expect).abs() < 1e-10,
                "pi({m}) = {w}, expected {expect}"
            );
        }
        let metrics = chain_metrics(&chain, &pi, &c);
        assert!((metrics.mean_queries.mean - rho / (1.0 - rho)).abs() < 1e-10);
        // two servers busy whenever the system is non-empty
        assert!((metrics.mean_active.mean - 2.0 * rho).abs() < 1e-10);
        assert_eq!(metrics.mean_active.ci95, 0.0);
    }

    #[test]
    fn two_server_full_join_matches_classic_closed_form() {
        // (2,2) with a single rate: mean sojourn is the classic
        // (12 - rho)/8 multiple of the M/M/1 sojourn 1/(mu - lambda)
        for lambda in [0.2, 0.5, 0.8] {
            let c = SystemConfig {
                mu0: 1.0,
                mu1: 1.0,
                ..cfg(2, 2, lambda, 0.5)
            };
            let chain = build_truncated_chain(&c, 80, DEFAULT_STATE_CAP).unwrap();
            let pi = stationary_distribution(&chain, 1e-13).unwrap();
            let metrics = chain_metrics(&chain, &pi, &c);
            let rho = lambda / 1.0;
            let expect = (12.0 - rho) / 8.0 / (1.0 - lambda);
            assert!(
                (metrics.mean_sojourn.mean - expect).abs() < 1e-7,
                "lambda={lambda}: sojourn {} vs closed form {expect}",
                metrics.mean_sojourn.mean
            );
        }
    }

    #[test]
    fn truncation_tail_insensitivity() {
        let c = cfg(2, 1, 0.4, 0.5);
        let r: Vec<f64> = [40, 60]
            .iter()
            .map(|&ym| {
                let chain = build_truncated_chain(&c, ym, DEFAULT_STATE_CAP).unwrap();
                let pi = stationary_distribution(&chain, 1e-12).unwrap();
                chain_metrics(&chain, &pi, &c).mean_queries.mean
            })
            .collect();
        assert!((r[0] - r[1]).abs() < 1e-8);
    }

    #[test]
    fn zero_arrival_chain_is_trivial() {
        let c = cfg(3, 2, 0.0, 0.5);
        let chain = build_truncated_chain(&c, 50, DEFAULT_STATE_CAP).unwrap();
        assert_eq!(chain.n_states(), 1);
        let pi = stationary_distribution(&chain, 1e-12).unwrap();
        let m = chain_metrics(&chain, &pi, &c);
        assert_eq!(m.mean_queries.mean, 0.0);
        assert_eq!(m.mean_power.mean, 0.0);
    }

    #[test]
    fn edge_list_dump_has_states_and_edges() {
        let c = cfg(2, 1, 0.3, 0.5);
        let chain = build_truncated_chain(&c, 5, DEFAULT_STATE_CAP).unwrap();
        let mut buf = Vec::new();
        chain.dump_edge_list(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.lines().filter(|l| l.starts_with("# state")).count() == chain.n_states());
        assert!(text.lines().any(|l| !l.starts_with('#')));
    }
}
