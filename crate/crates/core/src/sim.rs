//! Two independent stochastic simulators, a jump-chain sampler of the
//! lumped Markov model and a server-level discrete-event simulation, with
//! time-average estimators and replication statistics.
//!
//! Replications are deterministic given (config, settings): each one runs
//! on its own counter-derived ChaCha streams (one per server in the DES),
//! exponentials come from the inverse CDF, and simultaneous events break
//! ties by event kind then server index, so reruns are bit-identical
//! regardless of thread count.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::collections::VecDeque;
use std::io::Write;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::ctmc::active_servers;
use crate::model::{Estimate, MetricsReport, SystemConfig, TandemOccupancy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimMode {
    CtmcTrajectory,
    ServerDes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSettings {
    pub horizon: f64,
    pub warmup: f64,
    pub seed: u64,
    pub replications: u32,
    pub mode: SimMode,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("invalid simulation settings: {0}")]
    InvalidSettings(String),
    #[error("no completed queries after warmup")]
    NoCompletions,
}

impl SimSettings {
    /// Settings with the default warmup of 10% of the horizon.
    pub fn new(horizon: f64, seed: u64, replications: u32, mode: SimMode) -> Self {
        SimSettings {
            horizon,
            warmup: 0.1 * horizon,
            seed,
            replications,
            mode,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !self.horizon.is_finite() || self.horizon <= 0.0 {
            return Err(SimError::InvalidSettings("horizon must be > 0".into()));
        }
        if !(0.0..self.horizon).contains(&self.warmup) {
            return Err(SimError::InvalidSettings(
                "warmup must satisfy 0 <= warmup < horizon".into(),
            ));
        }
        if self.replications == 0 {
            return Err(SimError::InvalidSettings("replications must be >= 1".into()));
        }
        Ok(())
    }
}

/// Time averages of one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationResult {
    pub replication: u32,
    pub seed: u64,
    pub horizon: f64,
    pub mean_queries: f64,
    pub mean_active: f64,
    pub mean_high_rate: f64,
    pub mean_power: f64,
    pub mean_sojourn: f64,
    pub completed: u64,
    pub little_residual: f64,
    pub high_starts: u64,
    pub total_starts: u64,
    pub nonstationary: bool,
}

impl ReplicationResult {
    pub fn csv_header() -> &'static str {
        "replication,seed,horizon,R,M,Mh,P,sojourn,little_residual"
    }

    pub fn csv_row(&self) -> String {
        let f = crate::format_sig;
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.replication,
            self.seed,
            f(self.horizon),
            f(self.mean_queries),
            f(self.mean_active),
            f(self.mean_high_rate),
            f(self.mean_power),
            f(self.mean_sojourn),
            f(self.little_residual),
        )
    }
}

/// Aggregate report plus the per-replication rows it was built from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimOutput {
    pub report: MetricsReport,
    pub replications: Vec<ReplicationResult>,
}

impl SimOutput {
    /// Pooled fraction of service starts that drew the high rate.
    pub fn high_start_fraction(&self) -> f64 {
        let high: u64 = self.replications.iter().map(|r| r.high_starts).sum();
        let total: u64 = self.replications.iter().map(|r| r.total_starts).sum();
        if total == 0 {
            0.0
        } else {
            high as f64 / total as f64
        }
    }

    pub fn total_starts(&self) -> u64 {
        self.replications.iter().map(|r| r.total_starts).sum()
    }
}

/// One event-log record (behind the optional logging entry point).
#[derive(Debug, Clone, Copy)]
struct LogRecord {
    replication: u32,
    time: f64,
    kind: &'static str,
    query: u64,
    server: u32,
    high: bool,
}

pub const EVENT_LOG_HEADER: &str = "replication,time,event,query,server,high";

/// Runs the simulator selected by `settings.mode`.
pub fn simulate(config: &SystemConfig, settings: &SimSettings) -> Result<SimOutput, SimError> {
    simulate_impl(config, settings, settings.mode, None)
}

/// Jump-chain trajectory of the lumped Markov model.
pub fn simulate_ctmc(config: &SystemConfig, settings: &SimSettings) -> Result<SimOutput, SimError> {
    simulate_impl(config, settings, SimMode::CtmcTrajectory, None)
}

/// Server-level discrete-event simulation.
pub fn simulate_des(config: &SystemConfig, settings: &SimSettings) -> Result<SimOutput, SimError> {
    simulate_impl(config, settings, SimMode::ServerDes, None)
}

/// Like [`simulate`] but also writes a CSV event log (replications run
/// sequentially in that case).
pub fn simulate_with_event_log(
    config: &SystemConfig,
    settings: &SimSettings,
    log: &mut dyn Write,
) -> Result<SimOutput, SimError> {
    simulate_impl(config, settings, settings.mode, Some(log))
}

fn simulate_impl(
    config: &SystemConfig,
    settings: &SimSettings,
    mode: SimMode,
    log: Option<&mut dyn Write>,
) -> Result<SimOutput, SimError> {
    settings.validate()?;
    let logging = log.is_some();
    let run_one = move |rep: u32| -> (ReplicationResult, Vec<LogRecord>) {
        let rep_seed = derive_seed(settings.seed, rep);
        match mode {
            SimMode::CtmcTrajectory => run_ctmc_replication(config, settings, rep, rep_seed),
            SimMode::ServerDes => run_des_replication(config, settings, rep, rep_seed, logging),
        }
    };

    let results: Vec<(ReplicationResult, Vec<LogRecord>)> = if logging {
        (0..settings.replications).map(run_one).collect()
    } else {
        (0..settings.replications)
            .into_par_iter()
            .map(run_one)
            .collect()
    };

    if let Some(out) = log {
        writeln!(out, "{EVENT_LOG_HEADER}").ok();
        for (_, records) in &results {
            for r in records {
                writeln!(
                    out,
                    "{},{},{},{},{},{}",
                    r.replication,
                    crate::format_sig(r.time),
                    r.kind,
                    r.query,
                    r.server,
                    r.high
                )
                .ok();
            }
        }
    }

    let reps: Vec<ReplicationResult> = results.into_iter().map(|(r, _)| r).collect();
    let report = aggregate(settings, &reps);
    Ok(SimOutput {
        report,
        replications: reps,
    })
}

/// Mean sojourn with CI from completed-query samples, plus the
/// Little's-law residual `|R - lambda·sojourn| / R`.
pub fn estimate_sojourn(
    sojourns: &[f64],
    mean_queries: f64,
    lambda: f64,
) -> Result<(Estimate, f64), SimError> {
    if sojourns.is_empty() {
        return Err(SimError::NoCompletions);
    }
    let m = sojourns.len() as f64;
    let mean = sojourns.iter().sum::<f64>() / m;
    let (se, ci) = if sojourns.len() > 1 {
        let var = sojourns.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (m - 1.0);
        let se = (var / m).sqrt();
        (se, t_quantile_975(sojourns.len() - 1) * se)
    } else {
        (0.0, 0.0)
    };
    let residual = if mean_queries > 0.0 {
        (mean_queries - lambda * mean).abs() / mean_queries
    } else {
        0.0
    };
    Ok((
        Estimate {
            mean,
            std_error: se,
            ci95: ci,
        },
        residual,
    ))
}

fn derive_seed(seed: u64, rep: u32) -> u64 {
    splitmix64(seed ^ splitmix64(rep as u64 + 1))
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn uniform(rng: &mut ChaCha12Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Inverse-CDF exponential; reproducible across platforms.
fn exponential(rng: &mut ChaCha12Rng, rate: f64) -> f64 {
    let u = uniform(rng);
    -(1.0 - u).max(f64::MIN_POSITIVE).ln() / rate
}

fn bernoulli(rng: &mut ChaCha12Rng, p: f64) -> bool {
    uniform(rng) < p
}

fn binomial(rng: &mut ChaCha12Rng, m: u32, p: f64) -> u32 {
    (0..m).filter(|_| bernoulli(rng, p)).count() as u32
}

fn t_quantile_975(df: usize) -> f64 {
    StudentsT::new(0.0, 1.0, df as f64)
        .map(|t| t.inverse_cdf(0.975))
        .unwrap_or(1.96)
}

/// Time-weighted accumulator over the post-warmup window, split into
/// quarters for the nonstationarity trend check.
struct Accumulator {
    warmup: f64,
    horizon: f64,
    area_r: f64,
    area_m: f64,
    area_mh: f64,
    quarter_r: [f64; 4],
}

impl Accumulator {
    fn new(warmup: f64, horizon: f64) -> Self {
        Accumulator {
            warmup,
            horizon,
            area_r: 0.0,
            area_m: 0.0,
            area_mh: 0.0,
            quarter_r: [0.0; 4],
        }
    }

    fn add(&mut self, from: f64, to: f64, r: f64, m: f64, mh: f64) {
        let lo = from.max(self.warmup);
        let hi = to.min(self.horizon);
        if hi <= lo {
            return;
        }
        let w = hi - lo;
        self.area_r += r * w;
        self.area_m += m * w;
        self.area_mh += mh * w;
        let span = (self.horizon - self.warmup) / 4.0;
        for q in 0..4 {
            let qlo = self.warmup + span * q as f64;
            let qhi = qlo + span;
            let overlap = (hi.min(qhi) - lo.max(qlo)).max(0.0);
            self.quarter_r[q] += r * overlap;
        }
    }

    fn finish(
        &self,
        config: &SystemConfig,
        rep: u32,
        seed: u64,
        sojourns: &[f64],
        high_starts: u64,
        total_starts: u64,
    ) -> ReplicationResult {
        let t = self.horizon - self.warmup;
        let r = self.area_r / t;
        let m = self.area_m / t;
        let mh = self.area_mh / t;
        let (p0, p1) = config.power_levels();
        let power = p0 * (m - mh) + p1 * mh;
        let (sojourn, residual) = match estimate_sojourn(sojourns, r, config.lambda) {
            Ok((est, res)) => (est.mean, res),
            Err(_) => (0.0, 0.0),
        };
        let span = t / 4.0;
        let first = self.quarter_r[0] / span;
        let last = self.quarter_r[3] / span;
        ReplicationResult {
            replication: rep,
            seed,
            horizon: self.horizon,
            mean_queries: r,
            mean_active: m,
            mean_high_rate: mh,
            mean_power: power,
            mean_sojourn: sojourn,
            completed: sojourns.len() as u64,
            little_residual: residual,
            high_starts,
            total_starts,
            nonstationary: r > 1e-9 && last > 2.0 * first,
        }
    }
}

fn aggregate(settings: &SimSettings, reps: &[ReplicationResult]) -> MetricsReport {
    let m = reps.len() as f64;
    let stat = |vals: Vec<f64>| -> Estimate {
        let mean = vals.iter().sum::<f64>() / m;
        if vals.len() < 2 {
            return Estimate::exact(mean);
        }
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0);
        let se = (var / m).sqrt();
        Estimate {
            mean,
            std_error: se,
            ci95: t_quantile_975(vals.len() - 1) * se,
        }
    };
    let mean_active = stat(reps.iter().map(|r| r.mean_active).collect());
    let mean_high = stat(reps.iter().map(|r| r.mean_high_rate).collect());
    MetricsReport {
        mean_queries: stat(reps.iter().map(|r| r.mean_queries).collect()),
        mean_active,
        mean_high_rate: mean_high,
        mean_power: stat(reps.iter().map(|r| r.mean_power).collect()),
        mean_sojourn: stat(reps.iter().map(|r| r.mean_sojourn).collect()),
        horizon: settings.horizon,
        completed: reps.iter().map(|r| r.completed).sum(),
        seed: settings.seed,
        nonstationary: reps.iter().filter(|r| r.nonstationary).count() * 2 >= reps.len(),
    }
}

// ---------------------------------------------------------------------------
// Jump-chain trajectory of the lumped model.
// ---------------------------------------------------------------------------

fn run_ctmc_replication(
    config: &SystemConfig,
    settings: &SimSettings,
    rep: u32,
    rep_seed: u64,
) -> (ReplicationResult, Vec<LogRecord>) {
    let mut rng = ChaCha12Rng::seed_from_u64(rep_seed);
    let k = config.k as usize;
    let n = config.n;
    let (mu0, mu1, p, lambda) = (config.mu0, config.mu1, config.p, config.lambda);

    let mut y = vec![0u32; k];
    let mut h = vec![0u32; k];
    let mut t = 0.0f64;
    let mut acc = Accumulator::new(settings.warmup, settings.horizon);
    // FCFS correspondence: the oldest query departs first, so arrival
    // timestamps pair with departures in order.
    let mut arrivals: VecDeque<f64> = VecDeque::new();
    let mut sojourns: Vec<f64> = Vec::new();
    let mut high_starts = 0u64;
    let mut total_starts = 0u64;

    let crews_of = |y: &[u32]| -> Vec<u32> {
        active_servers(&TandemOccupancy(y.to_vec()), n)
    };

    loop {
        let crews = crews_of(&y);
        let mut total = lambda;
        for i in 0..k {
            if y[i] > 0 {
                total += h[i] as f64 * mu1 + (crews[i] - h[i]) as f64 * mu0;
            }
        }
        let r_now: u32 = y.iter().sum();
        let m_now: u32 = (0..k).filter(|&i| y[i] > 0).map(|i| crews[i]).sum();
        let mh_now: u32 = h.iter().sum();
        if total <= 0.0 {
            acc.add(t, settings.horizon, r_now as f64, m_now as f64, mh_now as f64);
            break;
        }
        let dt = exponential(&mut rng, total);
        let t_next = t + dt;
        acc.add(
            t,
            t_next.min(settings.horizon),
            r_now as f64,
            m_now as f64,
            mh_now as f64,
        );
        if t_next >= settings.horizon {
            break;
        }
        t = t_next;

        // select the event
        let mut u = uniform(&mut rng) * total;
        let mut event: Option<(usize, bool)> = None; // (stage, completer was high)
        if u < lambda {
            event = None;
        } else {
            u -= lambda;
            'outer: for i in 0..k {
                if y[i] == 0 {
                    continue;
                }
                let hi_rate = h[i] as f64 * mu1;
                if u < hi_rate {
                    event = Some((i, true));
                    break 'outer;
                }
                u -= hi_rate;
                let lo_rate = (crews[i] - h[i]) as f64 * mu0;
                if u < lo_rate {
                    event = Some((i, false));
                    break 'outer;
                }
                u -= lo_rate;
            }
            if event.is_none() {
                // numerical edge: attribute to the last occupied stage
                let i = (0..k).rev().find(|&i| y[i] > 0).expect("total > lambda");
                event = Some((i, h[i] > 0));
            }
        }

        match event {
            None => {
                // arrival
                arrivals.push_back(t);
                let was_empty = y[0] == 0;
                y[0] += 1;
                if was_empty {
                    let pool = crews_of(&y)[0];
                    let b = binomial(&mut rng, pool, p);
                    h[0] = b;
                    if t >= settings.warmup {
                        total_starts += pool as u64;
                        high_starts += b as u64;
                    }
                }
            }
            Some((i, was_high)) => {
                let c = was_high as u32;
                let below = (0..i).rev().find(|&j| y[j] > 0);
                let landing_empty = i < k - 1 && y[i + 1] == 0;
                y[i] -= 1;
                if i < k - 1 {
                    y[i + 1] += 1;
                    if landing_empty {
                        h[i + 1] = h[i] - c;
                    }
                    let mut draw_at = None;
                    if y[i] > 0 {
                        draw_at = Some(i);
                    } else {
                        h[i] = 0;
                        if let Some(j) = below {
                            draw_at = Some(j);
                        }
                    }
                    if let Some(j) = draw_at {
                        let xi = bernoulli(&mut rng, p) as u32;
                        if j == i {
                            h[i] = xi;
                        } else {
                            h[j] += xi;
                        }
                        if t >= settings.warmup {
                            total_starts += 1;
                            high_starts += xi as u64;
                        }
                    }
                } else {
                    // departure
                    let freed = n - k as u32 + 1;
                    let mut draw_at = None;
                    if y[i] > 0 {
                        draw_at = Some(i);
                    } else {
                        h[i] = 0;
                        if let Some(j) = below {
                            draw_at = Some(j);
                        }
                    }
                    if let Some(j) = draw_at {
                        let b = binomial(&mut rng, freed, p);
                        if j == i {
                            h[i] = b;
                        } else {
                            h[j] += b;
                        }
                        if t >= settings.warmup {
                            total_starts += freed as u64;
                            high_starts += b as u64;
                        }
                    }
                    let arrived = arrivals.pop_front().expect("departure implies an arrival");
                    if t >= settings.warmup {
                        sojourns.push(t - arrived);
                    }
                }
            }
        }

        #[cfg(debug_assertions)]
        {
            let crews = crews_of(&y);
            for i in 0..k {
                if y[i] == 0 {
                    debug_assert_eq!(h[i], 0, "h[{i}] nonzero on empty stage");
                } else {
                    debug_assert!(h[i] <= crews[i], "h[{i}]={} > crew {}", h[i], crews[i]);
                }
            }
        }
    }

    let result = acc.finish(config, rep, rep_seed, &sojourns, high_starts, total_starts);
    (result, Vec::new())
}

// ---------------------------------------------------------------------------
// Server-level discrete-event simulation.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
struct HeapEvent {
    time: f64,
    server: u32,
    version: u64,
    query: u64,
}

impl PartialEq for HeapEvent {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for HeapEvent {}
impl PartialOrd for HeapEvent {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for HeapEvent {
    // reversed: BinaryHeap pops the earliest event, ties by server index
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .total_cmp(&self.time)
            .then(other.server.cmp(&self.server))
            .then(other.version.cmp(&self.version))
    }
}

struct Query {
    arrival: f64,
    remaining: u32,
    departed: bool,
    /// Servers currently running a copy of this query.
    serving: Vec<u32>,
}

struct DesState {
    /// FIFO of pending query ids per server (may contain departed ids,
    /// skipped lazily).
    queues: Vec<VecDeque<u64>>,
    /// Current service per server: (query, high rate).
    serving: Vec<Option<(u64, bool)>>,
    version: Vec<u64>,
    queries: VecDeque<Query>,
    base: u64,
    next_id: u64,
    busy: u32,
    busy_high: u32,
    in_system: u32,
}

impl DesState {
    fn query_mut(&mut self, id: u64) -> &mut Query {
        &mut self.queries[(id - self.base) as usize]
    }

    fn trim(&mut self) {
        while let Some(front) = self.queries.front() {
            if front.departed && front.serving.is_empty() {
                self.queries.pop_front();
                self.base += 1;
            } else {
                break;
            }
        }
    }
}

fn run_des_replication(
    config: &SystemConfig,
    settings: &SimSettings,
    rep: u32,
    rep_seed: u64,
    logging: bool,
) -> (ReplicationResult, Vec<LogRecord>) {
    let n = config.n as usize;
    let k = config.k;
    let (mu0, mu1, p, lambda) = (config.mu0, config.mu1, config.p, config.lambda);

    // stream 0 drives arrivals; stream s+1 drives server s
    let mut arrival_rng = ChaCha12Rng::seed_from_u64(rep_seed);
    arrival_rng.set_stream(0);
    let mut server_rngs: Vec<ChaCha12Rng> = (0..n)
        .map(|s| {
            let mut r = ChaCha12Rng::seed_from_u64(rep_seed);
            r.set_stream(s as u64 + 1);
            r
        })
        .collect();

    let mut st = DesState {
        queues: vec![VecDeque::new(); n],
        serving: vec![None; n],
        version: vec![0; n],
        queries: VecDeque::new(),
        base: 0,
        next_id: 0,
        busy: 0,
        busy_high: 0,
        in_system: 0,
    };
    let mut heap: BinaryHeap<HeapEvent> = BinaryHeap::new();
    let mut acc = Accumulator::new(settings.warmup, settings.horizon);
    let mut sojourns: Vec<f64> = Vec::new();
    let mut high_starts = 0u64;
    let mut total_starts = 0u64;
    let mut log: Vec<LogRecord> = Vec::new();
    let mut t = 0.0f64;

    let mut next_arrival = if lambda > 0.0 {
        exponential(&mut arrival_rng, lambda)
    } else {
        f64::INFINITY
    };

    macro_rules! start_service {
        ($s:expr, $now:expr) => {{
            let s = $s;
            // skip departed queries at the head of the line
            loop {
                match st.queues[s].front() {
                    Some(&qid) => {
                        if st.query_mut(qid).departed {
                            st.queues[s].pop_front();
                            continue;
                        }
                        let high = bernoulli(&mut server_rngs[s], p);
                        let rate = if high { mu1 } else { mu0 };
                        let dur = exponential(&mut server_rngs[s], rate);
                        st.version[s] += 1;
                        st.serving[s] = Some((qid, high));
                        st.query_mut(qid).serving.push(s as u32);
                        st.busy += 1;
                        if high {
                            st.busy_high += 1;
                        }
                        if $now >= settings.warmup {
                            total_starts += 1;
                            if high {
                                high_starts += 1;
                            }
                        }
                        if logging {
                            log.push(LogRecord {
                                replication: rep,
                                time: $now,
                                kind: "start",
                                query: qid,
                                server: s as u32,
                                high,
                            });
                        }
                        heap.push(HeapEvent {
                            time: $now + dur,
                            server: s as u32,
                            version: st.version[s],
                            query: qid,
                        });
                        break;
                    }
                    None => {
                        st.serving[s] = None;
                        break;
                    }
                }
            }
        }};
    }

    loop {
        // next valid completion, skipping stale heap entries
        let next_completion = loop {
            match heap.peek() {
                Some(ev) => {
                    let s = ev.server as usize;
                    if st.version[s] == ev.version && st.serving[s].map(|(q, _)| q) == Some(ev.query)
                    {
                        break Some(*ev);
                    }
                    heap.pop();
                }
                None => break None,
            }
        };
        let t_completion = next_completion.map_or(f64::INFINITY, |e| e.time);
        // completions precede arrivals at equal timestamps
        let t_next = t_completion.min(next_arrival);
        let clipped = t_next.min(settings.horizon);
        acc.add(
            t,
            clipped,
            st.in_system as f64,
            st.busy as f64,
            st.busy_high as f64,
        );
        if t_next >= settings.horizon {
            break;
        }
        t = t_next;

        if t_completion <= next_arrival {
            let ev = next_completion.expect("completion selected");
            heap.pop();
            let s = ev.server as usize;
            let (qid, high) = st.serving[s].expect("server was serving");
            debug_assert_eq!(qid, ev.query);
            // completion at server s
            st.busy -= 1;
            if high {
                st.busy_high -= 1;
            }
            st.serving[s] = None;
            st.version[s] += 1;
            let front = st.queues[s].pop_front();
            debug_assert_eq!(front, Some(qid), "a server serves its head of line");
            {
                let q = st.query_mut(qid);
                let pos = q
                    .serving
                    .iter()
                    .position(|&x| x == s as u32)
                    .expect("server registered on the query");
                q.serving.swap_remove(pos);
                q.remaining -= 1;
                debug_assert!(!q.departed);
            }
            if logging {
                log.push(LogRecord {
                    replication: rep,
                    time: t,
                    kind: "complete",
                    query: qid,
                    server: s as u32,
                    high,
                });
            }
            if st.query_mut(qid).remaining == 0 {
                // k-th response: the query departs, remaining copies cancel
                let arrived = st.query_mut(qid).arrival;
                st.query_mut(qid).departed = true;
                st.in_system -= 1;
                if t >= settings.warmup {
                    sojourns.push(t - arrived);
                }
                let cancelled: Vec<u32> = std::mem::take(&mut st.query_mut(qid).serving);
                // deterministic processing order by server index
                let mut cancelled = cancelled;
                cancelled.sort_unstable();
                for &cs in &cancelled {
                    let cs = cs as usize;
                    let (cq, chigh) = st.serving[cs].expect("cancelled server was serving");
                    debug_assert_eq!(cq, qid);
                    st.busy -= 1;
                    if chigh {
                        st.busy_high -= 1;
                    }
                    st.serving[cs] = None;
                    st.version[cs] += 1;
                    let front = st.queues[cs].pop_front();
                    debug_assert_eq!(front, Some(qid));
                    if logging {
                        log.push(LogRecord {
                            replication: rep,
                            time: t,
                            kind: "cancel",
                            query: qid,
                            server: cs as u32,
                            high: chigh,
                        });
                    }
                    start_service!(cs, t);
                }
                st.trim();
            }
            start_service!(s, t);
        } else {
            // arrival: a copy joins every server's queue
            let qid = st.next_id;
            st.next_id += 1;
            st.queries.push_back(Query {
                arrival: t,
                remaining: k,
                departed: false,
                serving: Vec::with_capacity(4),
            });
            st.in_system += 1;
            if logging {
                log.push(LogRecord {
                    replication: rep,
                    time: t,
                    kind: "arrive",
                    query: qid,
                    server: u32::MAX,
                    high: false,
                });
            }
            for s in 0..n {
                st.queues[s].push_back(qid);
                if st.serving[s].is_none() {
                    start_service!(s, t);
                }
            }
            next_arrival = t + exponential(&mut arrival_rng, lambda);
        }
    }

    let result = acc.finish(config, rep, rep_seed, &sojourns, high_starts, total_starts);
    (result, log)
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
    fn settings_validation() {
        let mut s = SimSettings::new(100.0, 1, 2, SimMode::ServerDes);
        assert!(s.validate().is_ok());
        assert_eq!(s.warmup, 10.0);
        s.warmup = 100.0;
        assert!(s.validate().is_err());
        s.warmup = 10.0;
        s.replications = 0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn zero_arrivals_produce_zero_metrics() {
        let c = cfg(4, 3, 0.0, 0.5);
        let s = SimSettings::new(1000.0, 7, 2, SimMode::ServerDes);
        for out in [simulate_des(&c, &s).unwrap(), simulate_ctmc(&c, &s).unwrap()] {
            assert_eq!(out.report.mean_queries.mean, 0.0);
            assert_eq!(out.report.mean_active.mean, 0.0);
            assert_eq!(out.report.mean_power.mean, 0.0);
            assert_eq!(out.report.completed, 0);
        }
    }

    #[test]
    fn deterministic_across_runs_and_thread_counts() {
        let c = cfg(4, 3, 0.6, 0.5);
        let s = SimSettings::new(2000.0, 42, 4, SimMode::ServerDes);
        let a = simulate_des(&c, &s).unwrap();
        let b = simulate_des(&c, &s).unwrap();
        assert_eq!(a, b);
        let a = simulate_ctmc(&c, &s).unwrap();
        let b = simulate_ctmc(&c, &s).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn seed_changes_results() {
        let c = cfg(4, 3, 0.6, 0.5);
        let s1 = SimSettings::new(2000.0, 1, 2, SimMode::ServerDes);
        let s2 = SimSettings::new(2000.0, 2, 2, SimMode::ServerDes);
        let a = simulate_des(&c, &s1).unwrap();
        let b = simulate_des(&c, &s2).unwrap();
        assert_ne!(a.report.mean_queries.mean, b.report.mean_queries.mean);
    }

    #[test]
    fn pooled_two_server_system_matches_mm1() {
        // n=2, k=1, p=1: M/M/1 with rate 2*mu1
        let c = cfg(2, 1, 0.6, 1.0);
        let s = SimSettings::new(200_000.0, 3, 5, SimMode::ServerDes);
        let out = simulate_des(&c, &s).unwrap();
        let rho: f64 = 0.6 / 1.8;
        let expect = rho / (1.0 - rho);
        let got = out.report.mean_queries.mean;
        assert!(
            (got - expect).abs() < 3.0 * out.report.mean_queries.ci95.max(0.01),
            "R = {got}, want ~{expect}"
        );
    }

    #[test]
    fn two_server_full_join_sojourn_matches_classic_closed_form() {
        // (2,2) single rate: no cancellations; mean sojourn is
        // (12 - rho)/8 times the M/M/1 value
        let c = SystemConfig {
            mu0: 1.0,
            mu1: 1.0,
            ..cfg(2, 2, 0.5, 0.5)
        };
        let s = SimSettings::new(400_000.0, 19, 5, SimMode::ServerDes);
        let out = simulate_des(&c, &s).unwrap();
        let expect = (12.0 - 0.5) / 8.0 / (1.0 - 0.5);
        let got = out.report.mean_sojourn.mean;
        assert!(
            (got - expect).abs() < out.report.mean_sojourn.ci95.max(0.02),
            "sojourn {got} vs {expect}"
        );
    }

    #[test]
    fn single_server_sojourn_is_service_time() {
        // n=k=1: an M/M/1 at mu; at tiny lambda the sojourn is ~1/mu
        let c = SystemConfig {
            n: 1,
            k: 1,
            lambda: 0.001,
            mu0: 1.0,
            mu1: 1.0,
            p: 0.5,
            power: PowerModel::Explicit { p0: 1.0, p1: 1.0 },
        };
        let s = SimSettings::new(2_000_000.0, 11, 3, SimMode::ServerDes);
        let out = simulate_des(&c, &s).unwrap();
        assert!((out.report.mean_sojourn.mean - 1.0).abs() < 0.05);
    }

    #[test]
    fn little_law_holds_on_stable_runs() {
        let c = cfg(5, 4, 0.5, 0.5);
        let s = SimSettings::new(100_000.0, 5, 3, SimMode::ServerDes);
        let out = simulate_des(&c, &s).unwrap();
        for rep in &out.replications {
            assert!(rep.little_residual < 0.02, "residual {}", rep.little_residual);
        }
    }

    #[test]
    fn high_start_fraction_tracks_p() {
        let c = cfg(5, 4, 0.5, 0.35);
        let s = SimSettings::new(50_000.0, 9, 2, SimMode::ServerDes);
        let out = simulate_des(&c, &s).unwrap();
        let frac = out.high_start_fraction();
        let starts = out.total_starts() as f64;
        let sigma = (0.35f64 * 0.65 / starts).sqrt();
        assert!((frac - 0.35).abs() < 3.0 * sigma, "frac {frac}, starts {starts}");

        let out = simulate_ctmc(&c, &s).unwrap();
        let frac = out.high_start_fraction();
        let starts = out.total_starts() as f64;
        let sigma = (0.35f64 * 0.65 / starts).sqrt();
        assert!((frac - 0.35).abs() < 3.0 * sigma, "ctmc frac {frac}");
    }

    #[test]
    fn simulators_agree_with_each_other() {
        let c = cfg(3, 2, 0.4, 0.5);
        let s = SimSettings::new(150_000.0, 21, 5, SimMode::ServerDes);
        let des = simulate_des(&c, &s).unwrap();
        let traj = simulate_ctmc(&c, &s).unwrap();
        let d = (des.report.mean_queries.mean - traj.report.mean_queries.mean).abs();
        let tol = des.report.mean_queries.ci95 + traj.report.mean_queries.ci95;
        assert!(d < tol.max(0.02), "R mismatch {d} > {tol}");
        let d = (des.report.mean_high_rate.mean - traj.report.mean_high_rate.mean).abs();
        let tol = des.report.mean_high_rate.ci95 + traj.report.mean_high_rate.ci95;
        assert!(d < tol.max(0.02), "Mh mismatch {d} > {tol}");
    }

    #[test]
    fn unstable_run_is_flagged() {
        // lambda above the p=0 boundary 0.6 for n=20, k=18
        let c = cfg(20, 18, 0.9, 0.0);
        let s = SimSettings::new(20_000.0, 13, 3, SimMode::CtmcTrajectory);
        let out = simulate_ctmc(&c, &s).unwrap();
        assert!(out.report.nonstationary);
    }

    #[test]
    fn sojourn_estimator_errors_on_empty_log() {
        assert_eq!(
            estimate_sojourn(&[], 1.0, 0.5).unwrap_err(),
            SimError::NoCompletions
        );
    }

    #[test]
    fn event_log_lists_lifecycle() {
        let c = cfg(3, 2, 0.5, 0.5);
        let s = SimSettings::new(100.0, 17, 1, SimMode::ServerDes);
        let mut buf = Vec::new();
        let out = simulate_with_event_log(&c, &s, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with(EVENT_LOG_HEADER));
        assert!(text.contains(",arrive,"));
        assert!(text.contains(",complete,"));
        assert!(out.report.completed > 0);
    }
}
