//! Property tests for the model and approximation invariants.

use forkjoin_core::approx::{
    mean_active_servers, mean_active_servers_alt, mean_high_rate_servers, mean_power,
    mean_queries, mean_service_rate, queue_loads, stability_region, virtual_servers,
};
use forkjoin_core::ctmc::{active_servers, apply_move, binomial_pmf, enumerate_transitions};
use forkjoin_core::model::{FullState, PowerModel, SystemConfig, TandemOccupancy};
use proptest::prelude::*;

fn config_strategy() -> impl Strategy<Value = SystemConfig> {
    (2u32..12, 0.1f64..1.0, 0.05f64..1.0, 0.0f64..=1.0, 0.05f64..0.9).prop_flat_map(
        |(n, mu0, dmu, p, load)| {
            (1u32..=n).prop_map(move |k| {
                let mu1 = mu0 + dmu;
                let lambda = load * n as f64 / k as f64 * mean_service_rate(p, mu0, mu1);
                SystemConfig {
                    n,
                    k,
                    lambda,
                    mu0,
                    mu1,
                    p,
                    power: PowerModel::Quadratic { alpha: 1.0 },
                }
            })
        },
    )
}

fn state_strategy() -> impl Strategy<Value = (SystemConfig, FullState)> {
    config_strategy().prop_flat_map(|cfg| {
        let k = cfg.k as usize;
        let n = cfg.n;
        (
            proptest::collection::vec(0u32..4, k),
            proptest::collection::vec(0.0f64..=1.0, k),
        )
            .prop_map(move |(y, fracs)| {
                let y = TandemOccupancy(y);
                let crews = active_servers(&y, n);
                let h: Vec<u32> = (0..k)
                    .map(|i| {
                        if y.0[i] == 0 {
                            0
                        } else {
                            (fracs[i] * crews[i] as f64).floor() as u32
                        }
                    })
                    .collect();
                let state = FullState::new(y, h, n);
                (cfg.clone(), state)
            })
    })
}

proptest! {
    #[test]
    fn mu_bar_between_rates(p in 0.0f64..=1.0, mu0 in 0.05f64..2.0, d in 0.0f64..2.0) {
        let mu1 = mu0 + d;
        let m = mean_service_rate(p, mu0, mu1);
        prop_assert!(m >= mu0 - 1e-12 && m <= mu1 + 1e-12);
    }

    #[test]
    fn power_levels_monotone(mu0 in 0.05f64..2.0, d in 0.0f64..2.0, alpha in 0.1f64..5.0) {
        let mu1 = mu0 + d;
        let model = PowerModel::Quadratic { alpha };
        let (p0, p1) = model.levels(mu0, mu1).unwrap();
        prop_assert!(p1 >= p0);
    }

    #[test]
    fn queries_decrease_in_p_and_increase_in_lambda(cfg in config_strategy()) {
        prop_assume!(cfg.mu1 > cfg.mu0 + 1e-6);
        prop_assume!(cfg.p <= 0.98);
        let r = mean_queries(&cfg).unwrap();
        let bumped_p = SystemConfig { p: (cfg.p + 0.02).min(1.0), ..cfg.clone() };
        prop_assert!(mean_queries(&bumped_p).unwrap() < r);
        if cfg.lambda > 0.0 {
            let bumped_l = SystemConfig { lambda: cfg.lambda * 1.02, ..cfg.clone() };
            if stability_region(&bumped_l).0 {
                prop_assert!(mean_queries(&bumped_l).unwrap() > r);
            }
        }
    }

    #[test]
    fn lambda_max_increases_in_p(cfg in config_strategy()) {
        prop_assume!(cfg.mu1 > cfg.mu0 + 1e-6);
        prop_assume!(cfg.p <= 0.98);
        let (_, l0) = stability_region(&cfg);
        let bumped = SystemConfig { p: (cfg.p + 0.02).min(1.0), ..cfg.clone() };
        let (_, l1) = stability_region(&bumped);
        prop_assert!(l1 > l0);
    }

    #[test]
    fn first_busy_masses_sum_to_one(cfg in config_strategy()) {
        prop_assume!(cfg.lambda > 0.0);
        let mu_bar = mean_service_rate(cfg.p, cfg.mu0, cfg.mu1);
        let n_bar = virtual_servers(cfg.n, cfg.k, cfg.lambda, mu_bar).unwrap();
        let (rho, pi0) = queue_loads(&n_bar, cfg.lambda, mu_bar).unwrap();
        let mut sum = 0.0;
        let mut prod = 1.0;
        for i in 0..cfg.k as usize {
            sum += rho[i] * prod;
            prod *= pi0[i];
        }
        prop_assert!((sum + prod - 1.0).abs() < 1e-12);
    }

    #[test]
    fn virtual_servers_satisfy_recursion(cfg in config_strategy()) {
        let mu_bar = mean_service_rate(cfg.p, cfg.mu0, cfg.mu1);
        let n_bar = virtual_servers(cfg.n, cfg.k, cfg.lambda, mu_bar).unwrap();
        let (_, pi0) = queue_loads(&n_bar, cfg.lambda, mu_bar).unwrap();
        prop_assert!((n_bar[cfg.k as usize - 1] - (cfg.n - cfg.k + 1) as f64).abs() < 1e-12);
        for i in 0..cfg.k as usize - 1 {
            let rhs = 1.0 + n_bar[i + 1] * pi0[i + 1];
            prop_assert!((n_bar[i] - rhs).abs() < 1e-10);
        }
    }

    #[test]
    fn active_server_forms_agree(cfg in config_strategy()) {
        let a = mean_active_servers(&cfg).unwrap();
        let b = mean_active_servers_alt(&cfg).unwrap();
        prop_assert!((a - b).abs() < 1e-9);
        prop_assert!((mean_high_rate_servers(&cfg).unwrap() - cfg.p * a).abs() < 1e-12);
    }

    #[test]
    fn power_linear_in_p_at_fixed_active_mass(cfg in config_strategy()) {
        let m = mean_active_servers(&cfg).unwrap();
        let (p0, p1) = cfg.power_levels();
        let w = mean_power(&cfg).unwrap();
        prop_assert!((w - m * (p0 + (p1 - p0) * cfg.p)).abs() < 1e-9);
    }

    #[test]
    fn equal_rates_make_p_irrelevant(cfg in config_strategy(), p2 in 0.0f64..=1.0) {
        let flat = SystemConfig { mu1: cfg.mu0, ..cfg.clone() };
        prop_assume!(stability_region(&flat).0);
        let r1 = mean_queries(&flat).unwrap();
        let r2 = mean_queries(&SystemConfig { p: p2, ..flat }).unwrap();
        // near the boundary an ulp of mu_bar wobble is amplified, so
        // compare relatively
        prop_assert!((r1 - r2).abs() < 1e-9 * r1.max(1.0));
    }

    #[test]
    fn binomial_pmf_normalizes(m in 0u32..24, p in 0.0f64..=1.0) {
        let pmf = binomial_pmf(m, p);
        prop_assert_eq!(pmf.len(), m as usize + 1);
        let s: f64 = pmf.iter().sum();
        prop_assert!((s - 1.0).abs() < 1e-12);
        prop_assert!(pmf.iter().all(|&w| w >= 0.0));
    }

    #[test]
    fn exit_rate_conservation((cfg, state) in state_strategy()) {
        let crews = active_servers(&state.y, cfg.n);
        let expected: f64 = cfg.lambda
            + (0..cfg.k as usize)
                .filter(|&i| state.y.0[i] > 0)
                .map(|i| {
                    state.h[i] as f64 * cfg.mu1 + (crews[i] - state.h[i]) as f64 * cfg.mu0
                })
                .sum::<f64>();
        let set = enumerate_transitions(&state, &cfg);
        prop_assert!((set.total_rate - expected).abs() < 1e-9 * expected.max(1.0));
        for t in &set.transitions {
            prop_assert!(t.rate > 0.0);
            prop_assert_ne!(&t.target, &state);
        }
    }

    #[test]
    fn equal_rate_marginal_matches_single_rate_chain((cfg, state) in state_strategy()) {
        let mu = cfg.mu0;
        let flat = SystemConfig { mu1: mu, ..cfg.clone() };
        let crews = active_servers(&state.y, flat.n);
        let set = enumerate_transitions(&state, &flat);
        // group rates by the target occupancy and compare with the
        // single-rate pooled chain rates
        use std::collections::HashMap;
        let mut by_y: HashMap<Vec<u32>, f64> = HashMap::new();
        for t in &set.transitions {
            *by_y.entry(t.target.y.0.clone()).or_default() += t.rate;
        }
        if flat.lambda > 0.0 {
            let arr = apply_move(&state.y, 0).unwrap();
            let got = by_y.get(&arr.0).copied().unwrap_or(0.0);
            prop_assert!((got - flat.lambda).abs() < 1e-10);
        }
        for (i, &crew) in crews.iter().enumerate() {
            if state.y.0[i] == 0 {
                continue;
            }
            let target = apply_move(&state.y, i + 1).unwrap();
            let got = by_y.get(&target.0).copied().unwrap_or(0.0);
            let want = crew as f64 * mu;
            prop_assert!((got - want).abs() < 1e-9 * want.max(1.0));
        }
    }

    #[test]
    fn emptying_downstream_never_shrinks_a_pool(
        (cfg, state) in state_strategy(),
        stage in 0usize..16,
    ) {
        let k = cfg.k as usize;
        prop_assume!(k >= 2);
        let i = stage % (k - 1);
        prop_assume!(state.y.0[i + 1] > 0);
        let before = active_servers(&state.y, cfg.n);
        let mut emptied = state.y.clone();
        emptied.0[i + 1] = 0;
        let after = active_servers(&emptied, cfg.n);
        prop_assert!(after[i] >= before[i]);
    }
}
