use super::*;
use crate::rng;
use proptest::prelude::*;
use rand_distr::{Distribution, StandardNormal};

fn normal(g: &mut impl rand::Rng) -> f64 {
    let v: f64 = StandardNormal.sample(g);
    v
}

/// Random instance with daily-scale returns.
fn instance(d: usize, n: usize, seed: u64) -> AllocationProblem {
    let mut g = rng::seeded(seed);
    let mu: Vec<f64> = (0..d).map(|j| 0.002 - 0.0007 * j as f64).collect();
    let vol: Vec<f64> = (0..d).map(|j| 0.008 + 0.004 * j as f64).collect();
    let scen = DMatrix::from_fn(n, d, |_, j| mu[j] + vol[j] * normal(&mut g));
    let (m, s) = crate::stats::mean_cov(&scen);
    AllocationProblem::new(m, s, scen, DVector::from_element(d, 1.0 / d as f64))
}

/// Exhaustive search over the 0.01 simplex grid for d = 3.
fn grid_min(p: &AllocationProblem) -> (f64, DVector<f64>) {
    let mut best = (f64::INFINITY, DVector::zeros(3));
    for i in 0..=100 {
        for k in 0..=(100 - i) {
            let w = DVector::from_vec(vec![i as f64 / 100.0, k as f64 / 100.0, (100 - i - k) as f64 / 100.0]);
            let inside = (0..3).all(|j| w[j] >= p.lower[j] - 1e-12 && w[j] <= p.upper[j] + 1e-12)
                && (&w - &p.prev_weights).abs().sum() <= p.tau + 1e-12;
            if !inside {
                continue;
            }
            let f = p.objective_at(&w).total;
            if f < best.0 {
                best = (f, w);
            }
        }
    }
    best
}

fn assert_feasible(p: &AllocationProblem, r: &AllocationResult) {
    let w = &r.weights;
    assert!((w.sum() - 1.0).abs() <= 1e-8, "budget {}", w.sum());
    for j in 0..p.d() {
        assert!(w[j] >= p.lower[j] - 1e-8 && w[j] <= p.upper[j] + 1e-8, "box {j}: {}", w[j]);
    }
    assert!((w - &p.prev_weights).abs().sum() <= p.tau + 1e-8);
    assert!(r.slacks.iter().all(|&s| s >= -1e-10));
}

#[test]
fn cvar_examples() {
    assert_eq!(cvar_empirical(&[0.3; 7], 0.9), (0.3, 0.3));
    let mut g = rng::seeded(1);
    let l: Vec<f64> = (0..20).map(|_| normal(&mut g)).collect();
    let max = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (_, c) = cvar_empirical(&l, 0.95);
    assert!((c - max).abs() < 1e-12);
    let l: Vec<f64> = (1..=10).map(f64::from).collect();
    let (z, c) = cvar_empirical(&l, 0.8);
    assert!((c - 9.5).abs() < 1e-12);
    assert_eq!(z, 8.0);
}

proptest! {
    #[test]
    fn cvar_matches_enumeration(l in prop::collection::vec(-5.0f64..5.0, 1..40), alpha in 0.05f64..0.99) {
        let (z, c) = cvar_empirical(&l, alpha);
        let k = 1.0 / ((1.0 - alpha) * l.len() as f64);
        let f = |t: f64| t + k * l.iter().map(|&x| (x - t).max(0.0)).sum::<f64>();
        let brute = l.iter().map(|&t| f(t)).fold(f64::INFINITY, f64::min);
        prop_assert!((c - brute).abs() <= 1e-10 * (1.0 + brute.abs()));
        prop_assert!(l.contains(&z));
        let mean = l.iter().sum::<f64>() / l.len() as f64;
        prop_assert!(c >= mean - 1e-12 && c >= z - 1e-12);
    }

    #[test]
    fn projection_stays_in_ball(
        a in prop::collection::vec(0.0f64..1.0, 4),
        b in prop::collection::vec(0.0f64..1.0, 4),
        tau in 0.0f64..2.5,
    ) {
        let norm = |v: Vec<f64>| {
            let s: f64 = v.iter().sum::<f64>() + 1e-9;
            DVector::from_iterator(4, v.into_iter().map(|x| (x + 1e-9 / 4.0) / s))
        };
        let (t, p) = (norm(a), norm(b));
        let out = project_partial_rebalance(&t, &p, tau);
        prop_assert!((&out - &p).abs().sum() <= tau + 1e-12);
        prop_assert!((out.sum() - 1.0).abs() <= 1e-12);
    }
}

#[test]
fn projection_examples() {
    let prev = DVector::from_vec(vec![1.0, 0.0]);
    let target = DVector::from_vec(vec![0.0, 1.0]);
    let out = project_partial_rebalance(&target, &prev, 0.2);
    assert!((out[0] - 0.9).abs() < 1e-15 && (out[1] - 0.1).abs() < 1e-15);
    assert_eq!(project_partial_rebalance(&target, &prev, 0.0), prev);
    let near = DVector::from_vec(vec![0.95, 0.05]);
    assert_eq!(project_partial_rebalance(&near, &prev, 0.2), near);
}

#[test]
fn description_dimensions() {
    let p = instance(2, 3, 1);
    let qp = build_epigraph_qp(&p).unwrap();
    assert_eq!(qp.n_vars(), 10);
    assert_eq!(qp.equalities.len(), 3);
    assert_eq!(qp.inequalities.len(), 15);
    assert_eq!(qp.count(RowFamily::BoxLower), 2);
    assert_eq!(qp.count(RowFamily::BoxUpper), 2);
    assert_eq!(qp.count(RowFamily::SlackNonneg), 3);
    assert_eq!(qp.count(RowFamily::Epigraph), 3);
    assert_eq!(qp.count(RowFamily::SplitNonneg), 4);
    assert_eq!(qp.count(RowFamily::Turnover), 1);
    let sp = qp.layout.s_plus(0).unwrap();
    assert_eq!(qp.linear[sp], 0.0);
    assert_eq!(qp.linear[qp.layout.u(0)], p.tail_cap());

    let mut q = p.clone();
    q.kappa = 0.003;
    let qp = build_epigraph_qp(&q).unwrap();
    assert_eq!(qp.linear[qp.layout.s_minus(1).unwrap()], 0.003);

    q.tau = f64::INFINITY;
    let qp = build_epigraph_qp(&q).unwrap();
    assert_eq!(qp.count(RowFamily::Turnover), 0);
    assert_eq!(qp.n_vars(), 10);

    q.kappa = 0.0;
    let qp = build_epigraph_qp(&q).unwrap();
    assert_eq!(qp.count(RowFamily::Turnover), 0);
    assert_eq!(qp.n_vars(), 6);
}

#[test]
fn infeasible_inputs_carry_a_certificate() {
    let mut p = instance(3, 10, 2);
    p.upper = DVector::from_element(3, 0.3);
    match solve(&p) {
        Err(Error::Infeasible(m)) => assert!(m.starts_with("box/budget")),
        other => panic!("{other:?}"),
    }
    let mut p = instance(3, 10, 2);
    p.prev_weights = DVector::from_vec(vec![0.8, 0.1, 0.1]);
    p.upper = DVector::from_element(3, 0.5);
    p.tau = 0.4;
    match solve(&p) {
        Err(Error::Infeasible(m)) => assert!(m.starts_with("turnover")),
        other => panic!("{other:?}"),
    }
    p.tau = 0.6;
    assert_eq!(solve(&p).unwrap().status, SolveStatus::Optimal);
}

#[test]
fn symmetric_two_asset_instance() {
    let mut g = rng::seeded(5);
    let half: Vec<(f64, f64)> = (0..30).map(|_| (0.01 * normal(&mut g), 0.01 * normal(&mut g))).collect();
    let rows: Vec<f64> = half.iter().flat_map(|&(a, b)| [a, b, b, a]).collect();
    let scen = DMatrix::from_row_slice(60, 2, &rows);
    let (m, s) = crate::stats::mean_cov(&scen);
    let mut p = AllocationProblem::new(m, s, scen, DVector::from_vec(vec![0.5, 0.5]));
    p.tau = 2.0;
    let r = solve(&p).unwrap();
    assert_eq!(r.status, SolveStatus::Optimal);
    assert!((r.weights[0] - 0.5).abs() < 1e-7, "{}", r.weights);
}

#[test]
fn single_asset_is_fully_invested() {
    let mut p = instance(1, 25, 3);
    p.tau = 1.0;
    let r = solve(&p).unwrap();
    assert!((r.weights[0] - 1.0).abs() < 1e-9);
}

#[test]
fn matches_grid_search() {
    for seed in [11, 12, 13] {
        let mut p = instance(3, 40, seed);
        p.upper = DVector::from_element(3, 0.7);
        p.tau = 0.6;
        let r = solve(&p).unwrap();
        assert_eq!(r.status, SolveStatus::Optimal);
        assert!(r.kkt_residuals.max() <= 1e-6);
        assert_feasible(&p, &r);
        let (best, _) = grid_min(&p);
        let at_w = p.objective_at(&r.weights).total;
        assert!((at_w - r.objective).abs() < 1e-8, "{at_w} vs {}", r.objective);
        assert!(r.objective <= best + 1e-9, "seed {seed}: {} > grid {best}", r.objective);
        assert!(best - r.objective <= 1e-4);

        let cap = p.tail_cap();
        assert!(r.duals.tail.iter().all(|&g| g >= -1e-10 && g <= cap + 1e-10));
        let audit = kkt_audit(&p, &r, "x").unwrap();
        assert!(audit.zeta_stationarity_residual.abs() <= 1e-6);
        assert!(audit.tail_structure_ok(), "{audit:?}");
    }
}

#[test]
fn interior_solution_has_empty_active_sets() {
    // Strong variance weight pulls toward minimum variance, away from all bounds.
    let mut p = instance(3, 50, 4);
    p.gamma = 50.0;
    p.tau = f64::INFINITY;
    let r = solve(&p).unwrap();
    let a = kkt_audit(&p, &r, "2020-01-31").unwrap();
    assert!(a.active_lower.is_empty() && a.active_upper.is_empty(), "{:?}", r.weights);
    assert!(!a.turnover_binding);
    assert_eq!(a.duals.turnover, 0.0);
    assert_eq!(a.duals.box_lo_max, 0.0);
}

#[test]
fn binding_turnover_has_positive_multiplier() {
    let mut p = instance(3, 50, 6);
    p.mu_hat = DVector::from_vec(vec![0.05, 0.0, 0.0]);
    p.prev_weights = DVector::from_vec(vec![0.0, 0.5, 0.5]);
    p.tau = 0.3;
    let r = solve(&p).unwrap();
    assert_eq!(r.status, SolveStatus::Optimal);
    let a = kkt_audit(&p, &r, "t").unwrap();
    assert!(a.turnover_binding, "{}", a.turnover_used);
    assert!(r.duals.turnover > 1e-6);
    assert!((r.weights[0] - 0.15).abs() < 1e-7);
}

#[test]
fn tighter_cap_never_improves_objective() {
    let mut p = instance(3, 60, 7);
    p.prev_weights = DVector::from_vec(vec![0.0, 0.2, 0.8]);
    let mut last = f64::NEG_INFINITY;
    for tau in [2.0, 1.0, 0.5, 0.25, 0.1, 0.02, 0.0] {
        p.tau = tau;
        let r = solve(&p).unwrap();
        assert_eq!(r.status, SolveStatus::Optimal, "tau {tau}");
        assert!(r.objective >= last - 1e-9, "tau {tau}");
        last = r.objective;
    }
}

#[test]
fn frozen_portfolio() {
    let mut p = instance(4, 30, 8);
    p.prev_weights = DVector::from_vec(vec![0.1, 0.2, 0.3, 0.4]);
    p.tau = 0.0;
    let r = solve(&p).unwrap();
    assert_eq!(r.weights, p.prev_weights);
    assert_eq!(r.status, SolveStatus::Optimal);
    assert!(r.kkt_residuals.max() <= 1e-10, "{:?}", r.kkt_residuals);
    let a = kkt_audit(&p, &r, "f").unwrap();
    assert!(a.zeta_stationarity_ok);
}

#[test]
fn mean_variance_ablation_matches_closed_form() {
    let mut p = instance(3, 30, 9);
    p.cvar_term = false;
    p.tau = f64::INFINITY;
    p.lower = DVector::from_element(3, f64::NEG_INFINITY);
    p.upper = DVector::from_element(3, f64::INFINITY);
    p.lambda_mu = 2.0;
    let r = solve(&p).unwrap();
    assert_eq!(r.status, SolveStatus::Optimal);
    // w = Σ⁻¹(λμ − ν1)/(2γ) with ν fixing the budget.
    let inv = p.sigma_hat.clone().try_inverse().unwrap();
    let ones = DVector::from_element(3, 1.0);
    let a = &inv * (&p.mu_hat * p.lambda_mu);
    let b = &inv * &ones;
    let nu = (a.sum() - 2.0 * p.gamma) / b.sum();
    let w = (a - b * nu) / (2.0 * p.gamma);
    assert!((&r.weights - &w).amax() < 1e-7, "{} vs {}", r.weights, w);
}

#[test]
fn audit_rejects_non_optimal() {
    let p = instance(2, 10, 10);
    let mut r = solve(&p).unwrap();
    r.status = SolveStatus::MaxIter;
    assert!(kkt_audit(&p, &r, "x").is_err());
}

#[test]
fn audit_log_and_json() {
    let mut p = instance(2, 10, 11);
    p.tau = f64::INFINITY;
    let s = serde_json::to_string(&p).unwrap();
    assert!(s.contains("\"tau\":\"inf\""));
    let back: AllocationProblem = serde_json::from_str(&s).unwrap();
    assert!(back.tau.is_infinite());
    let r = solve(&p).unwrap();
    let a = kkt_audit(&p, &r, "2021-03-31").unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("audit.jsonl");
    append_audit(&path, &a).unwrap();
    append_audit(&path, &a).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 2);
    let rec: AuditRecord = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(rec.date, "2021-03-31");
}

#[test]
fn scales_to_desk_size() {
    let mut p = instance(10, 1024, 12);
    p.upper = DVector::from_element(10, 0.3);
    let r = solve(&p).unwrap();
    assert_eq!(r.status, SolveStatus::Optimal, "{:?}", r.kkt_residuals);
    assert_feasible(&p, &r);
    assert!(r.iterations < 60, "{}", r.iterations);
}

#[test]
fn badly_scaled_scenarios_still_solve() {
    for seed in 0..6 {
        let mut p = instance(3, 64, 300 + seed);
        p.scenarios *= 300.0;
        p.mu_hat *= 60.0;
        p.sigma_hat *= 5e4;
        p.prev_weights = DVector::from_vec(vec![0.03, 0.11, 0.86]);
        let r = solve(&p).unwrap();
        assert_eq!(r.status, SolveStatus::Optimal, "seed {seed}");
        assert!(r.weights.iter().all(|v| v.is_finite()));
    }
}
