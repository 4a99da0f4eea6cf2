//! Acceptance suite. Every criterion prints one PASS/FAIL line with the
//! measured quantities, then the test fails if any criterion failed.

use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use regime_cvar::backtest::{
    apply_trade_cost, max_drawdown, run_walk_forward, train_generator, BacktestReport, Book,
};
use regime_cvar::config::{BootstrapConfig, Cadence, RunConfig, Splits, Variant};
use regime_cvar::cvar_allocator::{cvar_empirical, kkt_audit, solve, AllocationProblem, SolveStatus};
use regime_cvar::data_io::ReturnPanel;
use regime_cvar::diagnostics::{energy_score, kupiec_uc, ljung_box, sharpe_uplift_ci, variogram_score};
use regime_cvar::regime_hmm::{filter_posteriors, fit_em_traced, rolling_refit, EmOptions, RegimeModel, RegimeContext};
use regime_cvar::rng;
use regime_cvar::scenario_gen::{
    cosine_schedule, denoising_loss, denoising_loss_grad, empirical_ess, ess, sample, train, Architecture,
    DenoiserParams, TailConfig, TailOrientation, TrainBatch, TrainConfig,
};
use regime_cvar::synth::{simulate, SynthSpec};
use regime_cvar_cli::{DiagnosticsBundle, HmmReport};

type Check = (bool, String);

fn normal(g: &mut impl Rng) -> f64 {
    StandardNormal.sample(g)
}

// 1. QP oracle equivalence

fn qp_instance(d: usize, n: usize, seed: u64) -> AllocationProblem {
    let mut g = rng::seeded(seed);
    let mu: Vec<f64> = (0..d).map(|j| 0.002 - 0.0008 * j as f64).collect();
    let vol: Vec<f64> = (0..d).map(|j| 0.008 + 0.005 * j as f64).collect();
    let scen = DMatrix::from_fn(n, d, |_, j| mu[j] + vol[j] * normal(&mut g));
    let mean = DVector::from_fn(d, |j, _| scen.column(j).mean());
    let centered = DMatrix::from_fn(n, d, |i, j| scen[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    let prev = DVector::from_fn(d, |j, _| if j == 0 { 0.6 } else { 0.4 / (d - 1) as f64 });
    let mut p = AllocationProblem::new(mean, cov, scen, prev);
    p.tau = [0.3, 0.6, f64::INFINITY][(seed % 3) as usize];
    p.upper = DVector::from_element(d, if d == 3 { 0.8 } else { 1.0 });
    p
}

/// Objective written out independently: −μᵀw + wᵀΣw + CVaR + κ‖w − w_prev‖₁.
fn objective(p: &AllocationProblem, w: &DVector<f64>) -> f64 {
    let losses: Vec<f64> = (0..p.n_scenarios()).map(|i| -p.scenarios.row(i).transpose().dot(w)).collect();
    -p.mu_hat.dot(w) + (w.transpose() * &p.sigma_hat * w)[(0, 0)] + cvar_empirical(&losses, p.alpha).1
        + p.kappa * (w - &p.prev_weights).abs().sum()
}

fn grid_best(p: &AllocationProblem) -> f64 {
    let d = p.d();
    let mut best = f64::INFINITY;
    let mut visit = |w: DVector<f64>| {
        let inside = (0..d).all(|j| w[j] >= p.lower[j] - 1e-12 && w[j] <= p.upper[j] + 1e-12)
            && (&w - &p.prev_weights).abs().sum() <= p.tau + 1e-12;
        if inside {
            best = best.min(objective(p, &w));
        }
    };
    for i in 0..=100 {
        if d == 2 {
            visit(DVector::from_vec(vec![i as f64 / 100.0, (100 - i) as f64 / 100.0]));
            continue;
        }
        for k in 0..=(100 - i) {
            visit(DVector::from_vec(vec![i as f64 / 100.0, k as f64 / 100.0, (100 - i - k) as f64 / 100.0]));
        }
    }
    best
}

fn qp_oracle() -> Check {
    let start = Instant::now();
    let mut worst_gap: f64 = 0.0;
    let mut worst_kkt: f64 = 0.0;
    let mut ok = true;
    for seed in 0..25u64 {
        let d = 2 + (seed % 2) as usize;
        let n = 20 + (seed as usize * 7) % 31;
        let p = qp_instance(d, n, 100 + seed);
        let r = match solve(&p) {
            Ok(r) => r,
            Err(_) => return (false, format!("instance {seed} failed to solve")),
        };
        let grid = grid_best(&p);
        let at = objective(&p, &r.weights);
        worst_gap = worst_gap.max((at - grid).abs());
        worst_kkt = worst_kkt.max(r.kkt_residuals.max());
        ok &= r.status == SolveStatus::Optimal && at <= grid + 1e-4 && grid - at <= 1e-4;
    }
    let secs = start.elapsed().as_secs_f64();
    ok &= worst_kkt <= 1e-6 && secs < 60.0;
    (ok, format!("25 instances, max |solve − grid| {worst_gap:.2e}, max KKT {worst_kkt:.2e}, {secs:.1}s"))
}

// 2. Dual audit identity

fn dual_audit() -> Check {
    let mut worst_sum: f64 = 0.0;
    let mut worst_box: f64 = 0.0;
    let mut solves = 0;
    for seed in 0..40u64 {
        let d = 2 + (seed % 4) as usize;
        let mut p = qp_instance(d, 30 + seed as usize, 500 + seed);
        p.alpha = [0.9, 0.95, 0.975][(seed % 3) as usize];
        let r = solve(&p).unwrap();
        if r.status != SolveStatus::Optimal {
            continue;
        }
        solves += 1;
        let cap = 1.0 / ((1.0 - p.alpha) * p.n_scenarios() as f64);
        let total: f64 = r.duals.tail.iter().sum();
        worst_sum = worst_sum.max((1.0 - total).abs());
        for &g in r.duals.tail.iter() {
            worst_box = worst_box.max((-g).max(g - cap).max(0.0));
        }
        let audit = kkt_audit(&p, &r, "acceptance").unwrap();
        worst_sum = worst_sum.max(audit.zeta_stationarity_residual.abs());
    }
    let ok = solves == 40 && worst_sum <= 1e-6 && worst_box <= 1e-10;
    (ok, format!("{solves}/40 optimal, max |1 − Σγ| {worst_sum:.2e}, max box violation {worst_box:.2e}"))
}

// 3. HMM correctness

fn gauss_pdf(mean: &DVector<f64>, cov: &DMatrix<f64>, x: &DVector<f64>) -> f64 {
    let d = x.len() as i32;
    let diff = x - mean;
    let q = (diff.transpose() * cov.clone().try_inverse().unwrap() * &diff)[(0, 0)];
    (-0.5 * q).exp() / ((2.0 * std::f64::consts::PI).powi(d) * cov.determinant()).sqrt()
}

fn two_state() -> RegimeModel {
    RegimeModel {
        means: vec![DVector::from_vec(vec![0.01, 0.005]), DVector::from_vec(vec![-0.02, -0.01])],
        covariances: vec![
            DMatrix::from_row_slice(2, 2, &[1e-4, 2e-5, 2e-5, 1e-4]),
            DMatrix::from_row_slice(2, 2, &[5e-4, 2e-4, 2e-4, 4e-4]),
        ],
        transition: DMatrix::from_row_slice(2, 2, &[0.95, 0.05, 0.1, 0.9]),
        initial: DVector::from_vec(vec![0.6, 0.4]),
    }
}

fn simulate_hmm(m: &RegimeModel, t_len: usize, seed: u64) -> ReturnPanel {
    let mut g = rng::seeded(seed);
    let chols: Vec<DMatrix<f64>> = m.covariances.iter().map(|c| c.clone().cholesky().unwrap().l()).collect();
    let mut s = usize::from(g.random::<f64>() >= m.initial[0]);
    let mut x = DMatrix::zeros(t_len, 2);
    for t in 0..t_len {
        if t > 0 {
            s = usize::from(g.random::<f64>() >= m.transition[(s, 0)]);
        }
        let e = DVector::from_fn(2, |_, _| normal(&mut g));
        let r = &m.means[s] + &chols[s] * e;
        x.set_row(t, &r.transpose());
    }
    ReturnPanel::from_matrix(x).unwrap()
}

fn hmm_correctness() -> Check {
    let m = two_state();
    let r = simulate_hmm(&m, 5, 3);
    let post = filter_posteriors(&m, &r).unwrap();
    // Brute force: sum the joint density of every state path.
    let mut worst_filter: f64 = 0.0;
    for t in 0..5 {
        let mut joint = [0.0; 2];
        for code in 0..(1usize << (t + 1)) {
            let path: Vec<usize> = (0..=t).map(|i| (code >> i) & 1).collect();
            let mut p = m.initial[path[0]];
            for s in 0..=t {
                if s > 0 {
                    p *= m.transition[(path[s - 1], path[s])];
                }
                let x = r.returns.row(s).transpose();
                p *= gauss_pdf(&m.means[path[s]], &m.covariances[path[s]], &x);
            }
            joint[path[t]] += p;
        }
        let z = joint[0] + joint[1];
        for k in 0..2 {
            worst_filter = worst_filter.max((post.gamma[(t, k)] - joint[k] / z).abs());
        }
    }

    let data = simulate_hmm(&m, 600, 4);
    let mut worst_drop: f64 = 0.0;
    for k in 1..=3 {
        let fit = fit_em_traced(&data, k, EmOptions { seed: 9, ..Default::default() }).unwrap();
        for w in fit.loglik_history.windows(2) {
            worst_drop = worst_drop.max(w[0] - w[1]);
        }
    }

    let long = simulate_hmm(&m, 2000, 11);
    let fit = fit_em_traced(&long, 2, EmOptions { seed: 5, ..Default::default() }).unwrap();
    let err = [[0usize, 1], [1, 0]]
        .iter()
        .map(|perm| fit.model.permuted(perm).transition - &m.transition)
        .map(|e| e.amax())
        .fold(f64::INFINITY, f64::min);

    let ok = worst_filter <= 1e-10 && worst_drop <= 1e-9 && err <= 0.05;
    (ok, format!("filter vs enumeration {worst_filter:.1e}, max loglik drop {worst_drop:.1e}, transition error {err:.3}"))
}

// 4. Walk-forward purity

fn small_config(p: &ReturnPanel, train: usize, val: usize) -> RunConfig {
    let mut c = RunConfig {
        splits: Splits {
            train_end: p.dates[train].clone(),
            val_end: p.dates[val].clone(),
            test_end: None,
        },
        ..Default::default()
    };
    c.hmm.states = 2;
    c.hmm.window = 120;
    c.hmm.stride = 20;
    c.hmm.max_iter = 50;
    c.signals.hist_window = 60;
    c.generator.n_scenarios = 64;
    c.generator.schedule_steps = 10;
    c.generator.train.steps = 30;
    c.generator.train.batch_size = 16;
    c.generator.train.width = 8;
    c.generator.train.depth = 1;
    c.generator.train.emb_dim = 4;
    c.generator.train.gate_width = 4;
    c.backtest.cadence = Cadence::Every(10);
    c
}

fn purity() -> Check {
    let spec = SynthSpec {
        days: 340,
        assets: 3,
        crises: vec![("2010-06-01".into(), 20)],
        ..Default::default()
    };
    let (p, _) = simulate(&spec).unwrap();
    let cut = 260;
    let mut tampered = p.clone();
    for t in cut + 1..p.n_dates() {
        for j in 0..3 {
            tampered.returns[(t, j)] = 0.002 - 1.5 * p.returns[(t, j)];
        }
    }

    let opts = EmOptions { max_iter: 50, ..Default::default() };
    let a = rolling_refit(&p, 2, 120, 20, opts).unwrap();
    let b = rolling_refit(&tampered, 2, 120, 20, opts).unwrap();
    let mut refits_same = 0;
    let mut refits_ok = true;
    for (x, y) in a.iter().zip(&b) {
        if x.index <= cut {
            refits_ok &= x.model == y.model;
            refits_same += 1;
        }
    }

    let mut c = small_config(&p, 150, 200);
    c.backtest.ablation = vec![Variant {
        label: "RC-CVaR uncond".into(),
        zero_context: true,
        ..Default::default()
    }];
    let gen = train_generator(&c, &p).unwrap().generator;
    let base = run_walk_forward(&c, &p, Some(&gen)).unwrap().report;
    let after = run_walk_forward(&c, &tampered, Some(&gen)).unwrap().report;
    let cut_date = &p.dates[cut];
    let mut compared = 0;
    let mut weights_ok = true;
    for (x, y) in base.strategies.iter().zip(&after.strategies) {
        for (u, v) in x.rebalances.iter().zip(&y.rebalances) {
            if &u.date <= cut_date {
                weights_ok &= u.weights == v.weights;
                compared += 1;
            }
        }
    }
    let ok = refits_ok && weights_ok && refits_same >= 5 && compared >= 30;
    (ok, format!("{refits_same} refits and {compared} rebalances at or before the edit point bit-identical: {}", refits_ok && weights_ok))
}

// 5. Diffusion sanity

fn gradient_check() -> f64 {
    let arch = Architecture {
        d: 3,
        z_dim: 2,
        width: 10,
        depth: 3,
        emb_dim: 4,
        gate_width: 6,
    };
    let mut params = DenoiserParams::init(arch, 3).unwrap();
    let mut g = rng::seeded(77);
    for v in params.theta.iter_mut() {
        *v += 0.3 * normal(&mut g);
    }
    let n = 6;
    let mut draw = |k: usize| -> Vec<f64> { (0..k).map(|_| normal(&mut g)).collect() };
    let batch = TrainBatch {
        x_noisy: draw(n * 3),
        steps: (1..=n).map(|i| 3 * i).collect(),
        z: draw(n * 2),
        eps: draw(n * 3),
        weights: (0..n).map(|i| if i == 2 { 3.0 } else { 1.0 }).collect(),
    };
    let mut grad = vec![0.0; params.n_params()];
    denoising_loss_grad(&params, &batch, &mut grad);
    let total = params.n_params();
    let mut worst: f64 = 0.0;
    let mut g = rng::seeded(78);
    for _ in 0..6 {
        let start = g.random_range(0..total - 30);
        let (mut num, mut diff) = (0.0, 0.0);
        for i in start..start + 30 {
            let orig = params.theta[i];
            params.theta[i] = orig + 1e-6;
            let up = denoising_loss(&params, &batch);
            params.theta[i] = orig - 1e-6;
            let down = denoising_loss(&params, &batch);
            params.theta[i] = orig;
            let fd = (up - down) / 2e-6;
            num += fd * fd;
            diff += (fd - grad[i]).powi(2);
        }
        worst = worst.max(diff.sqrt() / num.sqrt().max(1e-12));
    }
    worst
}

fn diffusion_sanity() -> Check {
    let rel = gradient_check();

    let start = Instant::now();
    let mu = [0.01, -0.005, -0.01];
    let l = DMatrix::from_row_slice(3, 3, &[0.010, 0.0, 0.0, 0.006, 0.008, 0.0, -0.003, 0.002, 0.012]);
    let sigma = &l * l.transpose();
    let mut g = rng::seeded(21);
    let n = 4000;
    let z = DMatrix::from_fn(n, 3, |_, _| normal(&mut g)) * l.transpose();
    let data = DMatrix::from_fn(n, 3, |i, j| z[(i, j)] + mu[j]);
    let ctx = vec![RegimeContext::zeros(0); n];
    let sch = cosine_schedule(50).unwrap();
    let cfg = TrainConfig {
        steps: 4000,
        batch_size: 128,
        learning_rate: 2e-3,
        width: 64,
        depth: 2,
        emb_dim: 16,
        gate_width: 4,
        ..Default::default()
    };
    let out = train(&data, &ctx, &sch, &TailConfig { eta: 0.0, ..Default::default() }, &cfg).unwrap();
    let set = sample(&out.params, &sch, &RegimeContext::zeros(0), 4000, 9).unwrap();
    let x = &set.scenarios;
    let m = DVector::from_fn(3, |j, _| x.column(j).mean());
    let c = DMatrix::from_fn(3, 3, |a, b| {
        x.column(a).iter().zip(x.column(b).iter()).map(|(u, v)| (u - m[a]) * (v - m[b])).sum::<f64>() / (x.nrows() - 1) as f64
    });
    let frob = (&c - &sigma).norm() / sigma.norm();
    let secs = start.elapsed().as_secs_f64();

    // η = 0 against a tail weight that never fires: same trajectory.
    let small: Vec<RegimeContext> = (0..300).map(|i| RegimeContext { z: vec![(i % 2) as f64] }).collect();
    let small_data = data.rows(0, 300).into_owned();
    let tiny = TrainConfig {
        steps: 25,
        batch_size: 32,
        learning_rate: 1e-3,
        width: 12,
        depth: 2,
        emb_dim: 4,
        gate_width: 4,
        ..Default::default()
    };
    let sch20 = cosine_schedule(20).unwrap();
    let plain = train(&small_data, &small, &sch20, &TailConfig { eta: 0.0, ..Default::default() }, &tiny).unwrap();
    let never = TailConfig {
        eta: 2.0,
        fixed_threshold: Some(f64::INFINITY),
        orientation: TailOrientation::Adverse,
        ..Default::default()
    };
    let unflagged = train(&small_data, &small, &sch20, &never, &tiny).unwrap();
    let same = plain.losses.iter().zip(&unflagged.losses).all(|(a, b)| a.to_bits() == b.to_bits())
        && plain.last.theta == unflagged.last.theta
        && plain.params.theta == unflagged.params.theta;

    let ok = rel <= 1e-4 && frob <= 0.2 && same && secs < 300.0;
    (ok, format!("gradient rel. error {rel:.1e}, covariance Frobenius error {:.1}%, η=0 trajectory identical: {same}, training run {secs:.1}s", 100.0 * frob))
}

// 6. ESS closed form

fn ess_check() -> Check {
    let weights = |q: f64, eta: f64, n: usize| -> Vec<f64> {
        let flagged = (q * n as f64).round() as usize;
        (0..n).map(|i| if i < flagged { 1.0 + eta } else { 1.0 }).collect()
    };
    let cases = [(0.1, 2.0, 1000, 800.0), (0.0, 2.0, 1000, 1000.0), (0.0, 5.0, 37, 37.0), (0.1, 0.0, 1000, 1000.0), (0.2, 0.0, 64, 64.0)];
    let mut ok = true;
    let mut shown = Vec::new();
    for (q, eta, n, expect) in cases {
        let closed = ess(q, eta, n);
        let emp = empirical_ess(&weights(q, eta, n));
        ok &= closed == emp && closed == expect;
        shown.push(format!("({q}, {eta}, {n}) -> {closed}"));
    }
    (ok, shown.join(", "))
}

// 7. Statistical tests

fn statistical_tests() -> Check {
    let mut best = kupiec_uc(0, 1, 0.95).unwrap();
    for t in 100..2000 {
        for x in 0..t / 5 {
            let k = kupiec_uc(x, t, 0.95).unwrap();
            if (k.lr - 3.841).abs() < (best.lr - 3.841).abs() {
                best = k;
            }
        }
    }
    let crit_ok = (best.lr - 3.841).abs() < 1e-3 && (best.p_value - 0.05).abs() <= 1e-3;
    let perfect = kupiec_uc(50, 1000, 0.95).unwrap();

    let mut covered = 0;
    for trial in 0..100u64 {
        let mut g = rng::seeded(10_000 + trial);
        let a: Vec<f64> = (0..500).map(|_| 0.0004 + 0.01 * normal(&mut g)).collect();
        let b: Vec<f64> = (0..500).map(|_| 0.0004 + 0.01 * normal(&mut g)).collect();
        let cfg = BootstrapConfig {
            replications: 1000,
            block: 20,
            seed: trial,
        };
        let u = sharpe_uplift_ci(&a, &b, &cfg).unwrap();
        if u.lo <= 0.0 && 0.0 <= u.hi {
            covered += 1;
        }
    }

    let mut g = rng::seeded(2024);
    let noise: Vec<f64> = (0..5000).map(|_| normal(&mut g)).collect();
    let lb = ljung_box(&noise, 10).unwrap();

    let ok = crit_ok && perfect.p_value == 1.0 && covered >= 90 && lb.p_value > 0.01;
    (ok, format!(
        "Kupiec LR {:.4} (x={}, T={}) p {:.5}, perfect coverage p {}, uplift CI covers 0 in {covered}/100, Ljung-Box p {:.3}",
        best.lr, best.violations, best.trials, best.p_value, perfect.p_value, lb.p_value
    ))
}

// 8. Scoring identities

fn scoring() -> Check {
    let y = DVector::from_vec(vec![0.012, -0.007, 0.003]);
    let perfect = DMatrix::from_fn(8, 3, |_, j| y[j]);
    let es0 = energy_score(&perfect, &y).unwrap();
    let vs0 = variogram_score(&perfect, &y, 0.5).unwrap();

    // N = 2, d = 2. Scenarios (0, 0) and (3, 4), observation (0, 4):
    // ES = (4 + 3)/2 − (1/(2·4))·2·5 = 2.25.
    let x = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 3.0, 4.0]);
    let obs = DVector::from_vec(vec![0.0, 4.0]);
    let es = energy_score(&x, &obs).unwrap();
    // VS with p = 1: (|0 − 4| − (0 + 1)/2)² = 12.25; p = 0.5: (2 − 0.5)² = 2.25.
    let vs1 = variogram_score(&x, &obs, 1.0).unwrap();
    let vs_half = variogram_score(&x, &obs, 0.5).unwrap();

    let ok = es0 == 0.0 && vs0 == 0.0 && (es - 2.25).abs() < 1e-12 && (vs1 - 12.25).abs() < 1e-12 && (vs_half - 2.25).abs() < 1e-12;
    (ok, format!("perfect ES {es0}, VS {vs0}; hand ES {es}, VS(p=1) {vs1}, VS(p=0.5) {vs_half}"))
}

// 9. Backtest accounting

fn accounting() -> Check {
    let spec = SynthSpec {
        days: 400,
        assets: 1,
        ..Default::default()
    };
    let (p, _) = simulate(&spec).unwrap();
    let mut c = small_config(&p, 200, 250);
    c.backtest.cost_bps = 0.0;
    c.backtest.strategies = vec!["EW".into(), "RP".into(), "SBB".into()];
    let report = run_walk_forward(&c, &p, None).unwrap().report;
    let mut worst: f64 = 0.0;
    for s in &report.strategies {
        let mut prod = 1.0;
        worst = worst.max((s.nav[0] - 1.0).abs());
        for (i, t) in (251..p.n_dates()).enumerate() {
            prod *= 1.0 + p.returns[(t, 0)];
            worst = worst.max((s.nav[i + 1] - prod).abs());
        }
    }
    let mut book = Book::new(DVector::from_element(1, 1.0), 0.0);
    for t in 0..50 {
        book.drift(&DVector::from_element(1, p.returns[(t, 0)])).unwrap();
    }
    let direct: f64 = (0..50).map(|t| 1.0 + p.returns[(t, 0)]).product();
    worst = worst.max((book.nav - direct).abs());

    let dd = max_drawdown(&[100.0, 120.0, 90.0, 100.0]);
    let cost = apply_trade_cost(100.0, 0.2, 10.0);
    let ok = worst <= 1e-12 && dd == 0.25 && cost == 100.0 * (1.0 - 0.001 * 0.2);
    (ok, format!(
        "single-asset NAV vs return product {worst:.1e}, maxdd {dd}, NAV 100 after turnover 0.2 at 10 bps = {cost}"
    ))
}

// 10 and 11. End-to-end CLI run and determinism

fn cli(run_dir: &Path, args: &[&str]) -> i32 {
    let mut all = vec!["rcvar", "--run-dir", run_dir.to_str().unwrap()];
    all.extend_from_slice(args);
    regime_cvar_cli::run(all)
}

fn read(path: PathBuf) -> Vec<u8> {
    std::fs::read(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn end_to_end(dir: &Path) -> Check {
    let start = Instant::now();
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/synthetic.toml");
    std::fs::copy(&config, dir.join("config.toml")).unwrap();
    let steps: [&[&str]; 7] = [
        &["synth", "--out", "data/prices.csv", "--regimes", "data/regimes.csv"],
        &["ingest", "--config", "config.toml"],
        &["fit-hmm", "--config", "config.toml"],
        &["train-gen", "--config", "config.toml"],
        &["backtest", "--config", "config.toml", "--generator", "generator.bin"],
        &["diagnose", "--config", "config.toml", "--generator", "generator.bin"],
        &["report"],
    ];
    for s in steps {
        let code = cli(dir, s);
        if code != 0 {
            return (false, format!("`rcvar {}` exited with {code}", s.join(" ")));
        }
    }
    let secs = start.elapsed().as_secs_f64();

    let hmm: Result<HmmReport, _> = serde_json::from_slice(&read(dir.join("hmm_report.json")));
    let report: Result<BacktestReport, _> = serde_json::from_slice(&read(dir.join("backtest/report.json")));
    let diag: Result<DiagnosticsBundle, _> = serde_json::from_slice(&read(dir.join("diagnostics/diagnostics.json")));
    let summary: serde_json::Value = serde_json::from_slice(&read(dir.join("summary.json"))).unwrap_or_default();
    let (Ok(_), Ok(report), Ok(diag)) = (hmm, report, diag) else {
        return (false, "an output file does not parse into its schema".into());
    };
    let names = ["RC-CVaR", "SBB", "EW", "RP", "BL"];
    let schema_ok = names.iter().all(|n| report.strategy(n).is_some())
        && diag.reports.len() == 2
        && summary["performance"].as_array().is_some_and(|a| a.len() == report.strategies.len())
        && dir.join("summary.md").exists();
    let rc = report.strategy("RC-CVaR").unwrap().metrics.maxdd;
    let ew = report.strategy("EW").unwrap().metrics.maxdd;
    let ok = schema_ok && secs < 900.0 && rc <= ew;
    (ok, format!("pipeline {secs:.0}s, outputs parse: {schema_ok}, MaxDD RC-CVaR {:.2}% vs EW {:.2}%", 100.0 * rc, 100.0 * ew))
}

fn determinism(dir: &Path) -> Check {
    let code = cli(
        dir,
        &["backtest", "--config", "config.toml", "--generator", "generator.bin", "--out-dir", "backtest_rerun"],
    );
    if code != 0 {
        return (false, format!("rerun exited with {code}"));
    }
    let files = ["report.json", "nav.csv", "weights.csv", "audit.jsonl", "forecasts/RC-CVaR.csv", "forecasts/SBB.csv"];
    let same: Vec<&str> = files
        .iter()
        .copied()
        .filter(|f| read(dir.join("backtest").join(f)) == read(dir.join("backtest_rerun").join(f)))
        .collect();
    (same.len() == files.len(), format!("{}/{} backtest outputs byte-identical on rerun", same.len(), files.len()))
}

#[test]
fn acceptance() {
    let dir = tempfile::tempdir().unwrap();
    let criteria: Vec<(&str, Box<dyn Fn() -> Check + '_>)> = vec![
        ("QP oracle equivalence", Box::new(qp_oracle)),
        ("dual audit identity", Box::new(dual_audit)),
        ("HMM correctness", Box::new(hmm_correctness)),
        ("walk-forward purity", Box::new(purity)),
        ("diffusion sanity", Box::new(diffusion_sanity)),
        ("ESS closed form", Box::new(ess_check)),
        ("statistical tests", Box::new(statistical_tests)),
        ("scoring identities", Box::new(scoring)),
        ("backtest accounting", Box::new(accounting)),
        ("end-to-end smoke", Box::new(|| end_to_end(dir.path()))),
        ("determinism", Box::new(|| determinism(dir.path()))),
    ];
    let mut failed = Vec::new();
    for (i, (name, check)) in criteria.iter().enumerate() {
        let (ok, detail) = check();
        println!("[{}] {:>2}. {name}: {detail}", if ok { "PASS" } else { "FAIL" }, i + 1);
        if !ok {
            failed.push(*name);
        }
    }
    assert!(failed.is_empty(), "failed: {failed:?}");
}
