//! Scenario calibration scores, coverage and autocorrelation tests, and
//! bootstrap Sharpe comparisons.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backtest::{nav_returns, BacktestReport, ForecastSeries};
use crate::config::{BootstrapConfig, DiagnosticsConfig};
use crate::cvar_allocator::cvar_empirical;
use crate::error::{Error, Result};
use crate::rng;
use crate::scenario_gen::{ess, TailConfig};
use crate::special::chi2_sf;
use crate::stats;

/// Two-sample Kolmogorov–Smirnov statistic sup |F_a − F_b|.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Input("KS statistic needs two nonempty samples".into()));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d = 0.0f64;
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    Ok(d)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub avg: f64,
    pub per_asset: Vec<f64>,
}

/// Per-asset KS between pooled scenario marginals and realized returns,
/// averaged over assets.
pub fn ks_avg<'a>(sets: impl IntoIterator<Item = &'a DMatrix<f64>>, realized: &DMatrix<f64>) -> Result<KsResult> {
    let sets: Vec<&DMatrix<f64>> = sets.into_iter().collect();
    let d = realized.ncols();
    if sets.is_empty() || realized.nrows() == 0 || d == 0 {
        return Err(Error::Input("KS needs scenarios and realized returns".into()));
    }
    if sets.iter().any(|s| s.ncols() != d) {
        return Err(Error::Dimension("scenario sets and realized returns disagree on assets".into()));
    }
    let per_asset = (0..d)
        .map(|j| {
            let pooled: Vec<f64> = sets.iter().flat_map(|s| s.column(j).iter().copied().collect::<Vec<_>>()).collect();
            let real: Vec<f64> = realized.column(j).iter().copied().collect();
            ks_statistic(&pooled, &real)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(KsResult {
        avg: stats::mean(&per_asset),
        per_asset,
    })
}

fn check_set(scenarios: &DMatrix<f64>, observed: &DVector<f64>, min_n: usize) -> Result<()> {
    if scenarios.nrows() < min_n {
        return Err(Error::Input(format!("score needs at least {min_n} scenarios")));
    }
    if scenarios.ncols() != observed.len() {
        return Err(Error::Dimension(format!(
            "scenarios have {} assets, observation {}",
            scenarios.ncols(),
            observed.len()
        )));
    }
    Ok(())
}

fn dist(a: impl Iterator<Item = f64>) -> f64 {
    a.map(|x| x * x).sum::<f64>().sqrt()
}

/// Energy score with β = 1.
pub fn energy_score(scenarios: &DMatrix<f64>, observed: &DVector<f64>) -> Result<f64> {
    check_set(scenarios, observed, 2)?;
    let n = scenarios.nrows();
    let rows: Vec<Vec<f64>> = (0..n).map(|i| scenarios.row(i).iter().copied().collect()).collect();
    let fit: f64 = rows.iter().map(|x| dist(x.iter().zip(observed.iter()).map(|(a, b)| a - b))).sum::<f64>() / n as f64;
    let mut spread = 0.0;
    for i in 0..n {
        for k in i + 1..n {
            spread += dist(rows[i].iter().zip(&rows[k]).map(|(a, b)| a - b));
        }
    }
    // Pairs i < k counted once, so 2/(2N²) = 1/N².
    Ok(fit - spread / (n * n) as f64)
}

/// Variogram score of order `p` with unit pair weights.
pub fn variogram_score(scenarios: &DMatrix<f64>, observed: &DVector<f64>, p: f64) -> Result<f64> {
    check_set(scenarios, observed, 1)?;
    let d = observed.len();
    if d < 2 {
        return Err(Error::Input("variogram score needs at least 2 assets".into()));
    }
    if !(p > 0.0) {
        return Err(Error::Input(format!("variogram order must be positive, got {p}")));
    }
    let n = scenarios.nrows() as f64;
    let mut vs = 0.0;
    for j in 0..d {
        for k in j + 1..d {
            let obs = (observed[j] - observed[k]).abs().powf(p);
            // Mean gap to the observed variogram, so perfect scenarios give 0 exactly.
            let gap = scenarios
                .row_iter()
                .map(|r| (r[j] - r[k]).abs().powf(p) - obs)
                .sum::<f64>()
                / n;
            vs += gap * gap;
        }
    }
    Ok(vs)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LjungBox {
    pub q: f64,
    pub p_value: f64,
}

/// Ljung–Box portmanteau test. A zero-variance series gives Q = 0, p = 1.
pub fn ljung_box(series: &[f64], lags: usize) -> Result<LjungBox> {
    let t = series.len();
    if lags == 0 || t <= lags {
        return Err(Error::Input(format!("Ljung-Box needs length > lags >= 1, got {t} and {lags}")));
    }
    let mean = stats::mean(series);
    let c: Vec<f64> = series.iter().map(|x| x - mean).collect();
    let c0: f64 = c.iter().map(|x| x * x).sum();
    if c0 == 0.0 {
        return Ok(LjungBox { q: 0.0, p_value: 1.0 });
    }
    let tf = t as f64;
    let q = tf
        * (tf + 2.0)
        * (1..=lags)
            .map(|k| {
                let rho = c[k..].iter().zip(&c).map(|(a, b)| a * b).sum::<f64>() / c0;
                rho * rho / (tf - k as f64)
            })
            .sum::<f64>();
    Ok(LjungBox {
        q,
        p_value: chi2_sf(q, lags as f64),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Kupiec {
    pub violations: usize,
    pub trials: usize,
    pub lr: f64,
    pub p_value: f64,
}

/// Kupiec unconditional coverage test of a VaR at level `alpha`.
pub fn kupiec_uc(violations: usize, trials: usize, alpha: f64) -> Result<Kupiec> {
    if trials == 0 {
        return Err(Error::Input("Kupiec test needs at least one trial".into()));
    }
    if violations > trials {
        return Err(Error::Input(format!("{violations} violations in {trials} trials")));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Input(format!("VaR level {alpha} outside (0, 1)")));
    }
    let pi0 = 1.0 - alpha;
    let (x, t) = (violations as f64, trials as f64);
    // x ln p with the 0·ln 0 = 0 limit.
    let xlogy = |x: f64, p: f64| if x == 0.0 { 0.0 } else { x * p.ln() };
    let ll0 = xlogy(t - x, 1.0 - pi0) + xlogy(x, pi0);
    let hat = x / t;
    let ll1 = xlogy(t - x, 1.0 - hat) + xlogy(x, hat);
    let mut lr = -2.0 * (ll0 - ll1);
    // Rounding in the two log-likelihoods when x/T equals π₀.
    if lr < 1e-12 * t {
        lr = 0.0;
    }
    Ok(Kupiec {
        violations,
        trials,
        lr,
        p_value: chi2_sf(lr, 1.0),
    })
}

/// |mean predicted CVaR − empirical CVaR of realized losses| in basis points.
pub fn cvar_error_bps(predicted: &[f64], realized_losses: &[f64], alpha: f64) -> Result<f64> {
    if predicted.is_empty() || realized_losses.is_empty() {
        return Err(Error::Input("CVaR error needs predictions and realized losses".into()));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Input(format!("CVaR level {alpha} outside (0, 1)")));
    }
    let (_, realized) = cvar_empirical(realized_losses, alpha);
    Ok((stats::mean(predicted) - realized).abs() * 1e4)
}

fn sharpe(r: &[f64]) -> f64 {
    let sd = stats::std_dev(r);
    if sd > 0.0 {
        stats::mean(r) / sd * 252f64.sqrt()
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SharpeUplift {
    pub delta: f64,
    pub lo: f64,
    pub hi: f64,
    pub p_value: f64,
}

/// Paired stationary-bootstrap CI for Sharpe(a) − Sharpe(b). The percentile
/// interval and the p-value use the uncentered replicate distribution.
pub fn sharpe_uplift_ci(a: &[f64], b: &[f64], cfg: &BootstrapConfig) -> Result<SharpeUplift> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!("series lengths differ: {} vs {}", a.len(), b.len())));
    }
    if a.len() < 2 || cfg.replications == 0 || cfg.block == 0 {
        return Err(Error::Input("bootstrap needs two or more dates, replications and block >= 1".into()));
    }
    let n = a.len();
    let mut reps: Vec<f64> = (0..cfg.replications)
        .into_par_iter()
        .map(|k| {
            let mut g = rng::stream(cfg.seed, k as u64);
            let idx = rng::stationary_bootstrap_indices(n, n, cfg.block as f64, &mut g);
            let ra: Vec<f64> = idx.iter().map(|&i| a[i]).collect();
            let rb: Vec<f64> = idx.iter().map(|&i| b[i]).collect();
            sharpe(&ra) - sharpe(&rb)
        })
        .collect();
    reps.sort_by(f64::total_cmp);
    let m = reps.len() as f64;
    let below = reps.iter().filter(|&&x| x <= 0.0).count() as f64 / m;
    let above = reps.iter().filter(|&&x| x >= 0.0).count() as f64 / m;
    Ok(SharpeUplift {
        delta: sharpe(a) - sharpe(b),
        lo: stats::quantile_sorted(&reps, 0.025),
        hi: stats::quantile_sorted(&reps, 0.975),
        p_value: (2.0 * below.min(above)).min(1.0),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub label: String,
    pub n_dates: usize,
    pub ks_avg: f64,
    pub ks_per_asset: Vec<f64>,
    pub energy_score: f64,
    /// NaN for a single asset.
    #[serde(with = "crate::serde_util::sentinel")]
    pub variogram_score: f64,
    /// On |held-portfolio return| of the pooled scenario draws.
    pub ljung_box_p_absr: f64,
    /// Same statistic on the realized |held-portfolio return| path; NaN
    /// when the path is not longer than the lag count.
    #[serde(with = "crate::serde_util::sentinel")]
    pub ljung_box_p_absr_realized: f64,
    pub kupiec: Kupiec,
    pub kupiec_uc_p: f64,
    pub cvar_error_bps: f64,
    pub ess_value: f64,
}

/// Scores a forecast series over every date whose next-period return is
/// known.
pub fn diagnose(series: &ForecastSeries, alpha: f64, cfg: &DiagnosticsConfig, tail: &TailConfig) -> Result<DiagnosticsReport> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Input(format!("CVaR level {alpha} outside (0, 1)")));
    }
    let recs: Vec<_> = series.records.iter().filter(|r| r.realized.is_some()).collect();
    if recs.is_empty() {
        return Err(Error::Input(format!("forecast series '{}' has no realized dates", series.label)));
    }
    let d = recs[0].weights.len();
    let realized = DMatrix::from_fn(recs.len(), d, |i, j| recs[i].realized.as_ref().unwrap()[j]);
    let ks = ks_avg(recs.iter().map(|r| &r.scenarios), &realized)?;

    let mut es = 0.0;
    let mut vs = 0.0;
    let mut pooled_abs = Vec::new();
    let mut realized_abs = Vec::new();
    let mut predicted_cvar = Vec::new();
    let mut realized_losses = Vec::new();
    let mut violations = 0;
    for r in &recs {
        let y = r.realized.as_ref().unwrap();
        es += energy_score(&r.scenarios, y)?;
        if d >= 2 {
            vs += variogram_score(&r.scenarios, y, cfg.variogram_p)?;
        }
        let port = &r.scenarios * &r.weights;
        pooled_abs.extend(port.iter().map(|x| x.abs()));
        let losses: Vec<f64> = port.iter().map(|x| -x).collect();
        let (zeta, cvar) = cvar_empirical(&losses, alpha);
        predicted_cvar.push(cvar);
        let loss = -r.weights.dot(y);
        realized_losses.push(loss);
        realized_abs.push(loss.abs());
        if loss > zeta {
            violations += 1;
        }
    }
    let m = recs.len() as f64;
    let lags = cfg.ljung_box_lags;
    let lb_real = if realized_abs.len() > lags {
        ljung_box(&realized_abs, lags)?.p_value
    } else {
        f64::NAN
    };
    let kupiec = kupiec_uc(violations, recs.len(), alpha)?;
    Ok(DiagnosticsReport {
        label: series.label.clone(),
        n_dates: recs.len(),
        ks_avg: ks.avg,
        ks_per_asset: ks.per_asset,
        energy_score: es / m,
        variogram_score: if d >= 2 { vs / m } else { f64::NAN },
        ljung_box_p_absr: ljung_box(&pooled_abs, lags)?.p_value,
        ljung_box_p_absr_realized: lb_real,
        kupiec_uc_p: kupiec.p_value,
        kupiec,
        cvar_error_bps: cvar_error_bps(&predicted_cvar, &realized_losses, alpha)?,
        ess_value: ess(tail.q, tail.eta, recs[0].scenarios.nrows()),
    })
}

/// `label,KS,ES,VS,LB p(|r|),UC p,CVaR err (bps)` rows.
pub fn write_table_csv<W: std::io::Write>(reports: &[DiagnosticsReport], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["generator", "KS", "ES", "VS", "LB p(|r|)", "UC p", "CVaR err (bps)"])?;
    for r in reports {
        w.write_record([
            r.label.clone(),
            format!("{:.6}", r.ks_avg),
            format!("{:.6e}", r.energy_score),
            format!("{:.6e}", r.variogram_score),
            format!("{:.4}", r.ljung_box_p_absr),
            format!("{:.4}", r.kupiec_uc_p),
            format!("{:.2}", r.cvar_error_bps),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<diagnostics csv>", e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpliftRow {
    pub reference: String,
    pub baseline: String,
    #[serde(flatten)]
    pub uplift: SharpeUplift,
}

/// Sharpe uplift of `reference` over every other strategy in the report.
pub fn uplift_table(report: &BacktestReport, reference: &str, cfg: &BootstrapConfig) -> Result<Vec<UpliftRow>> {
    let main = report
        .strategy(reference)
        .ok_or_else(|| Error::Input(format!("strategy '{reference}' not in the backtest report")))?;
    let ra = nav_returns(&main.nav);
    report
        .strategies
        .iter()
        .filter(|s| s.name != reference)
        .map(|s| {
            Ok(UpliftRow {
                reference: reference.to_string(),
                baseline: s.name.clone(),
                uplift: sharpe_uplift_ci(&ra, &nav_returns(&s.nav), cfg)?,
            })
        })
        .collect()
}
