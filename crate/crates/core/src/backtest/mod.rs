//! Walk-forward backtest: per-strategy accounting, performance metrics and
//! the decision pipeline.

mod pipeline;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats;

pub use pipeline::{
    decision_indices, load_generator, run_walk_forward, save_generator, test_range, train_generator, training_set,
    BacktestOutput, Generator, TrainedGenerator, TrainingSet,
};

const YEAR: f64 = 252.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub cagr: f64,
    pub vol_annual: f64,
    pub sharpe: f64,
    #[serde(with = "crate::serde_util::sentinel")]
    pub sortino: f64,
    /// Positive magnitude.
    pub maxdd: f64,
    #[serde(with = "crate::serde_util::sentinel")]
    pub calmar: f64,
    pub avg_turnover: f64,
}

/// Daily simple returns of a NAV path.
pub fn nav_returns(nav: &[f64]) -> Vec<f64> {
    nav.windows(2).map(|w| w[1] / w[0] - 1.0).collect()
}

/// Largest peak-to-trough decline, as a fraction of the peak.
pub fn max_drawdown(nav: &[f64]) -> f64 {
    let mut peak = f64::NEG_INFINITY;
    let mut worst = 0.0f64;
    for &v in nav {
        peak = peak.max(v);
        worst = worst.max((peak - v) / peak);
    }
    worst
}

/// Drawdown series (peak − nav)/peak.
pub fn drawdown_series(nav: &[f64]) -> Vec<f64> {
    let mut peak = f64::NEG_INFINITY;
    nav.iter()
        .map(|&v| {
            peak = peak.max(v);
            (peak - v) / peak
        })
        .collect()
}

/// Annualized metrics on 252 days with zero risk-free rate. Sharpe is 0 for
/// a zero-volatility path; Sortino and Calmar are +inf when their
/// denominators vanish under a positive return, 0 when the return is 0.
pub fn compute_metrics(nav: &[f64]) -> Result<Metrics> {
    if nav.len() < 2 {
        return Err(Error::Input("metrics need at least two NAV points".into()));
    }
    if nav.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
        return Err(Error::Input("NAV must be positive and finite".into()));
    }
    let r = nav_returns(nav);
    let days = r.len() as f64;
    let cagr = (nav[nav.len() - 1] / nav[0]).powf(YEAR / days) - 1.0;
    let mean = stats::mean(&r);
    let vol = stats::std_dev(&r) * YEAR.sqrt();
    let sharpe = if vol > 0.0 { mean * YEAR / vol } else { 0.0 };
    let down = (r.iter().map(|&x| x.min(0.0).powi(2)).sum::<f64>() / days).sqrt() * YEAR.sqrt();
    let ratio = |num: f64, den: f64| {
        if den > 0.0 {
            num / den
        } else if num > 0.0 {
            f64::INFINITY
        } else if num < 0.0 {
            f64::NEG_INFINITY
        } else {
            0.0
        }
    };
    let maxdd = max_drawdown(nav);
    Ok(Metrics {
        cagr,
        vol_annual: vol,
        sharpe,
        sortino: ratio(mean * YEAR, down),
        maxdd,
        calmar: ratio(cagr, maxdd),
        avg_turnover: 0.0,
    })
}

/// NAV after paying `cost_bps` per unit of turnover.
pub fn apply_trade_cost(nav: f64, turnover: f64, cost_bps: f64) -> f64 {
    nav * (1.0 - cost_bps / 10_000.0 * turnover)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RebalanceRow {
    pub date: String,
    pub weights: Vec<f64>,
    /// ‖w_new − w_drifted‖₁.
    pub turnover: f64,
    /// Cost in NAV units.
    pub cost: f64,
    pub nav_after: f64,
    /// "optimal", "max_iter" (weights held) or "target" for baselines.
    pub status: String,
    /// Line of this decision in the audit log.
    pub audit_line: Option<usize>,
}

/// Holdings and NAV of one strategy. Weights drift with returns between
/// trades.
#[derive(Debug, Clone)]
pub struct Book {
    pub weights: DVector<f64>,
    pub nav: f64,
    pub cost_bps: f64,
    pub navs: Vec<f64>,
    /// Dollar P&L of each drift step.
    pub pnl: Vec<f64>,
    pub rows: Vec<RebalanceRow>,
}

impl Book {
    pub fn new(weights: DVector<f64>, cost_bps: f64) -> Self {
        Self {
            weights,
            nav: 1.0,
            cost_bps,
            navs: Vec::new(),
            pnl: Vec::new(),
            rows: Vec::new(),
        }
    }

    /// Apply one day of asset returns.
    pub fn drift(&mut self, r: &DVector<f64>) -> Result<()> {
        let rp = self.weights.dot(r);
        if !(1.0 + rp > 0.0) {
            return Err(Error::Numerical(format!("portfolio return {rp} wipes out the NAV")));
        }
        let gain = self.nav * rp;
        self.nav += gain;
        self.pnl.push(gain);
        self.weights = self.weights.component_mul(&r.map(|x| 1.0 + x)) / (1.0 + rp);
        Ok(())
    }

    /// Trade to `target`, paying the proportional cost.
    pub fn trade(&mut self, date: &str, target: DVector<f64>, status: &str, audit_line: Option<usize>) -> f64 {
        let turnover = (&target - &self.weights).abs().sum();
        let after = apply_trade_cost(self.nav, turnover, self.cost_bps);
        let cost = self.nav - after;
        self.nav = after;
        self.weights = target;
        self.rows.push(RebalanceRow {
            date: date.to_string(),
            weights: self.weights.iter().copied().collect(),
            turnover,
            cost,
            nav_after: after,
            status: status.to_string(),
            audit_line,
        });
        turnover
    }

    pub fn mark(&mut self) {
        self.navs.push(self.nav);
    }

    pub fn total_cost(&self) -> f64 {
        self.rows.iter().map(|r| r.cost).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyReport {
    pub name: String,
    /// "main", "generator-baseline", "baseline", "ablation" or "sweep".
    pub group: String,
    pub nav: Vec<f64>,
    pub metrics: Metrics,
    pub rebalances: Vec<RebalanceRow>,
    pub total_cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktestReport {
    pub assets: Vec<String>,
    /// NAV dates: the initial decision date, then every test row.
    pub dates: Vec<String>,
    pub decision_dates: Vec<String>,
    pub hmm_refit_dates: Vec<String>,
    pub strategies: Vec<StrategyReport>,
    pub notes: Vec<String>,
}

impl BacktestReport {
    pub fn strategy(&self, name: &str) -> Option<&StrategyReport> {
        self.strategies.iter().find(|s| s.name == name)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// `date,<strategy>...` NAV table.
    pub fn write_nav_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut head = vec!["date".to_string()];
        head.extend(self.strategies.iter().map(|s| s.name.clone()));
        w.write_record(&head)?;
        for (i, d) in self.dates.iter().enumerate() {
            let mut rec = vec![d.clone()];
            rec.extend(self.strategies.iter().map(|s| format!("{:.16e}", s.nav[i])));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io("<nav csv>", e))
    }

    /// Long table `strategy,date,turnover,cost,<asset>...` of executed weights.
    pub fn write_weights_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut head = vec!["strategy".to_string(), "date".into(), "turnover".into(), "cost".into(), "status".into()];
        head.extend(self.assets.iter().cloned());
        w.write_record(&head)?;
        for s in &self.strategies {
            for r in &s.rebalances {
                let mut rec = vec![
                    s.name.clone(),
                    r.date.clone(),
                    format!("{:.16e}", r.turnover),
                    format!("{:.16e}", r.cost),
                    r.status.clone(),
                ];
                rec.extend(r.weights.iter().map(|v| format!("{v:.16e}")));
                w.write_record(&rec)?;
            }
        }
        w.flush().map_err(|e| Error::io("<weights csv>", e))
    }
}

/// Scenario forecast made at one decision date, with the weights then held
/// and the next row's realized returns.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastRecord {
    pub date: String,
    pub scenarios: DMatrix<f64>,
    pub weights: DVector<f64>,
    pub realized: Option<DVector<f64>>,
}

/// Forecasts of one scenario source over the test split.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastSeries {
    pub label: String,
    pub records: Vec<ForecastRecord>,
}

impl ForecastSeries {
    /// CSV with columns `date,row,<asset>...`, where `row` is a scenario
    /// index, `weight` or `realized`.
    pub fn write_csv<W: std::io::Write>(&self, assets: &[String], writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut head = vec!["date".to_string(), "row".into()];
        head.extend(assets.iter().cloned());
        w.write_record(&head)?;
        let fmt = |v: &f64| format!("{v:.16e}");
        for rec in &self.records {
            let mut line = vec![rec.date.clone(), "weight".into()];
            line.extend(rec.weights.iter().map(fmt));
            w.write_record(&line)?;
            if let Some(r) = &rec.realized {
                let mut line = vec![rec.date.clone(), "realized".into()];
                line.extend(r.iter().map(fmt));
                w.write_record(&line)?;
            }
            for i in 0..rec.scenarios.nrows() {
                let mut line = vec![rec.date.clone(), i.to_string()];
                line.extend(rec.scenarios.row(i).iter().map(fmt));
                w.write_record(&line)?;
            }
        }
        w.flush().map_err(|e| Error::io("<forecast csv>", e))
    }

    pub fn read_csv<R: std::io::Read>(label: &str, reader: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let d = rdr.headers()?.len().saturating_sub(2);
        if d == 0 {
            return Err(Error::Input("forecast file has no asset columns".into()));
        }
        struct Pending {
            date: String,
            weights: Option<DVector<f64>>,
            realized: Option<DVector<f64>>,
            rows: Vec<f64>,
        }
        let mut out: Vec<ForecastRecord> = Vec::new();
        let mut cur: Option<Pending> = None;
        let finish = |p: Pending| -> Result<ForecastRecord> {
            let n = p.rows.len() / d;
            Ok(ForecastRecord {
                weights: p
                    .weights
                    .ok_or_else(|| Error::Input(format!("forecast for {} has no weight row", p.date)))?,
                scenarios: DMatrix::from_row_slice(n, d, &p.rows),
                realized: p.realized,
                date: p.date,
            })
        };
        for rec in rdr.records() {
            let rec = rec?;
            let date = rec[0].to_string();
            let vals: Vec<f64> = (2..2 + d)
                .map(|j| {
                    rec.get(j)
                        .and_then(|s| s.trim().parse().ok())
                        .ok_or_else(|| Error::Input(format!("bad number in forecast row for {date}")))
                })
                .collect::<Result<_>>()?;
            if cur.as_ref().is_none_or(|p| p.date != date) {
                if let Some(p) = cur.take() {
                    out.push(finish(p)?);
                }
                cur = Some(Pending {
                    date: date.clone(),
                    weights: None,
                    realized: None,
                    rows: Vec::new(),
                });
            }
            let p = cur.as_mut().unwrap();
            match &rec[1] {
                "weight" => p.weights = Some(DVector::from_vec(vals)),
                "realized" => p.realized = Some(DVector::from_vec(vals)),
                _ => p.rows.extend(vals),
            }
        }
        if let Some(p) = cur.take() {
            out.push(finish(p)?);
        }
        Ok(Self {
            label: label.to_string(),
            records: out,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_examples() {
        let m = compute_metrics(&[100.0, 120.0, 90.0, 100.0]).unwrap();
        assert_eq!(m.maxdd, 0.25);
        assert!((m.calmar * m.maxdd - m.cagr).abs() < 1e-12);

        let up = compute_metrics(&[1.0, 1.01, 1.03, 1.04]).unwrap();
        assert_eq!(up.maxdd, 0.0);
        assert_eq!(up.calmar, f64::INFINITY);

        let flat = compute_metrics(&[5.0; 10]).unwrap();
        assert_eq!((flat.cagr, flat.vol_annual, flat.sharpe), (0.0, 0.0, 0.0));

        assert!(compute_metrics(&[1.0, 0.0]).is_err());
        assert!(compute_metrics(&[1.0]).is_err());
    }

    #[test]
    fn metric_formulas() {
        let nav = [1.0, 1.02, 0.99, 1.01, 1.03, 1.0];
        let m = compute_metrics(&nav).unwrap();
        let r: Vec<f64> = nav.windows(2).map(|w| w[1] / w[0] - 1.0).collect();
        let mean = r.iter().sum::<f64>() / 5.0;
        let var = r.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 4.0;
        assert!((m.vol_annual - (var * 252.0).sqrt()).abs() < 1e-12);
        assert!((m.sharpe - mean * 252.0 / (var * 252.0).sqrt()).abs() < 1e-12);
        let dd = (r.iter().map(|x| x.min(0.0).powi(2)).sum::<f64>() / 5.0).sqrt();
        assert!((m.sortino - mean * 252.0 / (dd * 252f64.sqrt())).abs() < 1e-9);
        assert!((m.cagr - (1.0f64).powf(252.0 / 5.0) + 1.0).abs() < 1e-12);
        assert!((m.maxdd - (1.02 - 0.99) / 1.02).abs() < 1e-15);
    }

    #[test]
    fn trade_cost_arithmetic() {
        assert_eq!(apply_trade_cost(100.0, 0.2, 10.0), 100.0 * (1.0 - 0.001 * 0.2));
        assert_eq!(apply_trade_cost(100.0, 0.2, 10.0), 99.98);
        assert_eq!(apply_trade_cost(100.0, 0.0, 10.0), 100.0);
        assert_eq!(apply_trade_cost(100.0, 0.7, 0.0), 100.0);
    }

    #[test]
    fn book_accounting() {
        let mut b = Book::new(DVector::from_vec(vec![0.5, 0.5]), 10.0);
        b.mark();
        b.trade("d0", DVector::from_vec(vec![0.8, 0.2]), "target", None);
        b.mark();
        for r in [[0.01, -0.02], [0.03, 0.0], [-0.01, 0.01]] {
            b.drift(&DVector::from_vec(r.to_vec())).unwrap();
            b.mark();
        }
        b.trade("d3", DVector::from_vec(vec![0.5, 0.5]), "target", None);
        let residual = 1.0 + b.pnl.iter().sum::<f64>() - b.nav;
        assert!((residual - b.total_cost()).abs() < 1e-12);
        assert!((b.weights.sum() - 1.0).abs() < 1e-15);
        assert!((b.rows[0].turnover - 0.6).abs() < 1e-15);
    }

    #[test]
    fn forecast_csv_round_trip() {
        let s = ForecastSeries {
            label: "x".into(),
            records: vec![
                ForecastRecord {
                    date: "2020-01-31".into(),
                    scenarios: DMatrix::from_row_slice(3, 2, &[0.1, 0.2, 0.3, 0.4, 0.5, 1.0 / 3.0]),
                    weights: DVector::from_vec(vec![0.4, 0.6]),
                    realized: Some(DVector::from_vec(vec![0.01, -0.02])),
                },
                ForecastRecord {
                    date: "2020-02-28".into(),
                    scenarios: DMatrix::from_row_slice(1, 2, &[0.0, 0.2]),
                    weights: DVector::from_vec(vec![1.0, 0.0]),
                    realized: None,
                },
            ],
        };
        let mut buf = Vec::new();
        s.write_csv(&["a".into(), "b".into()], &mut buf).unwrap();
        let back = ForecastSeries::read_csv("x", buf.as_slice()).unwrap();
        assert_eq!(back, s);
    }
}
