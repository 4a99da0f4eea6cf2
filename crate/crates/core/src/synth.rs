//! Regime-switching synthetic markets with planted crisis windows.

use chrono::{Datelike, Days, NaiveDate, Weekday};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data_io::{PricePanel, ReturnPanel};
use crate::error::{Error, Result};
use crate::rng;

/// Daily Gaussian return law of one regime. The last asset is a defensive
/// sleeve with its own drift, volatility and correlation to the rest.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegimeLaw {
    pub drift: f64,
    pub vol: f64,
    pub corr: f64,
    pub safe_drift: f64,
    pub safe_vol: f64,
    pub safe_corr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub start: String,
    pub days: usize,
    pub assets: usize,
    pub seed: u64,
    pub calm: RegimeLaw,
    pub turbulent: RegimeLaw,
    pub crisis: RegimeLaw,
    /// Daily probability of staying in calm and in turbulent.
    pub stay_calm: f64,
    pub stay_turbulent: f64,
    /// (first date, length in business days) of each forced crisis.
    pub crises: Vec<(String, usize)>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            start: "2010-01-04".into(),
            days: 2610,
            assets: 5,
            seed: 20_240_601,
            calm: RegimeLaw {
                drift: 4e-4,
                vol: 0.008,
                corr: 0.3,
                safe_drift: 1.5e-4,
                safe_vol: 0.003,
                safe_corr: 0.0,
            },
            turbulent: RegimeLaw {
                drift: -2e-4,
                vol: 0.016,
                corr: 0.55,
                safe_drift: 2e-4,
                safe_vol: 0.004,
                safe_corr: -0.2,
            },
            crisis: RegimeLaw {
                drift: -3e-3,
                vol: 0.028,
                corr: 0.8,
                safe_drift: 4e-4,
                safe_vol: 0.005,
                safe_corr: -0.3,
            },
            stay_calm: 0.99,
            stay_turbulent: 0.97,
            crises: vec![("2011-08-01".into(), 45), ("2018-10-01".into(), 60)],
        }
    }
}

/// Mon–Fri dates starting at the first business day on or after `start`.
pub fn business_days(start: &str, n: usize) -> Result<Vec<String>> {
    let mut d = NaiveDate::parse_from_str(start, "%Y-%m-%d").map_err(|_| Error::Input(format!("bad start date '{start}'")))?;
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        if !matches!(d.weekday(), Weekday::Sat | Weekday::Sun) {
            out.push(d.format("%Y-%m-%d").to_string());
        }
        d = d + Days::new(1);
    }
    Ok(out)
}

impl RegimeLaw {
    fn mean(&self, d: usize) -> DVector<f64> {
        DVector::from_fn(d, |j, _| if j + 1 == d && d > 1 { self.safe_drift } else { self.drift })
    }

    fn chol(&self, d: usize) -> Result<DMatrix<f64>> {
        let risky = if d > 1 { d - 1 } else { d };
        let sd = |j: usize| if j < risky { self.vol } else { self.safe_vol };
        let cov = DMatrix::from_fn(d, d, |i, j| {
            let c = if i == j {
                1.0
            } else if i < risky && j < risky {
                self.corr
            } else {
                self.safe_corr
            };
            c * sd(i) * sd(j)
        });
        cov.cholesky()
            .map(|c| c.l())
            .ok_or_else(|| Error::Input("synthetic regime covariance is not positive definite".into()))
    }
}

/// Simulated returns and the regime path (0 calm, 1 turbulent, 2 crisis).
pub fn simulate(spec: &SynthSpec) -> Result<(ReturnPanel, Vec<usize>)> {
    if spec.assets == 0 || spec.days < 2 {
        return Err(Error::Input("synthetic panel needs at least one asset and two days".into()));
    }
    if !(0.0..1.0).contains(&spec.stay_calm) || !(0.0..1.0).contains(&spec.stay_turbulent) {
        return Err(Error::Input("stay probabilities must lie in [0, 1)".into()));
    }
    let d = spec.assets;
    let dates = business_days(&spec.start, spec.days)?;
    let laws = [spec.calm, spec.turbulent, spec.crisis];
    let means: Vec<DVector<f64>> = laws.iter().map(|l| l.mean(d)).collect();
    let chols = laws.iter().map(|l| l.chol(d)).collect::<Result<Vec<_>>>()?;

    let mut forced = vec![false; spec.days];
    for (first, len) in &spec.crises {
        let i = dates.partition_point(|x| x < first);
        for f in forced.iter_mut().skip(i).take(*len) {
            *f = true;
        }
    }

    let mut g = rng::seeded(spec.seed);
    let mut state = 0usize;
    let mut path = Vec::with_capacity(spec.days);
    let mut returns = DMatrix::zeros(spec.days, d);
    for t in 0..spec.days {
        let u: f64 = g.random();
        state = match state {
            0 if u >= spec.stay_calm => 1,
            1 if u >= spec.stay_turbulent => 0,
            2 => 1,
            s => s,
        };
        let s = if forced[t] { 2 } else { state };
        if forced[t] {
            state = 2;
        }
        let eps = DVector::from_fn(d, |_, _| StandardNormal.sample(&mut g));
        let r = &means[s] + &chols[s] * eps;
        for j in 0..d {
            returns[(t, j)] = r[j].max(-0.5);
        }
        path.push(s);
    }
    let names = (0..d)
        .map(|j| if j + 1 == d && d > 1 { "SAFE".to_string() } else { format!("EQ{}", j + 1) })
        .collect();
    Ok((ReturnPanel::new(dates, names, returns)?, path))
}

/// Prices starting at 100 on the business day before the first return.
pub fn prices(panel: &ReturnPanel, start: &str) -> Result<PricePanel> {
    let first = NaiveDate::parse_from_str(start, "%Y-%m-%d").map_err(|_| Error::Input(format!("bad start date '{start}'")))?;
    let mut prev = first - Days::new(1);
    while matches!(prev.weekday(), Weekday::Sat | Weekday::Sun) {
        prev = prev - Days::new(1);
    }
    let mut dates = vec![prev.format("%Y-%m-%d").to_string()];
    dates.extend(panel.dates.iter().cloned());
    Ok(PricePanel {
        dates,
        assets: panel.assets.clone(),
        prices: panel.to_prices(&vec![100.0; panel.n_assets()]),
        dropped_rows: 0,
    })
}
