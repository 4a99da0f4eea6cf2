//! Historical and scenario moments, their convex blend, and shrinkage toward
//! a scaled identity.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data_io::ReturnPanel;
use crate::error::{Error, Result};
use crate::scenario_gen::ScenarioSet;
use crate::stats;

const DEGENERATE_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Provenance {
    /// Weight on the scenario moments when blended.
    pub lambda: Option<f64>,
    /// Shrinkage intensity when shrunk.
    pub delta: Option<f64>,
    /// Rows behind the estimate.
    pub window: usize,
    /// Set when shrinkage hit a zero-trace covariance.
    #[serde(default)]
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
    pub provenance: Provenance,
}

impl Moments {
    pub fn d(&self) -> usize {
        self.mu.len()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn moments_of(rows: &DMatrix<f64>) -> Moments {
    let (mu, sigma) = stats::mean_cov(rows);
    Moments {
        mu,
        sigma,
        provenance: Provenance {
            window: rows.nrows(),
            ..Default::default()
        },
    }
}

/// Sample mean and covariance over the last `window` rows.
pub fn historical_moments(returns: &ReturnPanel, window: usize) -> Result<Moments> {
    let t = returns.n_dates();
    if t == 0 {
        return Err(Error::Input("empty return history".into()));
    }
    historical_moments_at(returns, t - 1, window)
}

/// Sample moments over rows `(end - window, end]`.
pub fn historical_moments_at(returns: &ReturnPanel, end: usize, window: usize) -> Result<Moments> {
    if window < 2 {
        return Err(Error::Input(format!("moment window must be at least 2, got {window}")));
    }
    if end >= returns.n_dates() || window > end + 1 {
        return Err(Error::Input(format!(
            "moment window of {window} rows ending at row {end} exceeds the history"
        )));
    }
    let rows = returns.returns.rows(end + 1 - window, window).into_owned();
    Ok(moments_of(&rows))
}

pub fn scenario_moments(set: &ScenarioSet) -> Result<Moments> {
    if set.n() < 2 {
        return Err(Error::Input("scenario moments need at least 2 scenarios".into()));
    }
    Ok(moments_of(&set.scenarios))
}

/// `lambda * synth + (1 - lambda) * hist` for means and covariances.
pub fn blend(synth: &Moments, hist: &Moments, lambda: f64) -> Result<Moments> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Input(format!("blend weight must be in [0, 1], got {lambda}")));
    }
    if synth.d() != hist.d() || synth.sigma.shape() != hist.sigma.shape() {
        return Err(Error::Dimension(format!(
            "cannot blend {}-asset and {}-asset moments",
            synth.d(),
            hist.d()
        )));
    }
    let (mu, mut sigma) = if lambda == 0.0 {
        (hist.mu.clone(), hist.sigma.clone())
    } else if lambda == 1.0 {
        (synth.mu.clone(), synth.sigma.clone())
    } else {
        (
            &synth.mu * lambda + &hist.mu * (1.0 - lambda),
            &synth.sigma * lambda + &hist.sigma * (1.0 - lambda),
        )
    };
    stats::symmetrize(&mut sigma);
    Ok(Moments {
        mu,
        sigma,
        provenance: Provenance {
            lambda: Some(lambda),
            delta: None,
            window: hist.provenance.window,
            degenerate: false,
        },
    })
}

/// Shrinkage intensity: a fixed value or the Ledoit-Wolf estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shrinkage {
    Fixed(f64),
    Auto,
}

impl Default for Shrinkage {
    fn default() -> Self {
        Shrinkage::Auto
    }
}

/// Ledoit-Wolf intensity toward `(tr S / d) I` for the rows of `x`.
pub fn ledoit_wolf_intensity(x: &DMatrix<f64>) -> f64 {
    let (n, d) = x.shape();
    if n < 2 || d == 0 {
        return 1.0;
    }
    let mean = stats::column_means(x);
    let xc = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let s = xc.transpose() * &xc / n as f64;
    let target = s.trace() / d as f64;
    let mut dist = s.clone();
    for j in 0..d {
        dist[(j, j)] -= target;
    }
    let d2 = dist.norm_squared();
    if d2 <= 0.0 {
        return 0.0;
    }
    let mut b_bar = 0.0;
    for k in 0..n {
        let r = xc.row(k);
        let mut acc = 0.0;
        for a in 0..d {
            for b in 0..d {
                let e = r[a] * r[b] - s[(a, b)];
                acc += e * e;
            }
        }
        b_bar += acc;
    }
    b_bar /= (n * n) as f64;
    (b_bar.min(d2) / d2).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Shrunk {
    pub sigma: DMatrix<f64>,
    pub delta: f64,
    pub degenerate: bool,
}

/// `(1 - delta) sigma + delta (tr sigma / d) I`. `Auto` needs the return
/// window the covariance came from.
pub fn shrink(sigma: &DMatrix<f64>, delta: Shrinkage, window: Option<&DMatrix<f64>>) -> Result<Shrunk> {
    let d = sigma.nrows();
    if sigma.ncols() != d || d == 0 {
        return Err(Error::Dimension("covariance must be square and nonempty".into()));
    }
    let delta = match delta {
        Shrinkage::Fixed(v) if (0.0..=1.0).contains(&v) => v,
        Shrinkage::Fixed(v) => {
            return Err(Error::Input(format!("shrinkage intensity must be in [0, 1], got {v}")))
        }
        Shrinkage::Auto => {
            let x = window.ok_or_else(|| Error::Input("automatic shrinkage needs the return window".into()))?;
            if x.ncols() != d {
                return Err(Error::Dimension("shrinkage window width differs from covariance".into()));
            }
            ledoit_wolf_intensity(x)
        }
    };
    if delta == 0.0 {
        return Ok(Shrunk {
            sigma: sigma.clone(),
            delta,
            degenerate: false,
        });
    }
    let trace = sigma.trace();
    if trace <= 0.0 {
        return Ok(Shrunk {
            sigma: DMatrix::identity(d, d) * DEGENERATE_EPS,
            delta,
            degenerate: true,
        });
    }
    let eta = trace / d as f64;
    let mut out = sigma * (1.0 - delta);
    for j in 0..d {
        out[(j, j)] += delta * eta;
    }
    stats::symmetrize(&mut out);
    Ok(Shrunk {
        sigma: out,
        delta,
        degenerate: false,
    })
}

/// Shrinks `m.sigma` and records the intensity in the provenance.
pub fn shrink_moments(m: &Moments, delta: Shrinkage, window: Option<&DMatrix<f64>>) -> Result<Moments> {
    let s = shrink(&m.sigma, delta, window)?;
    let mut out = m.clone();
    out.sigma = s.sigma;
    out.provenance.delta = Some(s.delta);
    out.provenance.degenerate = s.degenerate;
    Ok(out)
}
