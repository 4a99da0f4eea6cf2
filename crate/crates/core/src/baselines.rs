//! Equal-weight, risk-parity and no-views Black-Litterman target portfolios.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BaselineKind {
    #[serde(rename = "EW")]
    EqualWeight,
    #[serde(rename = "RP")]
    RiskParity,
    #[serde(rename = "BL")]
    BlackLitterman,
}

impl BaselineKind {
    pub fn label(self) -> &'static str {
        match self {
            BaselineKind::EqualWeight => "EW",
            BaselineKind::RiskParity => "RP",
            BaselineKind::BlackLitterman => "BL",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineSpec {
    pub tau_bl: f64,
    pub risk_aversion: f64,
    /// Cap-weight proxy; equal weight when absent.
    pub market_weights: Option<Vec<f64>>,
    /// View uncertainty scale. Kept for completeness; without views it has
    /// nothing to act on.
    pub omega: Option<f64>,
}

impl Default for BaselineSpec {
    fn default() -> Self {
        Self {
            tau_bl: 0.05,
            risk_aversion: 2.5,
            market_weights: None,
            omega: None,
        }
    }
}

impl BaselineSpec {
    pub fn market(&self, d: usize) -> Result<DVector<f64>> {
        let w = match &self.market_weights {
            None => return Ok(equal_weight(d)),
            Some(w) => DVector::from_column_slice(w),
        };
        if w.len() != d {
            return Err(Error::Dimension(format!("market weights have {} entries for {d} assets", w.len())));
        }
        if w.iter().any(|&v| !(v >= 0.0)) || (w.sum() - 1.0).abs() > 1e-8 {
            return Err(Error::Input("market weights must be nonnegative and sum to 1".into()));
        }
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau_bl > 0.0 && self.tau_bl.is_finite()) || !(self.risk_aversion > 0.0 && self.risk_aversion.is_finite()) {
            return Err(Error::Config("BL tau and risk aversion must be positive".into()));
        }
        if let Some(w) = &self.market_weights {
            self.market(w.len())?;
        }
        Ok(())
    }
}

pub fn equal_weight(d: usize) -> DVector<f64> {
    DVector::from_element(d, 1.0 / d as f64)
}

fn check_pd(sigma: &DMatrix<f64>) -> Result<()> {
    if !sigma.is_square() || sigma.nrows() == 0 {
        return Err(Error::Dimension(format!("covariance must be square and nonempty, got {:?}", sigma.shape())));
    }
    if sigma.clone().cholesky().is_none() {
        return Err(Error::NotPositiveDefinite("baseline covariance".into()));
    }
    Ok(())
}

/// Risk contributions w_i(Σw)_i.
pub fn risk_contributions(sigma: &DMatrix<f64>, w: &DVector<f64>) -> DVector<f64> {
    w.component_mul(&(sigma * w))
}

/// Long-only equal-risk-contribution portfolio. Cyclical coordinate descent
/// on ½xᵀΣx − (1/d)Σ log x_i, whose minimizer has x_i(Σx)_i = 1/d, then
/// normalized to the budget. Stops when every contribution is within
/// `tol` (relative) of wᵀΣw/d.
pub fn risk_parity(sigma: &DMatrix<f64>, tol: f64) -> Result<DVector<f64>> {
    check_pd(sigma)?;
    let d = sigma.nrows();
    let b = 1.0 / d as f64;
    let mut x = DVector::from_iterator(d, (0..d).map(|i| 1.0 / sigma[(i, i)].sqrt()));
    for _ in 0..100_000 {
        for i in 0..d {
            let a = sigma[(i, i)];
            let c = sigma.row(i).transpose().dot(&x) - a * x[i];
            x[i] = (-c + (c * c + 4.0 * a * b).sqrt()) / (2.0 * a);
        }
        let w = &x / x.sum();
        let rc = risk_contributions(sigma, &w);
        let target = rc.sum() / d as f64;
        if rc.iter().all(|&r| (r - target).abs() <= tol * target) {
            return Ok(w);
        }
    }
    Err(Error::Numerical("risk parity did not converge".into()))
}

/// Implied equilibrium returns π = δΣw_mkt. Without views the posterior mean
/// is π itself and the target is the market proxy.
pub fn black_litterman_no_views(spec: &BaselineSpec, sigma: &DMatrix<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
    spec.validate()?;
    check_pd(sigma)?;
    let w = spec.market(sigma.nrows())?;
    let pi = sigma * &w * spec.risk_aversion;
    Ok((pi, w))
}

/// Unprojected target for a baseline.
pub fn baseline_target(kind: BaselineKind, spec: &BaselineSpec, sigma: &DMatrix<f64>) -> Result<DVector<f64>> {
    match kind {
        BaselineKind::EqualWeight => Ok(equal_weight(sigma.nrows())),
        BaselineKind::RiskParity => risk_parity(sigma, 1e-8),
        BaselineKind::BlackLitterman => Ok(black_litterman_no_views(spec, sigma)?.1),
    }
}
