//! K-state Gaussian hidden Markov model for market regimes.
//!
//! Decisions only ever see *filtered* posteriors `P(S_t = k | R_1..R_t)`;
//! smoothed posteriors are confined to the Baum-Welch E-step.

mod context;
mod em;
mod filter;
mod rolling;

pub use context::{context_features, ContextSpec, RegimeContext};
pub use em::{fit_em, fit_em_traced, EmFit, EmOptions};
pub use filter::{filter_posteriors, RegimePosteriors};
pub use rolling::{align_to, model_at, rolling_refit, RefitEntry};

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Gaussian HMM parameters with full per-state covariances.
#[derive(Debug, Clone, PartialEq)]
pub struct RegimeModel {
    pub means: Vec<DVector<f64>>,
    pub covariances: Vec<DMatrix<f64>>,
    /// Row-stochastic, `transition[(i, j)] = P(S_{t+1} = j | S_t = i)`.
    pub transition: DMatrix<f64>,
    pub initial: DVector<f64>,
}

/// JSON wire form: nested arrays, row-major.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct RegimeModelJson {
    k: usize,
    d: usize,
    means: Vec<Vec<f64>>,
    covariances: Vec<Vec<Vec<f64>>>,
    transition: Vec<Vec<f64>>,
    initial: Vec<f64>,
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn from_rows(rows: &[Vec<f64>], n: usize, m: usize) -> Result<DMatrix<f64>> {
    if rows.len() != n || rows.iter().any(|r| r.len() != m) {
        return Err(Error::Input(format!("expected a {n}x{m} array")));
    }
    Ok(DMatrix::from_fn(n, m, |i, j| rows[i][j]))
}

impl RegimeModel {
    pub fn k(&self) -> usize {
        self.means.len()
    }

    pub fn d(&self) -> usize {
        self.means.first().map_or(0, |m| m.len())
    }

    /// Checks shapes, stochasticity and positive definiteness.
    pub fn validate(&self) -> Result<()> {
        let k = self.k();
        let d = self.d();
        if k == 0 || d == 0 {
            return Err(Error::Input("regime model needs K >= 1 and d >= 1".into()));
        }
        if self.covariances.len() != k
            || self.transition.shape() != (k, k)
            || self.initial.len() != k
            || self.means.iter().any(|m| m.len() != d)
            || self.covariances.iter().any(|c| c.shape() != (d, d))
        {
            return Err(Error::Dimension("inconsistent regime model shapes".into()));
        }
        for i in 0..k {
            let row: f64 = self.transition.row(i).sum();
            if (row - 1.0).abs() > 1e-12 || self.transition.row(i).iter().any(|p| *p < 0.0) {
                return Err(Error::Input(format!("transition row {i} is not a distribution")));
            }
        }
        if (self.initial.sum() - 1.0).abs() > 1e-12 || self.initial.iter().any(|p| *p < 0.0) {
            return Err(Error::Input("initial distribution does not sum to 1".into()));
        }
        for (i, c) in self.covariances.iter().enumerate() {
            if Cholesky::new(c.clone()).is_none() {
                return Err(Error::NotPositiveDefinite(format!("covariance of state {i}")));
            }
        }
        Ok(())
    }

    /// Index of the high-volatility state: largest average covariance trace.
    pub fn crisis_state(&self) -> usize {
        let mut best = 0;
        let mut best_tr = f64::NEG_INFINITY;
        for (i, c) in self.covariances.iter().enumerate() {
            let tr = c.trace();
            if tr > best_tr {
                best_tr = tr;
                best = i;
            }
        }
        best
    }

    /// Number of free parameters: means, covariances, transitions, initial.
    pub fn n_free_params(&self) -> usize {
        let k = self.k();
        let d = self.d();
        k * d + k * d * (d + 1) / 2 + k * (k - 1) + (k - 1)
    }

    /// Reorders states so that new state `i` is old state `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> RegimeModel {
        let k = self.k();
        RegimeModel {
            means: perm.iter().map(|&p| self.means[p].clone()).collect(),
            covariances: perm.iter().map(|&p| self.covariances[p].clone()).collect(),
            transition: DMatrix::from_fn(k, k, |i, j| self.transition[(perm[i], perm[j])]),
            initial: DVector::from_fn(k, |i, _| self.initial[perm[i]]),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let wire = RegimeModelJson {
            k: self.k(),
            d: self.d(),
            means: self.means.iter().map(|m| m.iter().copied().collect()).collect(),
            covariances: self.covariances.iter().map(rows_of).collect(),
            transition: rows_of(&self.transition),
            initial: self.initial.iter().copied().collect(),
        };
        Ok(serde_json::to_string_pretty(&wire)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let w: RegimeModelJson = serde_json::from_str(s)?;
        if w.means.len() != w.k || w.covariances.len() != w.k {
            return Err(Error::Input("regime model JSON: K does not match arrays".into()));
        }
        let model = RegimeModel {
            means: w
                .means
                .iter()
                .map(|m| {
                    if m.len() == w.d {
                        Ok(DVector::from_column_slice(m))
                    } else {
                        Err(Error::Input("regime model JSON: bad mean length".into()))
                    }
                })
                .collect::<Result<_>>()?,
            covariances: w
                .covariances
                .iter()
                .map(|c| from_rows(c, w.d, w.d))
                .collect::<Result<_>>()?,
            transition: from_rows(&w.transition, w.k, w.k)?,
            initial: DVector::from_vec(w.initial),
        };
        model.validate()?;
        Ok(model)
    }
}

/// Per-state Cholesky factors for evaluating Gaussian log-densities.
pub(crate) struct Emissions {
    means: Vec<DVector<f64>>,
    chols: Vec<Cholesky<f64, Dyn>>,
    log_norm: Vec<f64>,
}

impl Emissions {
    pub(crate) fn new(model: &RegimeModel) -> Result<Self> {
        let d = model.d() as f64;
        let mut chols = Vec::with_capacity(model.k());
        let mut log_norm = Vec::with_capacity(model.k());
        for (i, c) in model.covariances.iter().enumerate() {
            let ch = Cholesky::new(c.clone())
                .ok_or_else(|| Error::NotPositiveDefinite(format!("covariance of state {i}")))?;
            let log_det: f64 = ch.l_dirty().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
            log_norm.push(-0.5 * (d * (2.0 * PI).ln() + log_det));
            chols.push(ch);
        }
        Ok(Self {
            means: model.means.clone(),
            chols,
            log_norm,
        })
    }

    /// T x K matrix of log emission densities.
    pub(crate) fn log_densities(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let t = x.nrows();
        let k = self.means.len();
        let mut out = DMatrix::zeros(t, k);
        for s in 0..k {
            let l = self.chols[s].l_dirty();
            let mut diff = x.clone();
            for mut row in diff.row_iter_mut() {
                row -= self.means[s].transpose();
            }
            // Solve L y = diff^T for all rows at once.
            let mut y = diff.transpose();
            l.solve_lower_triangular_mut(&mut y);
            for i in 0..t {
                let q = y.column(i).norm_squared();
                out[(i, s)] = self.log_norm[s] - 0.5 * q;
            }
        }
        out
    }
}

pub(crate) fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `-2 loglik + p ln(T)`.
pub fn bic_value(loglik: f64, n_params: usize, n_obs: f64) -> f64 {
    -2.0 * loglik + n_params as f64 * n_obs.ln()
}

/// Bayesian information criterion of `model` on `returns`.
pub fn bic(model: &RegimeModel, returns: &crate::data_io::ReturnPanel) -> Result<f64> {
    let post = filter_posteriors(model, returns)?;
    Ok(bic_value(post.loglik, model.n_free_params(), returns.n_dates() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn toy_model() -> RegimeModel {
        RegimeModel {
            means: vec![DVector::from_vec(vec![0.01, 0.0]), DVector::from_vec(vec![-0.02, 0.01])],
            covariances: vec![
                DMatrix::from_row_slice(2, 2, &[1e-4, 2e-5, 2e-5, 2e-4]),
                DMatrix::from_row_slice(2, 2, &[9e-4, -1e-4, -1e-4, 4e-4]),
            ],
            transition: DMatrix::from_row_slice(2, 2, &[0.9, 0.1, 0.2, 0.8]),
            initial: DVector::from_vec(vec![0.6, 0.4]),
        }
    }

    #[test]
    fn bic_formula_plug_in() {
        let t = std::f64::consts::E * std::f64::consts::E;
        assert!((bic_value(0.0, 5, t) - 10.0).abs() < 1e-12);
        assert_eq!(bic_value(0.0, 5, 1.0), 0.0);
    }

    #[test]
    fn param_count() {
        let m = toy_model();
        // K d + K d(d+1)/2 + K(K-1) + (K-1) = 4 + 6 + 2 + 1
        assert_eq!(m.n_free_params(), 13);
    }

    #[test]
    fn json_round_trip_bit_exact() {
        let m = toy_model();
        let back = RegimeModel::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn crisis_is_largest_trace() {
        assert_eq!(toy_model().crisis_state(), 1);
    }

    #[test]
    fn validate_rejects_non_pd_and_bad_rows() {
        let mut m = toy_model();
        m.covariances[0] = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(m.validate(), Err(Error::NotPositiveDefinite(_))));
        let mut m = toy_model();
        m.transition[(0, 0)] = 0.95;
        assert!(m.validate().is_err());
    }

    #[test]
    fn permutation_moves_everything() {
        let m = toy_model();
        let p = m.permuted(&[1, 0]);
        assert_eq!(p.means[0], m.means[1]);
        assert_eq!(p.transition[(0, 0)], m.transition[(1, 1)]);
        assert_eq!(p.transition[(0, 1)], m.transition[(1, 0)]);
        assert_eq!(p.permuted(&[1, 0]), m);
    }
}
