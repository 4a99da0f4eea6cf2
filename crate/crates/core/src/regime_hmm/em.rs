//! Baum-Welch estimation with k-means++ initialization.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;

use super::filter::forward_log;
use super::{log_sum_exp, RegimeModel};
use crate::data_io::ReturnPanel;
use crate::error::{Error, Result};
use crate::rng;
use crate::stats;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmOptions {
    pub max_iter: usize,
    /// Stop once the log-likelihood improves by less than this.
    pub tol: f64,
    pub seed: u64,
}

impl Default for EmOptions {
    fn default() -> Self {
        Self {
            max_iter: 500,
            tol: 1e-6,
            seed: 2020,
        }
    }
}

/// Fitted model plus the per-iteration log-likelihood trace.
#[derive(Debug, Clone)]
pub struct EmFit {
    pub model: RegimeModel,
    /// Log-likelihood of the parameters entering each E-step.
    pub loglik_history: Vec<f64>,
    pub converged: bool,
}

/// Fits a K-state Gaussian HMM; states are returned in ascending order of
/// covariance trace, so the last state is the most volatile one.
pub fn fit_em(
    returns: &ReturnPanel,
    k: usize,
    seed: u64,
    max_iter: usize,
    tol: f64,
) -> Result<RegimeModel> {
    fit_em_traced(returns, k, EmOptions { max_iter, tol, seed }).map(|f| f.model)
}

fn jitter(cov: &mut DMatrix<f64>) {
    let d = cov.nrows();
    let eps = 1e-8 * cov.trace() / d as f64;
    for i in 0..d {
        cov[(i, i)] += eps;
    }
}

fn check_degenerate(returns: &ReturnPanel) -> Result<()> {
    for (j, col) in returns.returns.column_iter().enumerate() {
        let first = col[0];
        if col.iter().all(|v| *v == first) {
            return Err(Error::Degenerate(format!(
                "column '{}' has zero variance",
                returns.assets[j]
            )));
        }
    }
    Ok(())
}

fn sq_dist(x: &DMatrix<f64>, i: usize, c: &DVector<f64>) -> f64 {
    x.row(i).iter().zip(c.iter()).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// k-means++ seeding followed by Lloyd iterations.
fn kmeans(x: &DMatrix<f64>, k: usize, seed: u64) -> Vec<usize> {
    let n = x.nrows();
    let mut rng = rng::seeded(seed);
    let mut centers: Vec<DVector<f64>> = Vec::with_capacity(k);
    centers.push(x.row(rng.random_range(0..n)).transpose());
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(x, i, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            rng.random_range(0..n)
        } else {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, w) in d2.iter().enumerate() {
                if target < *w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            pick
        };
        let c = x.row(next).transpose();
        for (i, v) in d2.iter_mut().enumerate() {
            *v = v.min(sq_dist(x, i, &c));
        }
        centers.push(c);
    }

    let mut labels = vec![0usize; n];
    for _ in 0..100 {
        let mut changed = false;
        for (i, label) in labels.iter_mut().enumerate() {
            let best = (0..k)
                .min_by(|&a, &b| sq_dist(x, i, &centers[a]).total_cmp(&sq_dist(x, i, &centers[b])))
                .unwrap();
            if best != *label {
                *label = best;
                changed = true;
            }
        }
        for (c, center) in centers.iter_mut().enumerate() {
            let members: Vec<usize> = (0..n).filter(|&i| labels[i] == c).collect();
            if !members.is_empty() {
                *center = DVector::from_fn(x.ncols(), |j, _| {
                    members.iter().map(|&i| x[(i, j)]).sum::<f64>() / members.len() as f64
                });
            }
        }
        if !changed {
            break;
        }
    }
    labels
}

fn initial_model(x: &DMatrix<f64>, k: usize, seed: u64) -> RegimeModel {
    let d = x.ncols();
    let (global_mu, mut global_cov) = stats::mean_cov(x);
    jitter(&mut global_cov);
    if k == 1 {
        return RegimeModel {
            means: vec![global_mu],
            covariances: vec![global_cov],
            transition: DMatrix::from_element(1, 1, 1.0),
            initial: DVector::from_element(1, 1.0),
        };
    }
    let labels = kmeans(x, k, seed);
    let mut means = Vec::with_capacity(k);
    let mut covs = Vec::with_capacity(k);
    for c in 0..k {
        let rows: Vec<usize> = (0..x.nrows()).filter(|&i| labels[i] == c).collect();
        if rows.len() <= d {
            means.push(if rows.is_empty() {
                global_mu.clone()
            } else {
                stats::column_means(&x.select_rows(rows.iter()))
            });
            covs.push(global_cov.clone());
            continue;
        }
        let (mu, mut cov) = stats::mean_cov(&x.select_rows(rows.iter()));
        jitter(&mut cov);
        if Cholesky::new(cov.clone()).is_none() {
            cov = global_cov.clone();
        }
        means.push(mu);
        covs.push(cov);
    }
    RegimeModel {
        means,
        covariances: covs,
        transition: DMatrix::from_element(k, k, 1.0 / k as f64),
        initial: DVector::from_element(k, 1.0 / k as f64),
    }
}

/// One E-step: log-likelihood, smoothed posteriors, and expected transition counts.
fn e_step(model: &RegimeModel, x: &DMatrix<f64>) -> Result<(f64, DMatrix<f64>, DMatrix<f64>)> {
    let k = model.k();
    let t_len = x.nrows();
    let (log_f, norms, log_b) = forward_log(model, x)?;
    let log_a = model.transition.map(f64::ln);

    // Scaled backward pass: log_beta[t] = log P(R_{t+1..T} | S_t) - sum of later norms.
    let mut log_beta = DMatrix::zeros(t_len, k);
    for t in (0..t_len.saturating_sub(1)).rev() {
        for i in 0..k {
            log_beta[(t, i)] = log_sum_exp(
                (0..k).map(|j| log_a[(i, j)] + log_b[(t + 1, j)] + log_beta[(t + 1, j)]),
            ) - norms[t + 1];
        }
    }

    let mut gamma = DMatrix::zeros(t_len, k);
    for t in 0..t_len {
        let lse = log_sum_exp((0..k).map(|i| log_f[(t, i)] + log_beta[(t, i)]));
        for i in 0..k {
            gamma[(t, i)] = (log_f[(t, i)] + log_beta[(t, i)] - lse).exp();
        }
    }

    let mut xi_sum = DMatrix::zeros(k, k);
    for t in 0..t_len.saturating_sub(1) {
        for i in 0..k {
            for j in 0..k {
                let lx = log_f[(t, i)] + log_a[(i, j)] + log_b[(t + 1, j)] + log_beta[(t + 1, j)]
                    - norms[t + 1];
                xi_sum[(i, j)] += lx.exp();
            }
        }
    }
    Ok((norms.iter().sum(), gamma, xi_sum))
}

fn m_step(prev: &RegimeModel, x: &DMatrix<f64>, gamma: &DMatrix<f64>, xi: &DMatrix<f64>) -> RegimeModel {
    let k = prev.k();
    let d = prev.d();
    let t_len = x.nrows();
    let mut model = prev.clone();

    let s0: f64 = gamma.row(0).sum();
    for i in 0..k {
        model.initial[i] = gamma[(0, i)] / s0;
    }
    for i in 0..k {
        let row: f64 = xi.row(i).sum();
        if row > 0.0 {
            for j in 0..k {
                model.transition[(i, j)] = xi[(i, j)] / row;
            }
        }
    }

    for s in 0..k {
        let w: f64 = gamma.column(s).sum();
        if w <= 1e-10 * t_len as f64 {
            // collapsed state: keep its emission parameters
            continue;
        }
        let mu = DVector::from_fn(d, |j, _| {
            (0..t_len).map(|t| gamma[(t, s)] * x[(t, j)]).sum::<f64>() / w
        });
        let mut cov = DMatrix::zeros(d, d);
        for t in 0..t_len {
            let g = gamma[(t, s)];
            for a in 0..d {
                let da = x[(t, a)] - mu[a];
                for b in a..d {
                    cov[(a, b)] += g * da * (x[(t, b)] - mu[b]);
                }
            }
        }
        for a in 0..d {
            for b in a..d {
                let v = cov[(a, b)] / w;
                cov[(a, b)] = v;
                cov[(b, a)] = v;
            }
        }
        jitter(&mut cov);
        if Cholesky::new(cov.clone()).is_some() {
            model.means[s] = mu;
            model.covariances[s] = cov;
        }
    }
    model
}

/// Baum-Welch with the log-likelihood trace.
pub fn fit_em_traced(returns: &ReturnPanel, k: usize, opts: EmOptions) -> Result<EmFit> {
    if k == 0 {
        return Err(Error::Input("K must be at least 1".into()));
    }
    let t_len = returns.n_dates();
    if t_len < 10 * k {
        return Err(Error::Input(format!(
            "need at least {} observations for K = {k}, got {t_len}",
            10 * k
        )));
    }
    check_degenerate(returns)?;
    let x = &returns.returns;
    let mut model = initial_model(x, k, opts.seed);
    let mut history = Vec::new();
    let mut converged = false;
    for _ in 0..opts.max_iter.max(1) {
        let (ll, gamma, xi) = e_step(&model, x)?;
        if !ll.is_finite() {
            return Err(Error::Numerical("non-finite log-likelihood in EM".into()));
        }
        if let Some(prev) = history.last() {
            if ll - prev < opts.tol {
                history.push(ll);
                converged = true;
                break;
            }
        }
        history.push(ll);
        model = m_step(&model, x, &gamma, &xi);
    }
    let order = {
        let mut idx: Vec<usize> = (0..k).collect();
        idx.sort_by(|&a, &b| {
            model.covariances[a]
                .trace()
                .total_cmp(&model.covariances[b].trace())
        });
        idx
    };
    Ok(EmFit {
        model: model.permuted(&order),
        loglik_history: history,
        converged,
    })
}
