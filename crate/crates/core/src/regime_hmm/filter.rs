use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{log_sum_exp, Emissions, RegimeModel};
use crate::data_io::ReturnPanel;
use crate::error::{Error, Result};

/// Filtered state probabilities, one row per observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimePosteriors {
    pub gamma: DMatrix<f64>,
    pub loglik: f64,
}

impl RegimePosteriors {
    pub fn row(&self, t: usize) -> Vec<f64> {
        self.gamma.row(t).iter().copied().collect()
    }

    /// CSV with header `date,pi_1..pi_K`.
    pub fn write_csv<W: std::io::Write>(&self, dates: &[String], writer: W) -> Result<()> {
        if dates.len() != self.gamma.nrows() {
            return Err(Error::Dimension("posterior rows and dates differ".into()));
        }
        let mut wtr = csv::Writer::from_writer(writer);
        let mut header = vec!["date".to_string()];
        header.extend((1..=self.gamma.ncols()).map(|k| format!("pi_{k}")));
        wtr.write_record(&header)?;
        for (t, date) in dates.iter().enumerate() {
            let mut rec = vec![date.clone()];
            rec.extend(self.gamma.row(t).iter().map(|v| crate::data_io::format_num(*v)));
            wtr.write_record(&rec)?;
        }
        wtr.flush().map_err(|e| Error::io("<csv writer>", e))?;
        Ok(())
    }
}

/// Log-space forward pass. Returns log filtered probabilities (T x K), the
/// per-step log normalizers, and the log emission matrix.
pub(crate) fn forward_log(
    model: &RegimeModel,
    x: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, Vec<f64>, DMatrix<f64>)> {
    let k = model.k();
    if x.ncols() != model.d() {
        return Err(Error::Dimension(format!(
            "model has d = {} but returns have {} columns",
            model.d(),
            x.ncols()
        )));
    }
    let em = Emissions::new(model)?;
    let log_b = em.log_densities(x);
    let log_a = model.transition.map(f64::ln);
    let t_len = x.nrows();
    let mut log_f = DMatrix::zeros(t_len, k);
    let mut norms = Vec::with_capacity(t_len);
    let mut la = vec![0.0; k];
    for t in 0..t_len {
        for j in 0..k {
            let prior = if t == 0 {
                model.initial[j].ln()
            } else {
                log_sum_exp((0..k).map(|i| log_f[(t - 1, i)] + log_a[(i, j)]))
            };
            la[j] = prior + log_b[(t, j)];
        }
        let norm = log_sum_exp(la.iter().copied());
        if !norm.is_finite() {
            return Err(Error::Numerical(format!("forward pass underflow at row {t}")));
        }
        for j in 0..k {
            log_f[(t, j)] = la[j] - norm;
        }
        norms.push(norm);
    }
    Ok((log_f, norms, log_b))
}

/// Filtered posteriors `P(S_t = k | R_1..R_t)` and the window log-likelihood.
pub fn filter_posteriors(model: &RegimeModel, returns: &ReturnPanel) -> Result<RegimePosteriors> {
    if returns.n_dates() == 0 {
        return Err(Error::Input("cannot filter an empty return window".into()));
    }
    let (log_f, norms, _) = forward_log(model, &returns.returns)?;
    let mut gamma = log_f.map(f64::exp);
    // Renormalize so rows sum to 1 to rounding.
    for mut row in gamma.row_iter_mut() {
        let s: f64 = row.sum();
        row /= s;
    }
    Ok(RegimePosteriors {
        gamma,
        loglik: norms.iter().sum(),
    })
}
