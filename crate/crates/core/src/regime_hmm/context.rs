use serde::{Deserialize, Serialize};

use crate::data_io::ReturnPanel;
use crate::error::{Error, Result};
use crate::stats;

/// Which feature blocks make up the conditioning vector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContextSpec {
    pub posteriors: bool,
    pub one_hot: bool,
    pub volatility: bool,
    pub mean_return: bool,
    /// Trailing rows for the volatility and mean blocks.
    pub lookback: usize,
}

impl Default for ContextSpec {
    fn default() -> Self {
        Self {
            posteriors: true,
            one_hot: true,
            volatility: true,
            mean_return: true,
            lookback: 21,
        }
    }
}

impl ContextSpec {
    pub fn dim(&self, k: usize, d: usize) -> usize {
        let mut n = 0;
        if self.posteriors {
            n += k;
        }
        if self.one_hot {
            n += k;
        }
        if self.volatility {
            n += d;
        }
        if self.mean_return {
            n += d;
        }
        n
    }

    /// Offset of posterior `state` inside the feature vector, if present.
    pub fn posterior_offset(&self, state: usize) -> Option<usize> {
        self.posteriors.then_some(state)
    }
}

/// Regime conditioning vector for one date.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeContext {
    pub z: Vec<f64>,
}

impl RegimeContext {
    pub fn zeros(dim: usize) -> Self {
        Self { z: vec![0.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.z.len()
    }
}

/// Features at row `date_index`: posterior vector, one-hot of its argmax,
/// annualized trailing volatility and trailing mean per asset. The trailing
/// window ends at `date_index` inclusive.
pub fn context_features(
    pi: &[f64],
    returns: &ReturnPanel,
    date_index: usize,
    spec: &ContextSpec,
) -> Result<RegimeContext> {
    let lookback = spec.lookback.max(2);
    if date_index < lookback || date_index >= returns.n_dates() {
        return Err(Error::Input(format!(
            "insufficient history for context at row {date_index} (need {lookback} prior rows)"
        )));
    }
    let mut z = Vec::with_capacity(spec.dim(pi.len(), returns.n_assets()));
    if spec.posteriors {
        z.extend_from_slice(pi);
    }
    if spec.one_hot {
        let arg = pi
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, &p)| if p > acc.1 { (i, p) } else { acc })
            .0;
        z.extend((0..pi.len()).map(|i| if i == arg { 1.0 } else { 0.0 }));
    }
    let start = date_index + 1 - lookback;
    let cols: Vec<Vec<f64>> = (0..returns.n_assets())
        .map(|j| (start..=date_index).map(|t| returns.returns[(t, j)]).collect())
        .collect();
    if spec.volatility {
        z.extend(cols.iter().map(|c| stats::std_dev(c) * 252f64.sqrt()));
    }
    if spec.mean_return {
        z.extend(cols.iter().map(|c| stats::mean(c)));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite context feature".into()));
    }
    Ok(RegimeContext { z })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    #[test]
    fn constant_window_has_zero_vol() {
        let r = ReturnPanel::from_matrix(DMatrix::from_element(30, 2, 0.001)).unwrap();
        let c = context_features(&[0.2, 0.8], &r, 25, &ContextSpec::default()).unwrap();
        assert_eq!(c.z.len(), 2 + 2 + 2 + 2);
        assert_eq!(&c.z[4..6], &[0.0, 0.0]);
        assert!((c.z[6] - 0.001).abs() < 1e-15);
    }

    #[test]
    fn one_hot_block() {
        let r = ReturnPanel::from_matrix(DMatrix::from_element(30, 1, 0.0)).unwrap();
        let c = context_features(&[0.0, 1.0, 0.0], &r, 22, &ContextSpec::default()).unwrap();
        assert_eq!(&c.z[3..6], &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn hand_computed_window() {
        // 21 rows alternating 0.01 / -0.01 then the feature row itself.
        let vals: Vec<f64> = (0..22).map(|i| if i % 2 == 0 { 0.01 } else { -0.01 }).collect();
        let r = ReturnPanel::from_matrix(DMatrix::from_column_slice(22, 1, &vals)).unwrap();
        let spec = ContextSpec::default();
        let c = context_features(&[0.7, 0.3], &r, 21, &spec).unwrap();
        // window rows 1..=21: ten of 0.01 (even rows 2..20) and eleven of -0.01.
        let mean = (10.0 * 0.01 - 11.0 * 0.01) / 21.0;
        let ss = 10.0 * (0.01f64 - mean).powi(2) + 11.0 * (-0.01f64 - mean).powi(2);
        let vol = (ss / 20.0).sqrt() * 252f64.sqrt();
        assert_eq!(&c.z[..4], &[0.7, 0.3, 1.0, 0.0]);
        assert!((c.z[4] - vol).abs() < 1e-14);
        assert!((c.z[5] - mean).abs() < 1e-16);
    }

    #[test]
    fn insufficient_history() {
        let r = ReturnPanel::from_matrix(DMatrix::from_element(30, 1, 0.0)).unwrap();
        assert!(context_features(&[1.0], &r, 20, &ContextSpec::default()).is_err());
    }

    #[test]
    fn configurable_blocks() {
        let spec = ContextSpec {
            one_hot: false,
            mean_return: false,
            ..Default::default()
        };
        assert_eq!(spec.dim(3, 4), 7);
        let r = ReturnPanel::from_matrix(DMatrix::from_element(30, 4, 0.0)).unwrap();
        let c = context_features(&[0.1, 0.2, 0.7], &r, 25, &spec).unwrap();
        assert_eq!(c.dim(), 7);
    }
}
