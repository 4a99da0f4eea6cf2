use serde::{Deserialize, Serialize};

use super::TailConfig;
use crate::stats;

/// Which side of the worst-asset-loss distribution counts as tail.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TailOrientation {
    /// The largest `q` fraction of worst-asset losses (severe down moves).
    Adverse,
    /// The smallest `q` fraction, i.e. the indicator `l <= Q_q(l)` read literally.
    Literal,
}

impl TailOrientation {
    /// Quantile level of the threshold for tail fraction `q`.
    pub fn level(self, q: f64) -> f64 {
        match self {
            TailOrientation::Adverse => 1.0 - q,
            TailOrientation::Literal => q,
        }
    }

    pub fn is_tail(self, loss: f64, threshold: f64) -> bool {
        match self {
            TailOrientation::Adverse => loss >= threshold,
            TailOrientation::Literal => loss <= threshold,
        }
    }
}

/// `-min_j r_j` for one return vector.
pub fn worst_asset_loss(r: &[f64]) -> f64 {
    -r.iter().copied().fold(f64::INFINITY, f64::min)
}

/// Row weights `1 + eta` for flagged rows and 1 otherwise. `batch` holds
/// `d`-length rows back to back.
pub fn tail_weights(batch: &[f64], d: usize, config: &TailConfig, threshold: f64) -> Vec<f64> {
    batch
        .chunks(d)
        .map(|row| {
            if config.eta != 0.0 && config.orientation.is_tail(worst_asset_loss(row), threshold) {
                1.0 + config.eta
            } else {
                1.0
            }
        })
        .collect()
}

/// Exponentially smoothed batch quantile of the worst-asset loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunningQuantile {
    pub value: Option<f64>,
}

impl RunningQuantile {
    pub fn new() -> Self {
        Self { value: None }
    }

    /// Folds in the batch quantile and returns the updated threshold.
    pub fn update(&mut self, losses: &[f64], config: &TailConfig) -> f64 {
        let batch_q = stats::quantile(losses, config.orientation.level(config.q));
        let next = match self.value {
            None => batch_q,
            Some(v) => config.quantile_ema * v + (1.0 - config.quantile_ema) * batch_q,
        };
        self.value = Some(next);
        next
    }
}

impl Default for RunningQuantile {
    fn default() -> Self {
        Self::new()
    }
}
