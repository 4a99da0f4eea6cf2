//! Regime-conditioned diffusion scenarios, the block-bootstrap baseline and
//! the effective-sample-size diagnostic.

mod io;
mod network;
mod sample;
mod sbb;
mod schedule;
mod tail;
mod train;

use std::io::Write;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data_io::format_num;
use crate::error::{Error, Result};
use crate::regime_hmm::RegimeContext;

pub use io::{
    load_params, read_params, save_params, sidecar_path, write_params, ParamsSidecar, PARAMS_VERSION,
};
pub use network::{
    gate_monotonicity, moe_denoise, moe_denoise_with_gate, time_embedding, Architecture,
    DenoiserParams,
};
pub use sample::sample;
pub use sbb::sbb_sample;
pub use schedule::{cosine_schedule, forward_noise, NoiseSchedule};
pub use tail::{tail_weights, worst_asset_loss, RunningQuantile, TailOrientation};
pub use train::{
    denoising_loss, denoising_loss_grad, train, TrainBatch, TrainConfig, TrainOutput, Trainer,
    TrainerCheckpoint,
};

/// Tail up-weighting of the denoising loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TailConfig {
    /// Fraction of outcomes treated as tail.
    pub q: f64,
    /// Extra weight on tail rows; 0 disables reweighting.
    pub eta: f64,
    /// Smoothing factor of the running threshold estimate.
    pub quantile_ema: f64,
    pub orientation: TailOrientation,
    /// Fixed trigger in place of the running estimate.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fixed_threshold: Option<f64>,
}

impl Default for TailConfig {
    fn default() -> Self {
        Self {
            q: 0.05,
            eta: 2.0,
            quantile_ema: 0.99,
            orientation: TailOrientation::Adverse,
            fixed_threshold: None,
        }
    }
}

impl TailConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.q > 0.0 && self.q < 0.5) {
            return Err(Error::Config(format!("tail q must be in (0, 0.5), got {}", self.q)));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::Config(format!("tail eta must be >= 0, got {}", self.eta)));
        }
        if !(0.0..1.0).contains(&self.quantile_ema) {
            return Err(Error::Config("quantile_ema must be in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn tag(&self) -> &'static str {
        if self.eta > 0.0 {
            "tail-weighted"
        } else {
            "unweighted"
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeneratorKind {
    Diffusion,
    Sbb,
}

/// `N` next-period return scenarios (rows) for one decision date.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSet {
    pub scenarios: DMatrix<f64>,
    pub context: RegimeContext,
    pub generator: GeneratorKind,
}

impl ScenarioSet {
    pub fn n(&self) -> usize {
        self.scenarios.nrows()
    }

    pub fn d(&self) -> usize {
        self.scenarios.ncols()
    }

    /// `scenario_id,<asset>...` rows.
    pub fn write_csv<W: Write>(&self, assets: &[String], writer: W) -> Result<()> {
        if assets.len() != self.d() {
            return Err(Error::Dimension(format!(
                "{} asset names for {} columns",
                assets.len(),
                self.d()
            )));
        }
        let mut wtr = csv::Writer::from_writer(writer);
        let mut header = vec!["scenario_id".to_string()];
        header.extend(assets.iter().cloned());
        wtr.write_record(&header)?;
        for i in 0..self.n() {
            let mut rec = vec![i.to_string()];
            rec.extend(self.scenarios.row(i).iter().map(|v| format_num(*v)));
            wtr.write_record(&rec)?;
        }
        wtr.flush().map_err(|e| Error::io("<csv writer>", e))?;
        Ok(())
    }
}

/// Effective sample size of `N` draws when a `q` fraction carries weight
/// `1 + eta` and the rest weight 1.
pub fn ess(q: f64, eta: f64, n: usize) -> f64 {
    // Written as (sum w)^2 / sum w^2 with q N rows at weight 1 + eta.
    let n = n as f64;
    let k = q * n;
    let s = n + eta * k;
    s * s / (n + (2.0 * eta + eta * eta) * k)
}

/// `(sum w)^2 / sum w^2`.
pub fn empirical_ess(weights: &[f64]) -> f64 {
    let s: f64 = weights.iter().sum();
    let s2: f64 = weights.iter().map(|w| w * w).sum();
    if s2 == 0.0 {
        0.0
    } else {
        s * s / s2
    }
}
