//! Run configuration: one TOML document covering every stage.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baselines::BaselineSpec;
use crate::error::{Error, Result};
use crate::moments::Shrinkage;
use crate::regime_hmm::{ContextSpec, EmOptions};
use crate::scenario_gen::{TailConfig, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Price CSV (`date,asset_1..`), converted to simple returns.
    pub prices: Option<String>,
    /// Return CSV, used as-is.
    pub returns: Option<String>,
}

/// Inclusive end dates of the train and validation splits; the test split
/// runs from the row after `val_end` to `test_end` (or the last row).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct Splits {
    pub train_end: String,
    pub val_end: String,
    pub test_end: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HmmConfig {
    pub states: usize,
    /// Rolling fit window in rows.
    pub window: usize,
    /// Rows between refits during the backtest.
    pub stride: usize,
    pub max_iter: usize,
    pub tol: f64,
    pub seed: u64,
    /// Candidate state counts for the BIC table.
    pub k_list: Vec<usize>,
}

impl Default for HmmConfig {
    fn default() -> Self {
        Self {
            states: 3,
            window: 756,
            stride: 21,
            max_iter: 500,
            tol: 1e-6,
            seed: 2020,
            k_list: vec![1, 2, 3, 4],
        }
    }
}

impl HmmConfig {
    pub fn em_options(&self) -> EmOptions {
        EmOptions {
            max_iter: self.max_iter,
            tol: self.tol,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    /// Diffusion steps S.
    pub schedule_steps: usize,
    pub n_scenarios: usize,
    pub sbb_block: usize,
    pub tail: TailConfig,
    pub train: TrainConfig,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            schedule_steps: 200,
            n_scenarios: 1024,
            sbb_block: 20,
            tail: TailConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SignalConfig {
    /// Weight on scenario moments in the blend.
    pub lambda: f64,
    pub hist_window: usize,
    pub shrinkage: Shrinkage,
}

impl Default for SignalConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            hist_window: 756,
            shrinkage: Shrinkage::Auto,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AllocatorConfig {
    pub alpha: f64,
    pub lambda_mu: f64,
    pub gamma: f64,
    /// ℓ1 turnover cap per rebalance; "inf" disables it.
    #[serde(with = "crate::serde_util::sentinel")]
    pub tau: f64,
    pub kappa: f64,
    pub lower: f64,
    pub upper: f64,
}

impl Default for AllocatorConfig {
    fn default() -> Self {
        Self {
            alpha: 0.95,
            lambda_mu: 1.0,
            gamma: 1.0,
            tau: 0.2,
            kappa: 0.0,
            lower: 0.0,
            upper: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cadence {
    /// Last trading day of each calendar month.
    Monthly,
    /// Every n-th row of the test split.
    Every(usize),
}

/// A labeled RC-CVaR run with some settings overridden. Used both for
/// ablations and for sensitivity sweeps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct Variant {
    pub label: String,
    /// false drops the CVaR block and keeps mean-variance.
    pub cvar_term: Option<bool>,
    /// Condition the generator on an all-zero context.
    pub zero_context: bool,
    pub lambda: Option<f64>,
    pub gamma: Option<f64>,
    pub alpha: Option<f64>,
    pub kappa: Option<f64>,
    #[serde(default, with = "opt_sentinel")]
    pub tau: Option<f64>,
}

mod opt_sentinel {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    struct W(#[serde(with = "crate::serde_util::sentinel")] f64);

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(x) => W(*x).serialize(s),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        Ok(Option::<W>::deserialize(d)?.map(|w| w.0))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BacktestConfig {
    pub cadence: Cadence,
    pub cost_bps: f64,
    /// Any of "RC-CVaR", "SBB", "EW", "RP", "BL".
    pub strategies: Vec<String>,
    pub ablation: Vec<Variant>,
    pub sweep: Vec<Variant>,
    /// Seed for scenario sampling.
    pub seed: u64,
}

impl Default for BacktestConfig {
    fn default() -> Self {
        Self {
            cadence: Cadence::Monthly,
            cost_bps: 10.0,
            strategies: ["RC-CVaR", "SBB", "EW", "RP", "BL"].map(String::from).to_vec(),
            ablation: Vec::new(),
            sweep: Vec::new(),
            seed: 11,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BootstrapConfig {
    pub replications: usize,
    pub block: usize,
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            replications: 1000,
            block: 20,
            seed: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnosticsConfig {
    pub variogram_p: f64,
    pub ljung_box_lags: usize,
    pub bootstrap: BootstrapConfig,
    /// Strategy the others are compared against in the Sharpe bootstrap.
    pub reference: String,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self {
            variogram_p: 0.5,
            ljung_box_lags: 10,
            bootstrap: BootstrapConfig::default(),
            reference: "RC-CVaR".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub splits: Splits,
    pub hmm: HmmConfig,
    pub context: ContextSpec,
    pub generator: GeneratorConfig,
    pub signals: SignalConfig,
    pub allocator: AllocatorConfig,
    pub baselines: BaselineSpec,
    pub backtest: BacktestConfig,
    pub diagnostics: DiagnosticsConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| e.with_context(format!("config {}", path.display())))
    }

    /// The configuration with every default filled in.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.hmm.states == 0 || self.hmm.window < 2 || self.hmm.stride == 0 {
            return bad("hmm states, window and stride must be positive".into());
        }
        if self.hmm.k_list.contains(&0) {
            return bad("hmm k_list entries must be at least 1".into());
        }
        if self.generator.schedule_steps < 2 || self.generator.n_scenarios < 2 || self.generator.sbb_block == 0 {
            return bad("generator needs schedule_steps >= 2, n_scenarios >= 2, sbb_block >= 1".into());
        }
        self.generator.tail.validate()?;
        self.generator.train.validate()?;
        if !(0.0..=1.0).contains(&self.signals.lambda) || self.signals.hist_window < 2 {
            return bad("signals.lambda must be in [0, 1] and hist_window >= 2".into());
        }
        if let Shrinkage::Fixed(d) = self.signals.shrinkage {
            if !(0.0..=1.0).contains(&d) {
                return bad(format!("fixed shrinkage {d} outside [0, 1]"));
            }
        }
        let a = &self.allocator;
        if !(a.alpha > 0.0 && a.alpha < 1.0) || a.lambda_mu < 0.0 || a.gamma < 0.0 || a.kappa < 0.0 || !(a.tau >= 0.0) {
            return bad("allocator: alpha in (0,1); lambda_mu, gamma, kappa, tau >= 0".into());
        }
        if a.lower > a.upper {
            return bad("allocator.lower exceeds allocator.upper".into());
        }
        self.baselines.validate()?;
        if !(self.backtest.cost_bps >= 0.0) {
            return bad("backtest.cost_bps must be >= 0".into());
        }
        if let Cadence::Every(0) = self.backtest.cadence {
            return bad("cadence every must be at least 1".into());
        }
        for s in &self.backtest.strategies {
            if !["RC-CVaR", "SBB", "EW", "RP", "BL"].contains(&s.as_str()) {
                return bad(format!("unknown strategy '{s}'"));
            }
        }
        let mut labels: Vec<&str> = self.backtest.strategies.iter().map(String::as_str).collect();
        for v in self.backtest.ablation.iter().chain(&self.backtest.sweep) {
            if v.label.is_empty() {
                return bad("every ablation/sweep entry needs a label".into());
            }
            if labels.contains(&v.label.as_str()) {
                return bad(format!("duplicate strategy label '{}'", v.label));
            }
            labels.push(&v.label);
            if v.lambda.is_some_and(|l| !(0.0..=1.0).contains(&l)) {
                return bad(format!("variant '{}': lambda outside [0, 1]", v.label));
            }
        }
        if self.diagnostics.variogram_p <= 0.0 || self.diagnostics.ljung_box_lags == 0 {
            return bad("diagnostics: variogram_p > 0 and ljung_box_lags >= 1".into());
        }
        if self.diagnostics.bootstrap.replications == 0 || self.diagnostics.bootstrap.block == 0 {
            return bad("bootstrap replications and block must be positive".into());
        }
        Ok(())
    }
}
