use nalgebra::DMatrix;

use super::{GeneratorKind, ScenarioSet};
use crate::data_io::ReturnPanel;
use crate::error::{Error, Result};
use crate::regime_hmm::RegimeContext;
use crate::rng;

/// Stationary block bootstrap scenarios. The `n` scenarios are consecutive
/// draws of one resampled index path (geometric blocks of mean `block_len`,
/// wrap-around at the end of history); each scenario is a whole history row.
pub fn sbb_sample(returns: &ReturnPanel, block_len: usize, n: usize, seed: u64) -> Result<ScenarioSet> {
    let t = returns.n_dates();
    if t == 0 {
        return Err(Error::Input("block bootstrap needs a nonempty history".into()));
    }
    if block_len == 0 || n == 0 {
        return Err(Error::Input("block length and scenario count must be at least 1".into()));
    }
    let mut r = rng::seeded(seed);
    let idx = rng::stationary_bootstrap_indices(t, n, block_len as f64, &mut r);
    let scenarios = DMatrix::from_fn(n, returns.n_assets(), |i, j| returns.returns[(idx[i], j)]);
    Ok(ScenarioSet {
        scenarios,
        context: RegimeContext::zeros(0),
        generator: GeneratorKind::Sbb,
    })
}
