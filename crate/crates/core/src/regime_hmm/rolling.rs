//! Walk-forward refits on a trailing window.

use rayon::prelude::*;

use super::em::{fit_em_traced, EmOptions};
use super::RegimeModel;
use crate::data_io::ReturnPanel;
use crate::error::{Error, Result};

/// A model fitted on the window ending at `index` (inclusive).
#[derive(Debug, Clone)]
pub struct RefitEntry {
    pub index: usize,
    pub date: String,
    pub model: RegimeModel,
}

/// Permutes `model`'s states to match `reference` by greedy nearest-mean
/// matching, so state labels stay stable across refits.
pub fn align_to(model: &RegimeModel, reference: &RegimeModel) -> RegimeModel {
    let k = model.k();
    if reference.k() != k {
        return model.clone();
    }
    let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(k * k);
    for (r, rm) in reference.means.iter().enumerate() {
        for (n, nm) in model.means.iter().enumerate() {
            pairs.push(((rm - nm).norm(), r, n));
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut perm = vec![usize::MAX; k];
    let mut used = vec![false; k];
    for (_, r, n) in pairs {
        if perm[r] == usize::MAX && !used[n] {
            perm[r] = n;
            used[n] = true;
        }
    }
    model.permuted(&perm)
}

/// Fits on `(t - window, t]` for refit dates `window - 1, window - 1 + stride, ...`.
///
/// Each fit only sees its own window; fits run in parallel and are then
/// label-aligned in date order.
pub fn rolling_refit(
    returns: &ReturnPanel,
    k: usize,
    window: usize,
    stride: usize,
    opts: EmOptions,
) -> Result<Vec<RefitEntry>> {
    if stride == 0 {
        return Err(Error::Input("refit stride must be at least 1".into()));
    }
    if window == 0 || window > returns.n_dates() {
        return Err(Error::Input(format!(
            "window of {window} rows exceeds the {} available",
            returns.n_dates()
        )));
    }
    let ends: Vec<usize> = (window - 1..returns.n_dates()).step_by(stride).collect();
    let fits: Vec<Result<RegimeModel>> = ends
        .par_iter()
        .map(|&end| {
            let win = returns.slice(end + 1 - window, end + 1);
            fit_em_traced(&win, k, opts)
                .map(|f| f.model)
                .map_err(|e| e.with_context(format!("refit at {}", returns.dates[end])))
        })
        .collect();
    let mut out: Vec<RefitEntry> = Vec::with_capacity(ends.len());
    for (end, fit) in ends.into_iter().zip(fits) {
        let mut model = fit?;
        if let Some(prev) = out.last() {
            model = align_to(&model, &prev.model);
        }
        out.push(RefitEntry {
            index: end,
            date: returns.dates[end].clone(),
            model,
        });
    }
    Ok(out)
}

/// Most recent refit at or before row `t`.
pub fn model_at(entries: &[RefitEntry], t: usize) -> Option<&RegimeModel> {
    let pos = entries.partition_point(|e| e.index <= t);
    if pos == 0 {
        None
    } else {
        Some(&entries[pos - 1].model)
    }
}
