use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AllocationProblem, AllocationResult, KktResiduals, ObjectiveTerms, SolveStatus};
use crate::error::{Error, Result};

const ACTIVE_TOL: f64 = 1e-7;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DualSummary {
    pub nu: f64,
    pub turnover: f64,
    pub box_lo_max: f64,
    pub box_hi_max: f64,
    pub tail_sum: f64,
}

/// One audit-log entry per rebalance.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AuditRecord {
    pub date: String,
    pub active_lower: Vec<usize>,
    pub active_upper: Vec<usize>,
    pub turnover_binding: bool,
    pub turnover_used: f64,
    #[serde(with = "crate::serde_util::sentinel")]
    pub turnover_cap: f64,
    /// Multipliers of the epigraph rows, each in [0, tail_cap].
    pub tail_weights: Vec<f64>,
    pub tail_cap: f64,
    /// 1 − Σγ_i, which vanishes at a ζ-stationary point.
    pub zeta_stationarity_residual: f64,
    pub zeta_stationarity_ok: bool,
    pub n_tail_interior: usize,
    pub n_tail_at_cap: usize,
    /// Scenarios whose loss sits at ζ; interior weights can only live there.
    pub n_ties_at_zeta: usize,
    pub duals: DualSummary,
    pub iterations: usize,
    pub objective: ObjectiveTerms,
    pub kkt_residuals: KktResiduals,
}

impl AuditRecord {
    /// Capped-simplex structure of the tail weights: those strictly between
    /// 0 and the cap belong to scenarios tied at ζ (at least one allowed).
    pub fn tail_structure_ok(&self) -> bool {
        self.n_tail_interior <= self.n_ties_at_zeta.max(1)
    }
}

/// Build the audit record for an optimal solve.
pub fn kkt_audit(problem: &AllocationProblem, result: &AllocationResult, date: &str) -> Result<AuditRecord> {
    if result.status != SolveStatus::Optimal {
        return Err(Error::Input(format!(
            "audit needs an optimal solve, got status {:?}",
            result.status
        )));
    }
    let w = &result.weights;
    let d = problem.d();
    let active_lower = (0..d)
        .filter(|&j| problem.lower[j].is_finite() && w[j] - problem.lower[j] <= ACTIVE_TOL)
        .collect();
    let active_upper = (0..d)
        .filter(|&j| problem.upper[j].is_finite() && problem.upper[j] - w[j] <= ACTIVE_TOL)
        .collect();
    let used = (w - &problem.prev_weights).abs().sum();
    let tail: Vec<f64> = result.duals.tail.iter().copied().collect();
    let cap = if problem.cvar_term { problem.tail_cap() } else { 0.0 };
    let tail_sum: f64 = tail.iter().sum();
    let resid = if problem.cvar_term { 1.0 - tail_sum } else { 0.0 };
    // Interior-point duals approach the bounds only to about the solver
    // tolerance, so classification uses a relative band.
    let rel = 1e-4 * cap.max(f64::MIN_POSITIVE);
    let n_interior = tail.iter().filter(|&&g| g > rel && g < cap - rel).count();
    let n_cap = tail.iter().filter(|&&g| g >= cap - rel).count();
    let ties = if problem.cvar_term {
        problem
            .losses(w)
            .iter()
            .filter(|&&l| (l - result.zeta).abs() <= 1e-7 * (1.0 + result.zeta.abs()))
            .count()
    } else {
        0
    };
    Ok(AuditRecord {
        date: date.to_string(),
        active_lower,
        active_upper,
        turnover_binding: problem.tau.is_finite() && problem.tau - used <= ACTIVE_TOL,
        turnover_used: used,
        turnover_cap: problem.tau,
        tail_weights: tail,
        tail_cap: cap,
        zeta_stationarity_residual: resid,
        zeta_stationarity_ok: resid.abs() <= 1e-6,
        n_tail_interior: n_interior,
        n_tail_at_cap: n_cap,
        n_ties_at_zeta: ties,
        duals: DualSummary {
            nu: result.duals.nu,
            turnover: result.duals.turnover,
            box_lo_max: result.duals.box_lo.iter().copied().fold(0.0, f64::max),
            box_hi_max: result.duals.box_hi.iter().copied().fold(0.0, f64::max),
            tail_sum,
        },
        iterations: result.iterations,
        objective: result.terms,
        kkt_residuals: result.kkt_residuals,
    })
}

/// Append one JSON line to the audit log at `path`.
pub fn append_audit(path: &Path, record: &AuditRecord) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let line = serde_json::to_string(record)?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}
