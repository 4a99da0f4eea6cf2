//! CVaR allocation: the Rockafellar-Uryasev epigraph program with budget,
//! box and ℓ1 turnover constraints, solved by an in-repo interior-point
//! method so that every multiplier is available for audit.

mod audit;
mod ipm;
mod qp;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use audit::{append_audit, kkt_audit, AuditRecord, DualSummary};
pub use qp::{build_epigraph_qp, EpigraphQp, LinearRow, RowFamily, VarLayout};

/// Termination tolerance on the max KKT residual.
pub const KKT_TOL: f64 = 1e-8;
pub const MAX_ITER: usize = 200;
/// Caps at or below this are treated as a frozen portfolio.
const FROZEN_TAU: f64 = 1e-10;

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AllocationProblem {
    pub mu_hat: DVector<f64>,
    pub sigma_hat: DMatrix<f64>,
    /// N×d, one scenario per row.
    pub scenarios: DMatrix<f64>,
    pub alpha: f64,
    pub lambda_mu: f64,
    pub gamma: f64,
    #[serde(with = "vec_sentinel")]
    pub lower: DVector<f64>,
    #[serde(with = "vec_sentinel")]
    pub upper: DVector<f64>,
    pub prev_weights: DVector<f64>,
    /// ℓ1 turnover cap; `f64::INFINITY` disables it.
    #[serde(with = "crate::serde_util::sentinel")]
    pub tau: f64,
    pub kappa: f64,
    /// Off for the ablation that drops the CVaR term (and ζ, u) entirely.
    #[serde(default = "default_true")]
    pub cvar_term: bool,
}

mod vec_sentinel {
    use nalgebra::DVector;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &DVector<f64>, s: S) -> Result<S::Ok, S::Error> {
        crate::serde_util::sentinel_vec::serialize(v.as_slice(), s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DVector<f64>, D::Error> {
        crate::serde_util::sentinel_vec::deserialize(d).map(DVector::from_vec)
    }
}

impl AllocationProblem {
    /// Long-only problem with α = 0.95, λ_μ = γ = 1, τ = 0.2, κ = 0.
    pub fn new(mu_hat: DVector<f64>, sigma_hat: DMatrix<f64>, scenarios: DMatrix<f64>, prev_weights: DVector<f64>) -> Self {
        let d = mu_hat.len();
        Self {
            mu_hat,
            sigma_hat,
            scenarios,
            alpha: 0.95,
            lambda_mu: 1.0,
            gamma: 1.0,
            lower: DVector::zeros(d),
            upper: DVector::from_element(d, 1.0),
            prev_weights,
            tau: 0.2,
            kappa: 0.0,
            cvar_term: true,
        }
    }

    pub fn d(&self) -> usize {
        self.mu_hat.len()
    }

    pub fn n_scenarios(&self) -> usize {
        self.scenarios.nrows()
    }

    /// 1/((1−α)N), the cap on each tail weight and the objective coefficient
    /// of every u_i.
    pub fn tail_cap(&self) -> f64 {
        1.0 / ((1.0 - self.alpha) * self.n_scenarios() as f64)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.d();
        if d == 0 {
            return Err(Error::Input("allocation needs at least one asset".into()));
        }
        if self.sigma_hat.shape() != (d, d)
            || self.lower.len() != d
            || self.upper.len() != d
            || self.prev_weights.len() != d
            || (self.cvar_term && self.scenarios.ncols() != d)
        {
            return Err(Error::Dimension(format!(
                "mu has {d} assets but sigma is {:?}, scenarios {:?}, bounds {}/{}, previous weights {}",
                self.sigma_hat.shape(),
                self.scenarios.shape(),
                self.lower.len(),
                self.upper.len(),
                self.prev_weights.len()
            )));
        }
        if self.cvar_term && self.n_scenarios() == 0 {
            return Err(Error::Input("CVaR term needs at least one scenario".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Input(format!("CVaR level {} outside (0, 1)", self.alpha)));
        }
        for (name, v) in [("lambda_mu", self.lambda_mu), ("gamma", self.gamma), ("kappa", self.kappa)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Input(format!("{name} must be finite and nonnegative, got {v}")));
            }
        }
        if self.tau.is_nan() || self.tau < 0.0 {
            return Err(Error::Input(format!("turnover cap must be nonnegative, got {}", self.tau)));
        }
        let finite = self.mu_hat.iter().chain(self.sigma_hat.iter()).chain(self.prev_weights.iter());
        if finite.clone().any(|v| !v.is_finite()) || (self.cvar_term && self.scenarios.iter().any(|v| !v.is_finite())) {
            return Err(Error::Input("allocation inputs contain NaN or infinite values".into()));
        }
        if (self.prev_weights.sum() - 1.0).abs() > 1e-8 {
            return Err(Error::Input(format!("previous weights sum to {}, not 1", self.prev_weights.sum())));
        }
        if self.lower.iter().any(|v| v.is_nan() || *v == f64::INFINITY)
            || self.upper.iter().any(|v| v.is_nan() || *v == f64::NEG_INFINITY)
        {
            return Err(Error::Input("box bounds must be numbers (use -inf/inf to disable)".into()));
        }
        if self.gamma > 0.0 {
            let sym = (&self.sigma_hat - self.sigma_hat.transpose()).amax();
            if sym > 1e-10 * (1.0 + self.sigma_hat.amax()) || self.sigma_hat.clone().cholesky().is_none() {
                return Err(Error::NotPositiveDefinite("allocator covariance".into()));
            }
        }
        Ok(())
    }

    /// Smallest ℓ1 move from the previous weights into box ∩ budget:
    /// clip into the box, then shift the budget gap.
    pub fn min_turnover(&self) -> f64 {
        let clipped: Vec<f64> = (0..self.d())
            .map(|j| self.prev_weights[j].clamp(self.lower[j], self.upper[j]))
            .collect();
        let moved: f64 = clipped.iter().zip(self.prev_weights.iter()).map(|(c, p)| (c - p).abs()).sum();
        moved + (1.0 - clipped.iter().sum::<f64>()).abs()
    }

    /// Certificate of infeasibility naming the constraint family that fails.
    pub fn check_feasible(&self) -> Result<()> {
        for j in 0..self.d() {
            if self.lower[j] > self.upper[j] {
                return Err(Error::Infeasible(format!(
                    "box: lower bound {} exceeds upper bound {} for asset {j}",
                    self.lower[j], self.upper[j]
                )));
            }
        }
        let lo: f64 = self.lower.sum();
        let hi: f64 = self.upper.sum();
        if lo > 1.0 + 1e-12 || hi < 1.0 - 1e-12 {
            return Err(Error::Infeasible(format!(
                "box/budget: bounds sum to [{lo}, {hi}], which excludes 1"
            )));
        }
        let need = self.min_turnover();
        if self.tau < need - 1e-12 {
            return Err(Error::Infeasible(format!(
                "turnover: reaching the box from the previous weights takes an l1 move of {need}, above the cap {}",
                self.tau
            )));
        }
        Ok(())
    }

    /// Per-scenario losses ℓ_i = −wᵀr_i.
    pub fn losses(&self, w: &DVector<f64>) -> Vec<f64> {
        (&self.scenarios * w).iter().map(|v| -v).collect()
    }

    /// Objective decomposition at `w`, with the CVaR term evaluated by
    /// [`cvar_empirical`] and the penalty on ‖w − w_prev‖₁.
    pub fn objective_at(&self, w: &DVector<f64>) -> ObjectiveTerms {
        let mean = -self.lambda_mu * self.mu_hat.dot(w);
        let variance = self.gamma * (w.transpose() * &self.sigma_hat * w)[(0, 0)];
        let cvar = if self.cvar_term { cvar_empirical(&self.losses(w), self.alpha).1 } else { 0.0 };
        let penalty = self.kappa * (w - &self.prev_weights).abs().sum();
        ObjectiveTerms::new(mean, variance, cvar, penalty)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Optimal,
    MaxIter,
    Infeasible,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub primal: f64,
    pub dual: f64,
    pub complementarity: f64,
}

impl KktResiduals {
    /// NaN if any residual is NaN.
    pub fn max(&self) -> f64 {
        let v = [self.stationarity, self.primal, self.dual, self.complementarity];
        if v.iter().any(|x| x.is_nan()) {
            return f64::NAN;
        }
        v.into_iter().fold(0.0, f64::max)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveTerms {
    pub mean: f64,
    pub variance: f64,
    pub cvar: f64,
    pub penalty: f64,
    pub total: f64,
}

impl ObjectiveTerms {
    fn new(mean: f64, variance: f64, cvar: f64, penalty: f64) -> Self {
        Self {
            mean,
            variance,
            cvar,
            penalty,
            total: mean + variance + cvar + penalty,
        }
    }
}

/// Multipliers under the Lagrangian f + ν(1ᵀw − 1) + Σ z·(g(x) − h).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Duals {
    pub nu: f64,
    pub box_lo: DVector<f64>,
    pub box_hi: DVector<f64>,
    pub turnover: f64,
    /// γ_i on the epigraph rows; they sum to 1 and are capped at 1/((1−α)N).
    pub tail: DVector<f64>,
    pub slack_nonneg: DVector<f64>,
    /// Multipliers of w − s⁺ + s⁻ = w_prev (empty without split variables).
    pub split: DVector<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AllocationResult {
    pub weights: DVector<f64>,
    /// VaR proxy ζ (0 when the CVaR term is off).
    pub zeta: f64,
    pub slacks: DVector<f64>,
    pub objective: f64,
    pub terms: ObjectiveTerms,
    pub duals: Duals,
    pub status: SolveStatus,
    pub kkt_residuals: KktResiduals,
    pub iterations: usize,
}

/// Rockafellar-Uryasev CVaR of an empirical loss sample. The minimizing ζ
/// is an order statistic; among optimal ones the smallest is returned.
/// Requires a nonempty sample and α in (0, 1).
pub fn cvar_empirical(losses: &[f64], alpha: f64) -> (f64, f64) {
    debug_assert!(!losses.is_empty() && alpha > 0.0 && alpha < 1.0);
    let n = losses.len();
    let k = 1.0 / ((1.0 - alpha) * n as f64);
    let mut sorted = losses.to_vec();
    sorted.sort_by(f64::total_cmp);
    // F(x_j) = x_j + k Σ_{i>j} (x_i − x_j), from suffix sums.
    let mut f = vec![0.0; n];
    let mut suffix = 0.0;
    for j in (0..n).rev() {
        let above = (n - 1 - j) as f64;
        f[j] = sorted[j] + k * (suffix - above * sorted[j]);
        suffix += sorted[j];
    }
    let best = f.iter().copied().fold(f64::INFINITY, f64::min);
    let slack = 1e-12 * (1.0 + best.abs());
    let j = f.iter().position(|&v| v <= best + slack).unwrap_or(0);
    let zeta = sorted[j];
    let excess: f64 = losses.iter().map(|&l| (l - zeta).max(0.0)).sum();
    (zeta, zeta + k * excess)
}

/// Move from `prev` toward `target`, scaled back onto the ℓ1 ball of radius
/// `tau` when the full move is too large.
pub fn project_partial_rebalance(target: &DVector<f64>, prev: &DVector<f64>, tau: f64) -> DVector<f64> {
    let diff = target - prev;
    let l1 = diff.abs().sum();
    if l1 <= tau {
        return target.clone();
    }
    prev + diff * (tau / l1)
}

/// Solve the allocation problem. Infeasible inputs are rejected with a
/// certificate; hitting the iteration limit is reported in `status`.
pub fn solve(problem: &AllocationProblem) -> Result<AllocationResult> {
    let qp = build_epigraph_qp(problem)?;
    if problem.tau <= FROZEN_TAU {
        return Ok(frozen(problem, &qp));
    }
    let out = ipm::solve(&qp, 0.1 * KKT_TOL, MAX_ITER)?;
    let mut z = out.z;
    // Interior-point multipliers never reach zero exactly; zero them on
    // clearly slack rows outside the tail block, whose sum is audited.
    for (r, row) in qp.inequalities.iter().enumerate() {
        if !matches!(row.family, RowFamily::Epigraph | RowFamily::SlackNonneg)
            && z[r] < 1e-9
            && row.rhs - row.eval(&out.x) > 1e-6
        {
            z[r] = 0.0;
        }
    }
    let res = qp.kkt_residuals(&out.x, &out.y, &z);
    let status = if res.max() <= KKT_TOL {
        SolveStatus::Optimal
    } else {
        SolveStatus::MaxIter
    };
    Ok(assemble(problem, &qp, &out.x, &out.y, &z, res, status, out.iterations))
}

/// τ ≈ 0: the only feasible point is the previous portfolio. Primal and dual
/// values are written down in closed form.
fn frozen(problem: &AllocationProblem, qp: &EpigraphQp) -> AllocationResult {
    let lay = &qp.layout;
    let d = problem.d();
    let w = problem.prev_weights.clone();
    let mut x = DVector::zeros(qp.n_vars());
    x.rows_mut(0, d).copy_from(&w);
    let mut z = DVector::zeros(qp.inequalities.len());
    let mut g = &qp.quad * &w;
    for j in 0..d {
        g[j] += qp.linear[j];
    }
    let mut tail = vec![0.0; lay.n_u];
    if let Some(zi) = lay.zeta() {
        let losses = problem.losses(&w);
        let (zeta, _) = cvar_empirical(&losses, problem.alpha);
        x[zi] = zeta;
        let cap = problem.tail_cap();
        let above = losses.iter().filter(|&&l| l > zeta).count();
        let ties = losses.iter().filter(|&&l| l == zeta).count();
        let rest = (1.0 - cap * above as f64).max(0.0) / ties.max(1) as f64;
        for (i, &l) in losses.iter().enumerate() {
            x[lay.u(i)] = (l - zeta).max(0.0);
            tail[i] = if l > zeta {
                cap
            } else if l == zeta {
                rest
            } else {
                0.0
            };
            for j in 0..d {
                g[j] -= tail[i] * problem.scenarios[(i, j)];
            }
        }
    }
    let gmax = g.max();
    let gmin = g.min();
    let nu = -(gmax + gmin) / 2.0;
    let lambda: DVector<f64> = g.map(|v| -v - nu);
    let rho = (lambda.amax() - problem.kappa).max(0.0);
    for (r, row) in qp.inequalities.iter().enumerate() {
        z[r] = match row.family {
            RowFamily::Epigraph => tail[row.index],
            RowFamily::SlackNonneg => problem.tail_cap() - tail[row.index],
            RowFamily::SplitNonneg if row.index < d => problem.kappa + rho - lambda[row.index],
            RowFamily::SplitNonneg => problem.kappa + rho + lambda[row.index - d],
            RowFamily::Turnover => rho,
            _ => 0.0,
        };
    }
    let mut y = DVector::zeros(qp.equalities.len());
    for (k, row) in qp.equalities.iter().enumerate() {
        y[k] = match row.family {
            RowFamily::Budget => nu,
            _ => lambda[row.index],
        };
    }
    let res = qp.kkt_residuals(&x, &y, &z);
    let status = if res.max() <= KKT_TOL {
        SolveStatus::Optimal
    } else {
        SolveStatus::MaxIter
    };
    assemble(problem, qp, &x, &y, &z, res, status, 0)
}

#[allow(clippy::too_many_arguments)]
fn assemble(
    problem: &AllocationProblem,
    qp: &EpigraphQp,
    x: &DVector<f64>,
    y: &DVector<f64>,
    z: &DVector<f64>,
    kkt_residuals: KktResiduals,
    status: SolveStatus,
    iterations: usize,
) -> AllocationResult {
    let lay = &qp.layout;
    let d = lay.d;
    let weights = x.rows(0, d).into_owned();
    let zeta = lay.zeta().map_or(0.0, |i| x[i]);
    let slacks = DVector::from_iterator(lay.n_u, (0..lay.n_u).map(|i| x[lay.u(i)]));
    let mut duals = Duals {
        nu: 0.0,
        box_lo: DVector::zeros(d),
        box_hi: DVector::zeros(d),
        turnover: 0.0,
        tail: DVector::zeros(lay.n_u),
        slack_nonneg: DVector::zeros(lay.n_u),
        split: DVector::zeros(if lay.has_splits { d } else { 0 }),
    };
    for (row, &v) in qp.equalities.iter().zip(y.iter()) {
        match row.family {
            RowFamily::Budget => duals.nu = v,
            _ => duals.split[row.index] = v,
        }
    }
    for (row, &v) in qp.inequalities.iter().zip(z.iter()) {
        match row.family {
            RowFamily::BoxLower => duals.box_lo[row.index] = v,
            RowFamily::BoxUpper => duals.box_hi[row.index] = v,
            RowFamily::Epigraph => duals.tail[row.index] = v,
            RowFamily::SlackNonneg => duals.slack_nonneg[row.index] = v,
            RowFamily::Turnover => duals.turnover = v,
            _ => {}
        }
    }
    let mean = -problem.lambda_mu * problem.mu_hat.dot(&weights);
    let variance = problem.gamma * (weights.transpose() * &problem.sigma_hat * &weights)[(0, 0)];
    let cvar = if lay.has_zeta {
        zeta + problem.tail_cap() * slacks.sum()
    } else {
        0.0
    };
    let penalty = if lay.has_splits {
        problem.kappa * (0..d).map(|j| x[lay.s_plus(j).unwrap()] + x[lay.s_minus(j).unwrap()]).sum::<f64>()
    } else {
        0.0
    };
    AllocationResult {
        weights,
        zeta,
        slacks,
        objective: qp.objective(x),
        terms: ObjectiveTerms::new(mean, variance, cvar, penalty),
        duals,
        status,
        kkt_residuals,
        iterations,
    }
}

#[cfg(test)]
mod tests;
