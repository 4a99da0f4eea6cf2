use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{AllocationProblem, KktResiduals};
use crate::error::Result;

/// Column positions of the epigraph program's variables, in the order
/// (w, ζ, u, s⁺, s⁻). ζ and u are absent when the CVaR term is switched off;
/// the split variables are absent when neither a turnover cap nor a penalty
/// needs them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarLayout {
    pub d: usize,
    pub n_u: usize,
    pub has_zeta: bool,
    pub has_splits: bool,
}

impl VarLayout {
    pub fn w(&self, j: usize) -> usize {
        j
    }

    pub fn zeta(&self) -> Option<usize> {
        self.has_zeta.then_some(self.d)
    }

    pub fn u_start(&self) -> usize {
        self.d + usize::from(self.has_zeta)
    }

    pub fn u(&self, i: usize) -> usize {
        self.u_start() + i
    }

    pub fn is_u(&self, v: usize) -> bool {
        v >= self.u_start() && v < self.u_start() + self.n_u
    }

    pub fn s_plus(&self, j: usize) -> Option<usize> {
        self.has_splits.then(|| self.u_start() + self.n_u + j)
    }

    pub fn s_minus(&self, j: usize) -> Option<usize> {
        self.has_splits.then(|| self.u_start() + self.n_u + self.d + j)
    }

    pub fn n_vars(&self) -> usize {
        self.u_start() + self.n_u + if self.has_splits { 2 * self.d } else { 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowFamily {
    Budget,
    /// w_j − s⁺_j + s⁻_j = w_prev,j
    Split,
    BoxLower,
    BoxUpper,
    /// −u_i ≤ 0
    SlackNonneg,
    /// −r_iᵀw − ζ − u_i ≤ 0
    Epigraph,
    /// −s⁺_j ≤ 0 (index j) or −s⁻_j ≤ 0 (index d + j)
    SplitNonneg,
    Turnover,
}

/// One sparse linear row: Σ coeff·x[var] (= or ≤) rhs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LinearRow {
    pub family: RowFamily,
    pub index: usize,
    pub coeffs: Vec<(usize, f64)>,
    pub rhs: f64,
}

impl LinearRow {
    pub fn eval(&self, x: &DVector<f64>) -> f64 {
        self.coeffs.iter().map(|&(v, a)| a * x[v]).sum()
    }
}

/// Standard-form description: minimize ½ wᵀQw + cᵀx subject to
/// `equalities` (= rhs) and `inequalities` (≤ rhs). Q acts on the w block only.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpigraphQp {
    pub layout: VarLayout,
    pub quad: DMatrix<f64>,
    pub linear: DVector<f64>,
    pub equalities: Vec<LinearRow>,
    pub inequalities: Vec<LinearRow>,
}

impl EpigraphQp {
    pub fn n_vars(&self) -> usize {
        self.layout.n_vars()
    }

    pub fn count(&self, family: RowFamily) -> usize {
        self.equalities
            .iter()
            .chain(&self.inequalities)
            .filter(|r| r.family == family)
            .count()
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        let d = self.layout.d;
        let w = x.rows(0, d);
        0.5 * (w.transpose() * &self.quad * w)[(0, 0)] + self.linear.dot(x)
    }

    /// Gradient of the objective.
    pub fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        let d = self.layout.d;
        let mut g = self.linear.clone();
        let qw = &self.quad * x.rows(0, d);
        for j in 0..d {
            g[j] += qw[j];
        }
        g
    }

    /// Max-norm KKT residuals of a primal-dual point, with the Lagrangian
    /// f + yᵀ(Ax − b) + zᵀ(Gx − h).
    pub fn kkt_residuals(&self, x: &DVector<f64>, y: &DVector<f64>, z: &DVector<f64>) -> KktResiduals {
        let mut grad = self.gradient(x);
        let mut primal = 0.0f64;
        for (row, &yk) in self.equalities.iter().zip(y.iter()) {
            for &(v, a) in &row.coeffs {
                grad[v] += yk * a;
            }
            primal = primal.max((row.eval(x) - row.rhs).abs());
        }
        let mut dual = 0.0f64;
        let mut comp = 0.0f64;
        for (row, &zr) in self.inequalities.iter().zip(z.iter()) {
            for &(v, a) in &row.coeffs {
                grad[v] += zr * a;
            }
            let slack = row.rhs - row.eval(x);
            primal = primal.max(-slack);
            dual = dual.max(-zr);
            comp = comp.max((zr * slack).abs());
        }
        KktResiduals {
            stationarity: grad.amax(),
            primal,
            dual,
            complementarity: comp,
        }
    }
}

/// Lay out the epigraph program for `problem`. Fails up front when the box,
/// budget and turnover constraints admit no point.
pub fn build_epigraph_qp(problem: &AllocationProblem) -> Result<EpigraphQp> {
    problem.validate()?;
    problem.check_feasible()?;
    let d = problem.d();
    let n = if problem.cvar_term { problem.n_scenarios() } else { 0 };
    let layout = VarLayout {
        d,
        n_u: n,
        has_zeta: problem.cvar_term,
        has_splits: problem.tau.is_finite() || problem.kappa > 0.0,
    };
    let nv = layout.n_vars();

    let quad = &problem.sigma_hat * (2.0 * problem.gamma);
    let mut linear = DVector::zeros(nv);
    for j in 0..d {
        linear[j] = -problem.lambda_mu * problem.mu_hat[j];
    }
    if let Some(z) = layout.zeta() {
        linear[z] = 1.0;
        let cap = problem.tail_cap();
        for i in 0..n {
            linear[layout.u(i)] = cap;
        }
    }
    if layout.has_splits && problem.kappa > 0.0 {
        for j in 0..d {
            linear[layout.s_plus(j).unwrap()] = problem.kappa;
            linear[layout.s_minus(j).unwrap()] = problem.kappa;
        }
    }

    let row = |family, index, coeffs, rhs| LinearRow {
        family,
        index,
        coeffs,
        rhs,
    };
    let mut eq = vec![row(RowFamily::Budget, 0, (0..d).map(|j| (j, 1.0)).collect(), 1.0)];
    if layout.has_splits {
        for j in 0..d {
            eq.push(row(
                RowFamily::Split,
                j,
                vec![(j, 1.0), (layout.s_plus(j).unwrap(), -1.0), (layout.s_minus(j).unwrap(), 1.0)],
                problem.prev_weights[j],
            ));
        }
    }

    let mut ineq = Vec::new();
    for j in 0..d {
        if problem.lower[j].is_finite() {
            ineq.push(row(RowFamily::BoxLower, j, vec![(j, -1.0)], -problem.lower[j]));
        }
    }
    for j in 0..d {
        if problem.upper[j].is_finite() {
            ineq.push(row(RowFamily::BoxUpper, j, vec![(j, 1.0)], problem.upper[j]));
        }
    }
    for i in 0..n {
        ineq.push(row(RowFamily::SlackNonneg, i, vec![(layout.u(i), -1.0)], 0.0));
    }
    if let Some(z) = layout.zeta() {
        for i in 0..n {
            let mut c: Vec<(usize, f64)> = (0..d).map(|j| (j, -problem.scenarios[(i, j)])).collect();
            c.push((z, -1.0));
            c.push((layout.u(i), -1.0));
            ineq.push(row(RowFamily::Epigraph, i, c, 0.0));
        }
    }
    if layout.has_splits {
        for k in 0..2 * d {
            let v = if k < d {
                layout.s_plus(k).unwrap()
            } else {
                layout.s_minus(k - d).unwrap()
            };
            ineq.push(row(RowFamily::SplitNonneg, k, vec![(v, -1.0)], 0.0));
        }
        if problem.tau.is_finite() {
            let c = (0..d)
                .flat_map(|j| [(layout.s_plus(j).unwrap(), 1.0), (layout.s_minus(j).unwrap(), 1.0)])
                .collect();
            ineq.push(row(RowFamily::Turnover, 0, c, problem.tau));
        }
    }

    Ok(EpigraphQp {
        layout,
        quad,
        linear,
        equalities: eq,
        inequalities: ineq,
    })
}
