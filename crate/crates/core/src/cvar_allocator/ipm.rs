//! Mehrotra predictor-corrector interior-point method for the epigraph QP.
//!
//! The N slack variables u_i enter only their own sign row and their own
//! epigraph row, so their block of the Newton matrix is diagonal. It is
//! eliminated first and the remaining dense system has size
//! (#core variables + #equalities), independent of N.

use nalgebra::{DMatrix, DVector};

use super::qp::{EpigraphQp, RowFamily};
use crate::error::{Error, Result};

pub(crate) struct IpmOutput {
    pub x: DVector<f64>,
    pub y: DVector<f64>,
    /// Inequality multipliers in the row order of the description.
    pub z: DVector<f64>,
    pub iterations: usize,
}

/// The description split into core variables (everything except u) and the
/// arrow-structured u block. Inequalities are stored as core rows, then the
/// u sign rows, then the epigraph rows, each epigraph row i being
/// E_i·x_c − u_i ≤ h_e[i].
struct Structured {
    nc: usize,
    nu: usize,
    core_vars: Vec<usize>,
    u_vars: Vec<usize>,
    p: DMatrix<f64>,
    c: DVector<f64>,
    cu: Vec<f64>,
    a: DMatrix<f64>,
    b: DVector<f64>,
    g: DMatrix<f64>,
    h: Vec<f64>,
    e: DMatrix<f64>,
    /// Position in the description's inequality list for each structured row.
    order: Vec<usize>,
}

impl Structured {
    fn new(qp: &EpigraphQp) -> Result<Self> {
        let nv = qp.n_vars();
        let lay = &qp.layout;
        let mut core_of = vec![usize::MAX; nv];
        let mut core_vars = Vec::new();
        let mut u_vars = Vec::new();
        for v in 0..nv {
            if lay.is_u(v) {
                u_vars.push(v);
            } else {
                core_of[v] = core_vars.len();
                core_vars.push(v);
            }
        }
        let nc = core_vars.len();
        let nu = u_vars.len();
        let d = lay.d;

        let mut p = DMatrix::zeros(nc, nc);
        for i in 0..d {
            for j in 0..d {
                p[(core_of[i], core_of[j])] = qp.quad[(i, j)];
            }
        }
        let c = DVector::from_iterator(nc, core_vars.iter().map(|&v| qp.linear[v]));
        let cu = u_vars.iter().map(|&v| qp.linear[v]).collect();

        let me = qp.equalities.len();
        let mut a = DMatrix::zeros(me, nc);
        let mut b = DVector::zeros(me);
        for (k, row) in qp.equalities.iter().enumerate() {
            for &(v, coef) in &row.coeffs {
                if lay.is_u(v) {
                    return Err(Error::Numerical("equality row touches a tail slack".into()));
                }
                a[(k, core_of[v])] += coef;
            }
            b[k] = row.rhs;
        }

        let mut core_rows = Vec::new();
        let mut sign_rows = vec![usize::MAX; nu];
        let mut epi_rows = vec![usize::MAX; nu];
        let u_index = |v: usize| v - lay.u_start();
        for (r, row) in qp.inequalities.iter().enumerate() {
            let us: Vec<usize> = row.coeffs.iter().filter(|(v, _)| lay.is_u(*v)).map(|(v, _)| *v).collect();
            match (row.family, us.as_slice()) {
                (_, []) => core_rows.push(r),
                (RowFamily::SlackNonneg, [v]) => sign_rows[u_index(*v)] = r,
                (RowFamily::Epigraph, [v]) => epi_rows[u_index(*v)] = r,
                _ => return Err(Error::Numerical("unsupported inequality structure".into())),
            }
        }
        if sign_rows.iter().chain(&epi_rows).any(|&r| r == usize::MAX) {
            return Err(Error::Numerical("each tail slack needs a sign row and an epigraph row".into()));
        }

        let mc = core_rows.len();
        let mut g = DMatrix::zeros(mc, nc);
        let mut h = Vec::with_capacity(mc + 2 * nu);
        for (k, &r) in core_rows.iter().enumerate() {
            for &(v, coef) in &qp.inequalities[r].coeffs {
                g[(k, core_of[v])] += coef;
            }
            h.push(qp.inequalities[r].rhs);
        }
        for &r in &sign_rows {
            let row = &qp.inequalities[r];
            if row.coeffs.len() != 1 || row.coeffs[0].1 != -1.0 {
                return Err(Error::Numerical("tail slack sign row must be -u <= h".into()));
            }
            h.push(row.rhs);
        }
        let mut e = DMatrix::zeros(nu, nc);
        for (i, &r) in epi_rows.iter().enumerate() {
            let row = &qp.inequalities[r];
            for &(v, coef) in &row.coeffs {
                if lay.is_u(v) {
                    if coef != -1.0 {
                        return Err(Error::Numerical("epigraph row must carry -u".into()));
                    }
                } else {
                    e[(i, core_of[v])] += coef;
                }
            }
            h.push(row.rhs);
        }
        let order = core_rows.into_iter().chain(sign_rows).chain(epi_rows).collect();
        Ok(Self {
            nc,
            nu,
            core_vars,
            u_vars,
            p,
            c,
            cu,
            a,
            b,
            g,
            h,
            e,
            order,
        })
    }

    fn mc(&self) -> usize {
        self.g.nrows()
    }

    fn m(&self) -> usize {
        self.mc() + 2 * self.nu
    }

    /// G·(x_c, u) in structured row order.
    fn g_mul(&self, xc: &DVector<f64>, u: &[f64]) -> Vec<f64> {
        let mc = self.mc();
        let mut out = vec![0.0; self.m()];
        let gc = &self.g * xc;
        out[..mc].copy_from_slice(gc.as_slice());
        let ex = &self.e * xc;
        for i in 0..self.nu {
            out[mc + i] = -u[i];
            out[mc + self.nu + i] = ex[i] - u[i];
        }
        out
    }

    /// Gᵀ·v split into the core and u parts.
    fn gt_mul(&self, v: &[f64]) -> (DVector<f64>, Vec<f64>) {
        let mc = self.mc();
        let nu = self.nu;
        let vc = DVector::from_column_slice(&v[..mc]);
        let ve = DVector::from_column_slice(&v[mc + nu..]);
        let core = self.g.tr_mul(&vc) + self.e.tr_mul(&ve);
        let u = (0..nu).map(|i| -v[mc + i] - v[mc + nu + i]).collect();
        (core, u)
    }
}

/// Newton matrix for one weighting W = diag(z/s), with the u block
/// eliminated, factored once and reused by predictor and corrector.
struct Factored {
    lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    w_epi: Vec<f64>,
    diag_u: Vec<f64>,
}

impl Factored {
    fn new(st: &Structured, w: &[f64]) -> Result<Self> {
        let (nc, nu, mc) = (st.nc, st.nu, st.mc());
        let me = st.a.nrows();
        let w_sign = w[mc..mc + nu].to_vec();
        let w_epi = w[mc + nu..].to_vec();
        let diag_u: Vec<f64> = (0..nu).map(|i| w_sign[i] + w_epi[i]).collect();

        let mut h = st.p.clone();
        let mut wg = st.g.clone();
        for (k, mut row) in wg.row_iter_mut().enumerate() {
            row *= w[k];
        }
        h += st.g.tr_mul(&wg);
        let mut we = st.e.clone();
        for (i, mut row) in we.row_iter_mut().enumerate() {
            // W_E − W_E²/D, written in the form that stays accurate when one
            // of the two weights is huge.
            row *= w_epi[i] * w_sign[i] / diag_u[i];
        }
        h += st.e.tr_mul(&we);

        let n = nc + me;
        let build = |reg: f64| {
            let mut k = DMatrix::zeros(n, n);
            k.view_mut((0, 0), (nc, nc)).copy_from(&h);
            k.view_mut((nc, 0), (me, nc)).copy_from(&st.a);
            k.view_mut((0, nc), (nc, me)).copy_from(&st.a.transpose());
            for i in 0..nc {
                k[(i, i)] += reg;
            }
            for i in nc..n {
                k[(i, i)] -= reg;
            }
            k
        };
        let scale = 1.0 + h.diagonal().amax();
        for reg in [0.0, 1e-13 * scale, 1e-10 * scale] {
            let lu = build(reg).lu();
            if lu.is_invertible() {
                return Ok(Self {
                    lu,

                    w_epi,
                    diag_u,
                });
            }
        }
        Err(Error::Numerical("interior-point Newton system is singular".into()))
    }

    /// Solve [H Aᵀ; A 0](dx, dy) = (r_c, r_u, r_y) for the full (core, u) block.
    fn solve(&self, st: &Structured, rc: &DVector<f64>, ru: &[f64], ry: &DVector<f64>) -> Result<(DVector<f64>, Vec<f64>, DVector<f64>)> {
        let (nc, nu) = (st.nc, st.nu);
        let me = st.a.nrows();
        let coef = DVector::from_iterator(nu, (0..nu).map(|i| self.w_epi[i] * ru[i] / self.diag_u[i]));
        let red = rc + st.e.tr_mul(&coef);
        let mut rhs = DVector::zeros(nc + me);
        rhs.rows_mut(0, nc).copy_from(&red);
        rhs.rows_mut(nc, me).copy_from(ry);
        let sol = self
            .lu
            .solve(&rhs)
            .ok_or_else(|| Error::Numerical("interior-point Newton solve failed".into()))?;
        let dx = sol.rows(0, nc).into_owned();
        let dy = sol.rows(nc, me).into_owned();
        let ex = &st.e * &dx;
        let du = (0..nu).map(|i| (ru[i] + self.w_epi[i] * ex[i]) / self.diag_u[i]).collect();
        Ok((dx, du, dy))
    }
}

fn max_step(v: &[f64], dv: &[f64]) -> f64 {
    v.iter()
        .zip(dv)
        .filter(|(_, &d)| d < 0.0)
        .map(|(&x, &d)| -x / d)
        .fold(f64::INFINITY, f64::min)
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

struct Residuals {
    rd_c: DVector<f64>,
    rd_u: Vec<f64>,
    rp: DVector<f64>,
    ri: Vec<f64>,
}

/// Run the method until every KKT residual and every complementarity product
/// is at most `tol`, or `max_iter` iterations have been taken.
pub(crate) fn solve(qp: &EpigraphQp, tol: f64, max_iter: usize) -> Result<IpmOutput> {
    let st = Structured::new(qp)?;
    let (nc, nu, m) = (st.nc, st.nu, st.m());

    // Starting point: least-squares fit of Gx ≈ h inside the equalities, then
    // shift s and z into the positive orthant.
    let ones = vec![1.0; m];
    let f0 = Factored::new(&st, &ones)?;
    let (ghc, ghu) = st.gt_mul(&st.h);
    let rc = -&st.c + ghc;
    let ru: Vec<f64> = (0..nu).map(|i| -st.cu[i] + ghu[i]).collect();
    let (mut xc, mut u, mut y) = f0.solve(&st, &rc, &ru, &st.b)?;
    let gx = st.g_mul(&xc, &u);
    let mut s: Vec<f64> = (0..m).map(|r| st.h[r] - gx[r]).collect();
    let mut z: Vec<f64> = (0..m).map(|r| gx[r] - st.h[r]).collect();
    for v in [&mut s, &mut z] {
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        if m > 0 && lo <= 0.0 {
            for x in v.iter_mut() {
                *x += 1.0 - lo;
            }
        }
    }

    let residuals = |xc: &DVector<f64>, u: &[f64], y: &DVector<f64>, s: &[f64], z: &[f64]| {
        let gx = st.g_mul(xc, u);
        let (gtz_c, gtz_u) = st.gt_mul(z);
        Residuals {
            rd_c: &st.p * xc + &st.c + st.a.tr_mul(y) + gtz_c,
            rd_u: (0..nu).map(|i| st.cu[i] + gtz_u[i]).collect(),
            rp: &st.a * xc - &st.b,
            ri: (0..m).map(|r| gx[r] + s[r] - st.h[r]).collect(),
        }
    };

    let mut iterations = 0;
    let mut stalled = 0;
    let mut best = (f64::INFINITY, xc.clone(), u.clone(), y.clone(), z.clone());
    loop {
        let res = residuals(&xc, &u, &y, &s, &z);
        let comp = s.iter().zip(&z).fold(0.0f64, |a, (x, y)| a.max(x * y));
        let worst = res
            .rd_c
            .amax()
            .max(inf_norm(&res.rd_u))
            .max(res.rp.amax())
            .max(inf_norm(&res.ri))
            .max(comp);
        let nan = xc.iter().chain(&u).chain(y.iter()).chain(&s).chain(&z).any(|v| v.is_nan());
        let worst = if nan { f64::INFINITY } else { worst };
        if worst < best.0 {
            best = (worst, xc.clone(), u.clone(), y.clone(), z.clone());
        }
        if !best.0.is_finite() {
            return Err(Error::Numerical(format!("interior-point iterate diverged at iteration {iterations}")));
        }
        let mu = if m > 0 { s.iter().zip(&z).map(|(a, b)| a * b).sum::<f64>() / m as f64 } else { 0.0 };
        // Once complementarity is exhausted the Newton system is too badly
        // scaled to make progress on the remaining residuals.
        let exhausted = m > 0 && mu < 1e-16 * tol;
        if worst <= tol || iterations >= max_iter || stalled >= 5 || exhausted || worst > 1e6 * best.0.max(tol) {
            break;
        }
        iterations += 1;

        let w: Vec<f64> = (0..m).map(|r| z[r] / s[r]).collect();
        let fac = Factored::new(&st, &w)?;

        let newton = |rsz: &[f64]| -> Result<(DVector<f64>, Vec<f64>, DVector<f64>, Vec<f64>, Vec<f64>)> {
            let q: Vec<f64> = (0..m).map(|r| (z[r] * res.ri[r] - rsz[r]) / s[r]).collect();
            let (gq_c, gq_u) = st.gt_mul(&q);
            let rc = -&res.rd_c - gq_c;
            let ru: Vec<f64> = (0..nu).map(|i| -res.rd_u[i] - gq_u[i]).collect();
            let ry = -&res.rp;
            let (dx, du, dy) = fac.solve(&st, &rc, &ru, &ry)?;
            let gdx = st.g_mul(&dx, &du);
            let dz = (0..m).map(|r| q[r] + w[r] * gdx[r]).collect();
            let ds = (0..m).map(|r| -res.ri[r] - gdx[r]).collect();
            Ok((dx, du, dy, ds, dz))
        };

        let rsz: Vec<f64> = (0..m).map(|r| s[r] * z[r]).collect();
        let (_, _, _, ds_a, dz_a) = newton(&rsz)?;
        let a_aff = max_step(&s, &ds_a).min(max_step(&z, &dz_a)).min(1.0);
        let mu_aff = if m > 0 {
            (0..m).map(|r| (s[r] + a_aff * ds_a[r]) * (z[r] + a_aff * dz_a[r])).sum::<f64>() / m as f64
        } else {
            0.0
        };
        let sigma = if mu > 0.0 { (mu_aff / mu).clamp(0.0, 1.0).powi(3) } else { 0.0 };
        let rsz: Vec<f64> = (0..m).map(|r| s[r] * z[r] + ds_a[r] * dz_a[r] - sigma * mu).collect();
        let (dx, du, dy, ds, dz) = newton(&rsz)?;
        let step = (0.99 * max_step(&s, &ds).min(max_step(&z, &dz))).min(1.0);
        if step < 1e-12 {
            stalled += 1;
        }
        xc.axpy(step, &dx, 1.0);
        y.axpy(step, &dy, 1.0);
        for i in 0..nu {
            u[i] += step * du[i];
        }
        for r in 0..m {
            s[r] += step * ds[r];
            z[r] += step * dz[r];
        }
    }

    let (_, xc, u, y, z) = best;
    let mut x = DVector::zeros(qp.n_vars());
    for (k, &v) in st.core_vars.iter().enumerate() {
        x[v] = xc[k];
    }
    for (i, &v) in st.u_vars.iter().enumerate() {
        x[v] = u[i];
    }
    let mut zo = DVector::zeros(m);
    for (k, &r) in st.order.iter().enumerate() {
        zo[r] = z[k];
    }
    debug_assert_eq!(nc, st.core_vars.len());
    Ok(IpmOutput {
        x,
        y,
        z: zo,
        iterations,
    })
}
