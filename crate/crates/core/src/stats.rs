//! Small statistical helpers shared across modules.

use nalgebra::{DMatrix, DVector};

/// Column means of a rows-as-observations matrix.
pub fn column_means(x: &DMatrix<f64>) -> DVector<f64> {
    let n = x.nrows() as f64;
    // A constant column returns its value exactly, so identical rows give a
    // zero covariance rather than rounding residue.
    DVector::from_iterator(
        x.ncols(),
        x.column_iter().map(|c| match c.iter().next() {
            Some(&first) if c.iter().all(|&v| v == first) => first,
            _ => c.sum() / n,
        }),
    )
}

/// Sample mean and covariance (denominator `n - 1`) of the rows of `x`.
pub fn mean_cov(x: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.nrows();
    let d = x.ncols();
    let mu = column_means(x);
    let mut cov = DMatrix::zeros(d, d);
    if n < 2 {
        return (mu, cov);
    }
    for i in 0..n {
        for a in 0..d {
            let da = x[(i, a)] - mu[a];
            for b in a..d {
                cov[(a, b)] += da * (x[(i, b)] - mu[b]);
            }
        }
    }
    let denom = (n - 1) as f64;
    for a in 0..d {
        for b in a..d {
            let v = cov[(a, b)] / denom;
            cov[(a, b)] = v;
            cov[(b, a)] = v;
        }
    }
    (mu, cov)
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (denominator `n - 1`); 0 for fewer than 2 points.
pub fn std_dev(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 || xs.iter().all(|x| *x == xs[0]) {
        return 0.0;
    }
    let m = mean(xs);
    let ss: f64 = xs.iter().map(|x| (x - m) * (x - m)).sum();
    (ss / (n - 1) as f64).sqrt()
}

/// Linear-interpolation quantile (type 7) of unsorted data.
pub fn quantile(xs: &[f64], p: f64) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    quantile_sorted(&v, p)
}

pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    assert!(n > 0, "quantile of empty slice");
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let d = m.nrows();
    for a in 0..d {
        for b in (a + 1)..d {
            let v = 0.5 * (m[(a, b)] + m[(b, a)]);
            m[(a, b)] = v;
            m[(b, a)] = v;
        }
    }
}
