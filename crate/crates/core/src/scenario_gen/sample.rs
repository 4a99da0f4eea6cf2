use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use super::network::{row_forward, DenoiserParams};
use super::schedule::NoiseSchedule;
use super::{GeneratorKind, ScenarioSet};
use crate::error::{Error, Result};
use crate::regime_hmm::RegimeContext;
use crate::rng;

/// Ancestral reverse sampling from step `S` down to 0. Scenario `i` draws all
/// of its noise from stream `i` of `seed`, so any prefix of scenarios is the
/// same whatever `n` is and however the work is split across threads.
pub fn sample(
    params: &DenoiserParams,
    schedule: &NoiseSchedule,
    z: &RegimeContext,
    n: usize,
    seed: u64,
) -> Result<ScenarioSet> {
    params.validate()?;
    if n == 0 {
        return Err(Error::Input("scenario count must be at least 1".into()));
    }
    if z.dim() != params.arch.z_dim {
        return Err(Error::Dimension(format!(
            "context has {} features, denoiser expects {}",
            z.dim(),
            params.arch.z_dim
        )));
    }
    let d = params.arch.d;
    let layout = params.layout();
    let zs = params.standardize_z(&z.z);
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::stream(seed, i as u64);
            let mut x: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut r)).collect();
            for s in (1..=schedule.steps).rev() {
                let eps = row_forward(&params.arch, &layout, &params.theta, &x, s, &zs, None).eps_hat;
                let ab = schedule.alpha_bar[s];
                let ab_prev = schedule.alpha_bar[s - 1];
                let beta = schedule.beta(s);
                let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
                let cx = schedule.alpha(s).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
                let sd = schedule.posterior_variance(s).sqrt();
                for j in 0..d {
                    let x0 = (x[j] - (1.0 - ab).sqrt() * eps[j]) / ab.sqrt();
                    x[j] = c0 * x0 + cx * x[j];
                }
                if s > 1 {
                    for v in x.iter_mut() {
                        let e: f64 = StandardNormal.sample(&mut r);
                        *v += sd * e;
                    }
                }
            }
            params.destandardize_x(&x)
        })
        .collect();
    let scenarios = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
    if scenarios.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("sampler produced non-finite scenarios".into()));
    }
    Ok(ScenarioSet {
        scenarios,
        context: z.clone(),
        generator: GeneratorKind::Diffusion,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario_gen::{cosine_schedule, train, Architecture, TailConfig, TrainConfig};
    use crate::stats;
    use nalgebra::DMatrix;

    fn zero_params() -> DenoiserParams {
        let arch = Architecture {
            d: 2,
            z_dim: 1,
            width: 4,
            depth: 2,
            emb_dim: 4,
            gate_width: 3,
        };
        let mut p = DenoiserParams::init(arch, 0).unwrap();
        p.theta.iter_mut().for_each(|v| *v = 0.0);
        p
    }

    #[test]
    fn prefix_is_independent_of_n() {
        let p = DenoiserParams::init(zero_params().arch, 4).unwrap();
        let sch = cosine_schedule(30).unwrap();
        let z = RegimeContext { z: vec![0.4] };
        let one = sample(&p, &sch, &z, 1, 17).unwrap();
        let many = sample(&p, &sch, &z, 1000, 17).unwrap();
        assert_eq!(one.scenarios.row(0), many.scenarios.row(0));
        let again = sample(&p, &sch, &z, 1000, 17).unwrap();
        assert_eq!(many, again);
        let other = sample(&p, &sch, &z, 1, 18).unwrap();
        assert_ne!(one.scenarios, other.scenarios);
    }

    #[test]
    fn zero_network_samples_are_centered() {
        let p = zero_params();
        let sch = cosine_schedule(50).unwrap();
        let set = sample(&p, &sch, &RegimeContext { z: vec![0.0] }, 4096, 5).unwrap();
        for j in 0..2 {
            let col: Vec<f64> = set.scenarios.column(j).iter().copied().collect();
            let se = stats::std_dev(&col) / (col.len() as f64).sqrt();
            assert!(stats::mean(&col).abs() < 5.0 * se, "asset {j}");
        }
    }

    #[test]
    fn rejects_bad_requests() {
        let p = zero_params();
        let sch = cosine_schedule(5).unwrap();
        assert!(sample(&p, &sch, &RegimeContext { z: vec![0.0] }, 0, 1).is_err());
        assert!(sample(&p, &sch, &RegimeContext::zeros(2), 3, 1).is_err());
    }

    /// Trains on a correlated 3-asset Gaussian and checks the sampled moments
    /// and lower quantiles against the generating distribution.
    #[test]
    fn recovers_a_gaussian() {
        let mu = [0.01, -0.005, -0.01];
        let l = DMatrix::from_row_slice(3, 3, &[0.010, 0.0, 0.0, 0.006, 0.008, 0.0, -0.003, 0.002, 0.012]);
        let sigma = &l * l.transpose();
        let mut r = rng::seeded(21);
        let n = 4000;
        let data = DMatrix::from_fn(n, 3, |_, _| -> f64 { StandardNormal.sample(&mut r) }) * l.transpose();
        let data = DMatrix::from_fn(n, 3, |i, j| data[(i, j)] + mu[j]);
        let ctx = vec![RegimeContext::zeros(0); n];
        let sch = cosine_schedule(50).unwrap();
        let cfg = TrainConfig {
            steps: 4000,
            batch_size: 128,
            learning_rate: 2e-3,
            width: 64,
            depth: 2,
            emb_dim: 16,
            gate_width: 4,
            ..Default::default()
        };
        let out = train(&data, &ctx, &sch, &TailConfig { eta: 0.0, ..Default::default() }, &cfg).unwrap();
        let set = sample(&out.params, &sch, &RegimeContext::zeros(0), 4000, 9).unwrap();
        let (m, c) = stats::mean_cov(&set.scenarios);
        let frob = (&c - &sigma).norm() / sigma.norm();
        assert!(frob <= 0.20, "covariance error {frob}");
        let mu_v = nalgebra::DVector::from_column_slice(&mu);
        assert!((&m - &mu_v).norm() <= 0.15 * mu_v.norm(), "mean {m} vs {mu_v}");
        let sd: Vec<f64> = (0..3).map(|j| sigma[(j, j)].sqrt()).collect();
        for j in 0..3 {
            let col: Vec<f64> = set.scenarios.column(j).iter().copied().collect();
            let q = stats::quantile(&col, 0.05);
            let truth = mu[j] - 1.6448536269514722 * sd[j];
            assert!(((q - truth) / truth).abs() < 0.25, "q05 {j}: {q} vs {truth}");
        }
    }
}
