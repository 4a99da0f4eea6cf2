use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const COSINE_OFFSET: f64 = 0.008;
const MIN_ALPHA_BAR: f64 = 1e-5;

/// Cumulative signal fractions `alpha_bar[0..=S]` of a variance-preserving
/// diffusion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub steps: usize,
    pub alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Per-step signal fraction `alpha_bar[s] / alpha_bar[s-1]`.
    pub fn alpha(&self, s: usize) -> f64 {
        self.alpha_bar[s] / self.alpha_bar[s - 1]
    }

    pub fn beta(&self, s: usize) -> f64 {
        1.0 - self.alpha(s)
    }

    /// Variance of the reverse-process posterior `q(x_{s-1} | x_s, x_0)`.
    pub fn posterior_variance(&self, s: usize) -> f64 {
        (1.0 - self.alpha_bar[s - 1]) / (1.0 - self.alpha_bar[s]) * self.beta(s)
    }
}

fn cosine_f(s: usize, steps: usize) -> f64 {
    let t = (s as f64 / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
    (t * std::f64::consts::FRAC_PI_2).cos().powi(2)
}

/// Cosine schedule normalized to `alpha_bar[0] = 1` and floored at 1e-5.
/// The floor ramps as `1e-5 * (1 + S - s)` so the tail stays strictly
/// decreasing when several steps would otherwise clip to the same value.
pub fn cosine_schedule(steps: usize) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(Error::Config(format!("diffusion needs at least 2 steps, got {steps}")));
    }
    let f0 = cosine_f(0, steps);
    let alpha_bar = (0..=steps)
        .map(|s| {
            if s == 0 {
                1.0
            } else {
                let floor = MIN_ALPHA_BAR * (1 + steps - s) as f64;
                (cosine_f(s, steps) / f0).clamp(floor, 1.0)
            }
        })
        .collect();
    Ok(NoiseSchedule { steps, alpha_bar })
}

/// `sqrt(alpha_bar[s]) x0 + sqrt(1 - alpha_bar[s]) eps`.
pub fn forward_noise(x0: &[f64], s: usize, eps: &[f64], schedule: &NoiseSchedule) -> Vec<f64> {
    let ab = schedule.alpha_bar[s];
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_and_monotonicity() {
        for steps in [2, 3, 50, 200, 1000] {
            let sch = cosine_schedule(steps).unwrap();
            assert_eq!(sch.alpha_bar.len(), steps + 1);
            assert_eq!(sch.alpha_bar[0], 1.0);
            assert!(sch.alpha_bar.windows(2).all(|w| w[1] < w[0]), "S={steps}");
            assert!(sch.alpha_bar[steps] < 1e-3);
            assert_eq!(sch.alpha_bar[steps], 1e-5);
            assert!(sch.alpha_bar.iter().all(|&a| a >= 1e-5));
        }
        assert!(cosine_schedule(1).is_err());
    }

    #[test]
    fn matches_unclipped_cosine_away_from_the_end() {
        // Direct evaluation of the normalized cosine; the floor only bites in
        // the last few steps.
        let steps = 1000;
        let sch = cosine_schedule(steps).unwrap();
        let half = std::f64::consts::FRAC_PI_2;
        let f = |s: f64| (((s / steps as f64 + 0.008) / 1.008) * half).cos().powi(2);
        for s in [1usize, 10, 250, 500, 900] {
            let direct = f(s as f64) / f(0.0);
            assert!((sch.alpha_bar[s] - direct).abs() < 1e-12 * direct.max(1e-3), "s={s}");
        }
    }

    #[test]
    fn forward_noise_cases() {
        let sch = cosine_schedule(10).unwrap();
        let x0 = [0.3, -1.2];
        let eps = [0.5, 2.0];
        assert_eq!(forward_noise(&x0, 0, &eps, &sch), x0.to_vec());
        let z = forward_noise(&[0.0, 0.0], 4, &eps, &sch);
        let b = (1.0 - sch.alpha_bar[4]).sqrt();
        assert_eq!(z, vec![b * 0.5, b * 2.0]);
        let y = forward_noise(&x0, 7, &eps, &sch);
        let ab = sch.alpha_bar[7];
        for j in 0..2 {
            let hand = ab.sqrt() * x0[j] + (1.0 - ab).sqrt() * eps[j];
            assert!((y[j] - hand).abs() < 1e-15);
        }
    }

    #[test]
    fn posterior_variance_is_below_beta() {
        let sch = cosine_schedule(20).unwrap();
        for s in 2..=20 {
            let v = sch.posterior_variance(s);
            assert!(v > 0.0 && v <= sch.beta(s));
        }
        assert_eq!(sch.posterior_variance(1), 0.0);
    }
}
