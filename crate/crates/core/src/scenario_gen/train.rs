//! Tail-weighted denoising objective and the AdamW/EMA training loop.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::network::{row_backward, row_forward, Architecture, DenoiserParams};
use super::schedule::NoiseSchedule;
use super::tail::{tail_weights, worst_asset_loss, RunningQuantile};
use super::TailConfig;
use crate::error::{Error, Result};
use crate::regime_hmm::RegimeContext;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip.
    pub clip_norm: f64,
    pub ema_decay: f64,
    pub seed: u64,
    pub width: usize,
    pub depth: usize,
    pub emb_dim: usize,
    pub gate_width: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch_size: 256,
            learning_rate: 1e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: 1.0,
            ema_decay: 0.999,
            seed: 7,
            width: 128,
            depth: 4,
            emb_dim: 16,
            gate_width: 32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        let positive = [self.learning_rate, self.adam_eps, self.clip_norm];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Config("learning_rate, adam_eps and clip_norm must be positive".into()));
        }
        let unit = [self.beta1, self.beta2, self.ema_decay];
        if unit.iter().any(|v| !(0.0..1.0).contains(v)) || self.weight_decay < 0.0 {
            return Err(Error::Config("betas and ema_decay must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn architecture(&self, d: usize, z_dim: usize) -> Architecture {
        Architecture {
            d,
            z_dim,
            width: self.width,
            depth: self.depth,
            emb_dim: self.emb_dim,
            gate_width: self.gate_width,
        }
    }
}

/// One minibatch in working scale: noised inputs, their steps, standardized
/// contexts, the injected noise and per-row loss weights.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainBatch {
    pub x_noisy: Vec<f64>,
    pub steps: Vec<usize>,
    pub z: Vec<f64>,
    pub eps: Vec<f64>,
    pub weights: Vec<f64>,
}

impl TrainBatch {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// `sum_b w_b ||eps_b - eps_hat_b||^2 / (B d)`.
pub fn denoising_loss(params: &DenoiserParams, batch: &TrainBatch) -> f64 {
    loss_impl(params, batch, None)
}

/// Loss and its gradient with respect to `params.theta`; `grad` is overwritten.
pub fn denoising_loss_grad(params: &DenoiserParams, batch: &TrainBatch, grad: &mut [f64]) -> f64 {
    loss_impl(params, batch, Some(grad))
}

fn loss_impl(params: &DenoiserParams, batch: &TrainBatch, mut grad: Option<&mut [f64]>) -> f64 {
    let arch = &params.arch;
    let (d, m) = (arch.d, arch.z_dim);
    let layout = params.layout();
    let denom = (batch.len() * d) as f64;
    if let Some(g) = grad.as_deref_mut() {
        g.iter_mut().for_each(|v| *v = 0.0);
    }
    let mut total = 0.0;
    for b in 0..batch.len() {
        let x = &batch.x_noisy[b * d..(b + 1) * d];
        let z = &batch.z[b * m..(b + 1) * m];
        let eps = &batch.eps[b * d..(b + 1) * d];
        let trace = row_forward(arch, &layout, &params.theta, x, batch.steps[b], z, None);
        let mut sq = 0.0;
        for (e, h) in eps.iter().zip(&trace.eps_hat) {
            sq += (e - h) * (e - h);
        }
        let w = batch.weights[b];
        total += w * sq;
        if let Some(g) = grad.as_deref_mut() {
            let deps: Vec<f64> = eps
                .iter()
                .zip(&trace.eps_hat)
                .map(|(e, h)| -2.0 * w * (e - h) / denom)
                .collect();
            row_backward(&layout, &params.theta, g, &trace, &deps);
        }
    }
    total / denom
}

/// Resumable trainer state.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainerCheckpoint {
    pub step: usize,
    pub theta: Vec<f64>,
    pub ema: Vec<f64>,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub rng_word_pos: u128,
    pub threshold: Option<f64>,
    pub losses: Vec<f64>,
    pub flagged: u64,
    pub seen: u64,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    /// EMA parameters, used for sampling.
    pub params: DenoiserParams,
    /// Raw optimizer iterate at the last step.
    pub last: DenoiserParams,
    pub losses: Vec<f64>,
    /// Fraction of training rows that received the tail weight.
    pub flagged_fraction: f64,
}

pub struct Trainer {
    config: TrainConfig,
    schedule: NoiseSchedule,
    tail: TailConfig,
    n_rows: usize,
    raw: Vec<f64>,
    x_std: Vec<f64>,
    z_std: Vec<f64>,
    params: DenoiserParams,
    ema: Vec<f64>,
    m: Vec<f64>,
    v: Vec<f64>,
    step: usize,
    rng: ChaCha8Rng,
    threshold: RunningQuantile,
    losses: Vec<f64>,
    flagged: u64,
    seen: u64,
    grad: Vec<f64>,
}

fn column_standardizer(values: &[f64], n: usize, k: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; k];
    let mut scale = vec![1.0; k];
    if n == 0 {
        return (mean, scale);
    }
    for j in 0..k {
        let col: Vec<f64> = (0..n).map(|i| values[i * k + j]).collect();
        mean[j] = crate::stats::mean(&col);
        let sd = crate::stats::std_dev(&col);
        if sd > 1e-12 {
            scale[j] = sd;
        }
    }
    (mean, scale)
}

impl Trainer {
    /// `data` holds training targets row by row (T x d); `contexts[i]`
    /// conditions row `i`.
    pub fn new(
        data: &nalgebra::DMatrix<f64>,
        contexts: &[RegimeContext],
        schedule: &NoiseSchedule,
        tail: &TailConfig,
        config: &TrainConfig,
    ) -> Result<Self> {
        config.validate()?;
        tail.validate()?;
        let (n, d) = (data.nrows(), data.ncols());
        if n == 0 || d == 0 {
            return Err(Error::Input("no training rows".into()));
        }
        if contexts.len() != n {
            return Err(Error::Dimension(format!(
                "{} training rows but {} contexts",
                n,
                contexts.len()
            )));
        }
        let m = contexts[0].dim();
        if contexts.iter().any(|c| c.dim() != m) {
            return Err(Error::Dimension("contexts differ in length".into()));
        }
        if data.iter().chain(contexts.iter().flat_map(|c| c.z.iter())).any(|v| !v.is_finite()) {
            return Err(Error::Input("non-finite training data".into()));
        }
        let raw: Vec<f64> = (0..n).flat_map(|i| data.row(i).iter().copied().collect::<Vec<_>>()).collect();
        let zflat: Vec<f64> = contexts.iter().flat_map(|c| c.z.iter().copied()).collect();
        let mut params = DenoiserParams::init(config.architecture(d, m), rng::mix_seed(config.seed, 1))?;
        let (xm, xs) = column_standardizer(&raw, n, d);
        let (zm, zs) = column_standardizer(&zflat, n, m);
        params.x_mean = xm;
        params.x_scale = xs;
        params.z_mean = zm;
        params.z_scale = zs;
        let x_std: Vec<f64> = raw.chunks(d).flat_map(|r| params.standardize_x(r)).collect();
        let z_std: Vec<f64> = if m == 0 {
            Vec::new()
        } else {
            zflat.chunks(m).flat_map(|r| params.standardize_z(r)).collect()
        };
        let p = params.n_params();
        Ok(Self {
            config: config.clone(),
            schedule: schedule.clone(),
            tail: *tail,
            n_rows: n,
            raw,
            x_std,
            z_std,
            ema: params.theta.clone(),
            params,
            m: vec![0.0; p],
            v: vec![0.0; p],
            step: 0,
            rng: rng::seeded(rng::mix_seed(config.seed, 2)),
            threshold: RunningQuantile::new(),
            losses: Vec::new(),
            flagged: 0,
            seen: 0,
            grad: vec![0.0; p],
        })
    }

    /// Rebuilds a trainer from a checkpoint taken on the same data and config.
    pub fn resume(
        data: &nalgebra::DMatrix<f64>,
        contexts: &[RegimeContext],
        schedule: &NoiseSchedule,
        tail: &TailConfig,
        config: &TrainConfig,
        ckpt: &TrainerCheckpoint,
    ) -> Result<Self> {
        let mut t = Self::new(data, contexts, schedule, tail, config)?;
        let p = t.params.n_params();
        if [ckpt.theta.len(), ckpt.ema.len(), ckpt.m.len(), ckpt.v.len()]
            .iter()
            .any(|l| *l != p)
        {
            return Err(Error::Input("checkpoint does not match the configured network".into()));
        }
        t.params.theta = ckpt.theta.clone();
        t.ema = ckpt.ema.clone();
        t.m = ckpt.m.clone();
        t.v = ckpt.v.clone();
        t.step = ckpt.step;
        t.rng.set_word_pos(ckpt.rng_word_pos);
        t.threshold.value = ckpt.threshold;
        t.losses = ckpt.losses.clone();
        t.flagged = ckpt.flagged;
        t.seen = ckpt.seen;
        Ok(t)
    }

    pub fn checkpoint(&self) -> TrainerCheckpoint {
        TrainerCheckpoint {
            step: self.step,
            theta: self.params.theta.clone(),
            ema: self.ema.clone(),
            m: self.m.clone(),
            v: self.v.clone(),
            rng_word_pos: self.rng.get_word_pos(),
            threshold: self.threshold.value,
            losses: self.losses.clone(),
            flagged: self.flagged,
            seen: self.seen,
        }
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn current(&self) -> &DenoiserParams {
        &self.params
    }

    /// Draws the next minibatch and updates the tail threshold.
    fn next_batch(&mut self) -> TrainBatch {
        let d = self.params.arch.d;
        let m = self.params.arch.z_dim;
        let b = self.config.batch_size;
        let idx: Vec<usize> = (0..b).map(|_| self.rng.random_range(0..self.n_rows)).collect();
        let steps: Vec<usize> = (0..b)
            .map(|_| self.rng.random_range(1..=self.schedule.steps))
            .collect();
        let eps: Vec<f64> = (0..b * d).map(|_| StandardNormal.sample(&mut self.rng)).collect();
        let raw: Vec<f64> = idx
            .iter()
            .flat_map(|&i| self.raw[i * d..(i + 1) * d].iter().copied())
            .collect();
        let threshold = match self.tail.fixed_threshold {
            Some(t) => t,
            None => {
                let losses: Vec<f64> = raw.chunks(d).map(worst_asset_loss).collect();
                self.threshold.update(&losses, &self.tail)
            }
        };
        let weights = tail_weights(&raw, d, &self.tail, threshold);
        let mut x_noisy = Vec::with_capacity(b * d);
        for (r, &i) in idx.iter().enumerate() {
            let ab = self.schedule.alpha_bar[steps[r]];
            let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
            for j in 0..d {
                x_noisy.push(sa * self.x_std[i * d + j] + sb * eps[r * d + j]);
            }
        }
        let z: Vec<f64> = idx
            .iter()
            .flat_map(|&i| self.z_std[i * m..(i + 1) * m].iter().copied())
            .collect();
        TrainBatch {
            x_noisy,
            steps,
            z,
            eps,
            weights,
        }
    }

    /// One optimizer step; returns the minibatch loss.
    pub fn step_once(&mut self) -> Result<f64> {
        let batch = self.next_batch();
        self.flagged += batch.weights.iter().filter(|w| **w != 1.0).count() as u64;
        self.seen += batch.len() as u64;
        let loss = denoising_loss_grad(&self.params, &batch, &mut self.grad);
        let norm = self.grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if !loss.is_finite() || !norm.is_finite() {
            let last = self.losses.last().copied().unwrap_or(f64::NAN);
            return Err(Error::Numerical(format!(
                "non-finite training loss at step {} (loss {loss}, grad norm {norm}, previous loss {last})",
                self.step + 1
            )));
        }
        let c = &self.config;
        let scale = if norm > c.clip_norm { c.clip_norm / norm } else { 1.0 };
        let t = (self.step + 1) as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let theta = &mut self.params.theta;
        for i in 0..theta.len() {
            let g = self.grad[i] * scale;
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g;
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g * g;
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            theta[i] -= c.learning_rate * (mh / (vh.sqrt() + c.adam_eps) + c.weight_decay * theta[i]);
        }
        let n = self.step as f64;
        let decay = c.ema_decay.min((1.0 + n) / (10.0 + n));
        for (e, p) in self.ema.iter_mut().zip(theta.iter()) {
            *e = decay * *e + (1.0 - decay) * p;
        }
        self.step += 1;
        self.losses.push(loss);
        Ok(loss)
    }

    pub fn run_until(&mut self, step: usize) -> Result<()> {
        while self.step < step {
            self.step_once()?;
        }
        Ok(())
    }

    pub fn finish(self) -> TrainOutput {
        let mut ema = self.params.clone();
        ema.theta = self.ema;
        TrainOutput {
            params: ema,
            last: self.params,
            losses: self.losses,
            flagged_fraction: if self.seen == 0 {
                0.0
            } else {
                self.flagged as f64 / self.seen as f64
            },
        }
    }
}

/// Trains for `config.steps` steps and returns the EMA parameters.
pub fn train(
    data: &nalgebra::DMatrix<f64>,
    contexts: &[RegimeContext],
    schedule: &NoiseSchedule,
    tail: &TailConfig,
    config: &TrainConfig,
) -> Result<TrainOutput> {
    let mut t = Trainer::new(data, contexts, schedule, tail, config)?;
    t.run_until(config.steps)?;
    Ok(t.finish())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario_gen::schedule::cosine_schedule;
    use crate::scenario_gen::TailOrientation;
    use nalgebra::DMatrix;
    use rand_distr::Normal;

    fn arch() -> Architecture {
        Architecture {
            d: 3,
            z_dim: 2,
            width: 10,
            depth: 3,
            emb_dim: 4,
            gate_width: 6,
        }
    }

    fn random_batch(params: &DenoiserParams, n: usize, seed: u64) -> TrainBatch {
        let (d, m) = (params.arch.d, params.arch.z_dim);
        let mut r = rng::seeded(seed);
        let mut normal = |k: usize| -> Vec<f64> { (0..k).map(|_| StandardNormal.sample(&mut r)).collect() };
        let x_noisy = normal(n * d);
        let z = normal(n * m);
        let eps = normal(n * d);
        TrainBatch {
            x_noisy,
            steps: (0..n).map(|i| 1 + 7 * i).collect(),
            z,
            eps,
            weights: (0..n).map(|i| if i % 3 == 0 { 3.0 } else { 1.0 }).collect(),
        }
    }

    /// Central differences on random parameter slices, norm-wise relative error.
    #[test]
    fn gradient_matches_finite_differences() {
        let mut params = DenoiserParams::init(arch(), 3).unwrap();
        // Larger output heads so every block has a non-trivial gradient.
        let mut r = rng::seeded(99);
        let normal = Normal::new(0.0, 0.3).unwrap();
        for v in params.theta.iter_mut() {
            *v += normal.sample(&mut r);
        }
        let batch = random_batch(&params, 6, 4);
        let mut grad = vec![0.0; params.n_params()];
        denoising_loss_grad(&params, &batch, &mut grad);
        let n = params.n_params();
        for trial in 0..5 {
            let start = r.random_range(0..n - 40);
            let idx: Vec<usize> = (start..start + 40).collect();
            let h = 1e-6;
            let mut num = Vec::new();
            for &i in &idx {
                let orig = params.theta[i];
                params.theta[i] = orig + h;
                let up = denoising_loss(&params, &batch);
                params.theta[i] = orig - h;
                let down = denoising_loss(&params, &batch);
                params.theta[i] = orig;
                num.push((up - down) / (2.0 * h));
            }
            let diff: f64 = idx.iter().zip(&num).map(|(&i, n)| (grad[i] - n).powi(2)).sum::<f64>().sqrt();
            let scale: f64 = num.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            assert!(diff / scale < 1e-4, "trial {trial} at {start}: {}", diff / scale);
        }
        // Gate block specifically.
        let layout = params.layout();
        let gi = layout.gate[1].w;
        let orig = params.theta[gi];
        params.theta[gi] = orig + 1e-6;
        let up = denoising_loss(&params, &batch);
        params.theta[gi] = orig - 1e-6;
        let down = denoising_loss(&params, &batch);
        let fd = (up - down) / 2e-6;
        assert!((fd - grad[gi]).abs() <= 1e-4 * fd.abs().max(1e-8));
    }

    #[test]
    fn unit_weights_equal_plain_mse_bitwise() {
        let params = DenoiserParams::init(arch(), 3).unwrap();
        let mut batch = random_batch(&params, 8, 5);
        batch.weights = vec![1.0; 8];
        let loss = denoising_loss(&params, &batch);
        // Independent plain mean of squared errors, same summation order.
        let d = 3;
        let mut total = 0.0;
        for b in 0..8 {
            let z = RegimeContext {
                z: params
                    .z_mean
                    .iter()
                    .zip(&params.z_scale)
                    .zip(&batch.z[b * 2..b * 2 + 2])
                    .map(|((m, s), v)| m + s * v)
                    .collect(),
            };
            let pred =
                crate::scenario_gen::moe_denoise(&batch.x_noisy[b * d..(b + 1) * d], batch.steps[b], &z, &params)
                    .unwrap();
            let mut sq = 0.0;
            for j in 0..d {
                sq += (batch.eps[b * d + j] - pred[j]).powi(2);
            }
            total += sq;
        }
        assert_eq!(loss.to_bits(), (total / 24.0).to_bits());
    }

    fn gaussian_data(n: usize, seed: u64) -> (DMatrix<f64>, Vec<RegimeContext>) {
        let mut r = rng::seeded(seed);
        let data = DMatrix::from_fn(n, 3, |_, j| 0.001 * j as f64 + 0.01 * { let v: f64 = StandardNormal.sample(&mut r); v });
        let ctx = (0..n).map(|i| RegimeContext { z: vec![(i % 2) as f64] }).collect();
        (data, ctx)
    }

    fn tiny_config(steps: usize) -> TrainConfig {
        TrainConfig {
            steps,
            batch_size: 32,
            learning_rate: 1e-3,
            width: 12,
            depth: 2,
            emb_dim: 4,
            gate_width: 4,
            ..Default::default()
        }
    }

    #[test]
    fn eta_zero_and_unflagged_tail_share_a_trajectory() {
        let (data, ctx) = gaussian_data(300, 1);
        let sch = cosine_schedule(20).unwrap();
        let cfg = tiny_config(25);
        let plain = TailConfig {
            eta: 0.0,
            ..Default::default()
        };
        let never = TailConfig {
            eta: 2.0,
            fixed_threshold: Some(f64::INFINITY),
            orientation: TailOrientation::Adverse,
            ..Default::default()
        };
        let a = train(&data, &ctx, &sch, &plain, &cfg).unwrap();
        let b = train(&data, &ctx, &sch, &never, &cfg).unwrap();
        assert_eq!(b.flagged_fraction, 0.0);
        assert_eq!(a.losses.len(), 25);
        for (x, y) in a.losses.iter().zip(&b.losses) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        assert_eq!(a.params.theta, b.params.theta);
        assert_eq!(a.last.theta, b.last.theta);

        let weighted = train(&data, &ctx, &sch, &TailConfig::default(), &cfg).unwrap();
        assert_ne!(weighted.last.theta, a.last.theta);
        assert!(weighted.flagged_fraction > 0.0 && weighted.flagged_fraction < 0.25);
    }

    #[test]
    fn resume_is_bit_identical() {
        let (data, ctx) = gaussian_data(200, 2);
        let sch = cosine_schedule(20).unwrap();
        let cfg = tiny_config(30);
        let tail = TailConfig::default();
        let full = train(&data, &ctx, &sch, &tail, &cfg).unwrap();
        let mut t = Trainer::new(&data, &ctx, &sch, &tail, &cfg).unwrap();
        t.run_until(13).unwrap();
        let ck = t.checkpoint();
        drop(t);
        let mut resumed = Trainer::resume(&data, &ctx, &sch, &tail, &cfg, &ck).unwrap();
        resumed.run_until(30).unwrap();
        let out = resumed.finish();
        assert_eq!(out.params.theta, full.params.theta);
        assert_eq!(out.losses, full.losses);
    }

    #[test]
    fn bad_inputs() {
        let (data, ctx) = gaussian_data(50, 3);
        let sch = cosine_schedule(10).unwrap();
        let tail = TailConfig::default();
        let cfg = tiny_config(2);
        assert!(train(&data, &ctx[..49], &sch, &tail, &cfg).is_err());
        assert!(train(&DMatrix::zeros(0, 3), &[], &sch, &tail, &cfg).is_err());
        let mut huge = cfg.clone();
        huge.learning_rate = f64::NAN;
        assert!(train(&data, &ctx, &sch, &tail, &huge).is_err());
    }

    #[test]
    fn non_finite_loss_aborts_with_step() {
        let (mut data, ctx) = gaussian_data(50, 3);
        let sch = cosine_schedule(10).unwrap();
        let tail = TailConfig::default();
        let cfg = tiny_config(3);
        let mut t = Trainer::new(&data, &ctx, &sch, &tail, &cfg).unwrap();
        t.params.theta[0] = f64::INFINITY;
        let err = t.step_once().unwrap_err();
        assert!(err.to_string().contains("step 1"), "{err}");
        data[(0, 0)] = f64::NAN;
        assert!(Trainer::new(&data, &ctx, &sch, &tail, &cfg).is_err());
    }
}
