//! Residual feed-forward experts, the sigmoid gate, and their reverse-mode
//! gradients. All parameters live in one flat vector; every kernel works one
//! row at a time so outputs do not depend on batch composition.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::regime_hmm::RegimeContext;
use crate::rng;

const GATE_LOGIT_CLAMP: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    /// Return dimension.
    pub d: usize,
    /// Conditioning vector dimension.
    pub z_dim: usize,
    /// Hidden width of each expert.
    pub width: usize,
    /// Hidden layers per expert (first projection plus `depth - 1` residual blocks).
    pub depth: usize,
    /// Sinusoidal step-embedding size (even).
    pub emb_dim: usize,
    pub gate_width: usize,
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.width == 0 || self.depth == 0 || self.gate_width == 0 {
            return Err(Error::Config(
                "denoiser dimensions, width, depth and gate width must be positive".into(),
            ));
        }
        if self.emb_dim == 0 || self.emb_dim % 2 != 0 {
            return Err(Error::Config("step embedding size must be even and positive".into()));
        }
        Ok(())
    }

    pub fn expert_input(&self) -> usize {
        self.d + self.emb_dim + self.z_dim
    }

    pub fn n_params(&self) -> usize {
        Layout::new(self).n_params
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Dense {
    pub n_in: usize,
    pub n_out: usize,
    pub w: usize,
    pub b: usize,
}

impl Dense {
    fn alloc(n_in: usize, n_out: usize, offset: &mut usize) -> Self {
        let w = *offset;
        let b = w + n_in * n_out;
        *offset = b + n_out;
        Self { n_in, n_out, w, b }
    }

    fn forward(&self, theta: &[f64], x: &[f64], y: &mut [f64]) {
        let w = &theta[self.w..self.w + self.n_in * self.n_out];
        for (o, yo) in y.iter_mut().enumerate().take(self.n_out) {
            let row = &w[o * self.n_in..(o + 1) * self.n_in];
            let mut acc = theta[self.b + o];
            for (wi, xi) in row.iter().zip(x) {
                acc += wi * xi;
            }
            *yo = acc;
        }
    }

    /// Accumulates parameter gradients and, if asked, `W^T dy` into `dx`.
    fn backward(&self, theta: &[f64], grad: &mut [f64], x: &[f64], dy: &[f64], dx: Option<&mut [f64]>) {
        for (o, &g) in dy.iter().enumerate() {
            grad[self.b + o] += g;
            let gw = &mut grad[self.w + o * self.n_in..self.w + (o + 1) * self.n_in];
            for (gi, xi) in gw.iter_mut().zip(x) {
                *gi += g * xi;
            }
        }
        if let Some(dx) = dx {
            let w = &theta[self.w..self.w + self.n_in * self.n_out];
            for (o, &g) in dy.iter().enumerate() {
                let row = &w[o * self.n_in..(o + 1) * self.n_in];
                for (di, wi) in dx.iter_mut().zip(row) {
                    *di += wi * g;
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub base: Vec<Dense>,
    pub crisis: Vec<Dense>,
    pub gate: [Dense; 2],
    pub n_params: usize,
}

impl Layout {
    pub fn new(arch: &Architecture) -> Self {
        let mut off = 0;
        let expert = |off: &mut usize| {
            let mut layers = vec![Dense::alloc(arch.expert_input(), arch.width, off)];
            for _ in 1..arch.depth {
                layers.push(Dense::alloc(arch.width, arch.width, off));
            }
            layers.push(Dense::alloc(arch.width, arch.d, off));
            layers
        };
        let base = expert(&mut off);
        let crisis = expert(&mut off);
        let g1 = Dense::alloc(arch.z_dim, arch.gate_width, &mut off);
        let g2 = Dense::alloc(arch.gate_width, 1, &mut off);
        Self {
            base,
            crisis,
            gate: [g1, g2],
            n_params: off,
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// `[sin(s f_0), .., sin(s f_{h-1}), cos(s f_0), .., cos(s f_{h-1})]` with
/// geometric frequencies `f_i = 10000^{-i/h}`.
pub fn time_embedding(s: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let f = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let a = s as f64 * f;
        out[i] = a.sin();
        out[half + i] = a.cos();
    }
    out
}

#[derive(Debug, Clone)]
pub(crate) struct ExpertTrace {
    pre: Vec<Vec<f64>>,
    act: Vec<Vec<f64>>,
    pub out: Vec<f64>,
}

fn expert_forward(layers: &[Dense], theta: &[f64], u: &[f64]) -> ExpertTrace {
    let depth = layers.len() - 1;
    let mut pre = Vec::with_capacity(depth);
    let mut act: Vec<Vec<f64>> = Vec::with_capacity(depth);
    for (l, layer) in layers[..depth].iter().enumerate() {
        let mut p = vec![0.0; layer.n_out];
        let input = if l == 0 { u } else { &act[l - 1] };
        layer.forward(theta, input, &mut p);
        let a: Vec<f64> = if l == 0 {
            p.iter().map(|v| silu(*v)).collect()
        } else {
            act[l - 1].iter().zip(&p).map(|(h, v)| h + silu(*v)).collect()
        };
        pre.push(p);
        act.push(a);
    }
    let head = &layers[depth];
    let mut out = vec![0.0; head.n_out];
    head.forward(theta, &act[depth - 1], &mut out);
    ExpertTrace { pre, act, out }
}

fn expert_backward(
    layers: &[Dense],
    theta: &[f64],
    grad: &mut [f64],
    u: &[f64],
    trace: &ExpertTrace,
    dout: &[f64],
) {
    let depth = layers.len() - 1;
    let mut da = vec![0.0; layers[depth].n_in];
    layers[depth].backward(theta, grad, &trace.act[depth - 1], dout, Some(&mut da));
    for l in (1..depth).rev() {
        let dpre: Vec<f64> = da
            .iter()
            .zip(&trace.pre[l])
            .map(|(g, p)| g * silu_grad(*p))
            .collect();
        layers[l].backward(theta, grad, &trace.act[l - 1], &dpre, Some(&mut da));
    }
    let dpre0: Vec<f64> = da
        .iter()
        .zip(&trace.pre[0])
        .map(|(g, p)| g * silu_grad(*p))
        .collect();
    layers[0].backward(theta, grad, u, &dpre0, None);
}

#[derive(Debug, Clone)]
pub(crate) struct RowTrace {
    u: Vec<f64>,
    z: Vec<f64>,
    pub base: ExpertTrace,
    pub crisis: ExpertTrace,
    gate_pre: Vec<f64>,
    gate_act: Vec<f64>,
    clamped: bool,
    pub g: f64,
    pub eps_hat: Vec<f64>,
}

/// Gate value and its hidden activations for a standardized context.
fn gate_forward(layout: &Layout, theta: &[f64], z: &[f64]) -> (Vec<f64>, Vec<f64>, bool, f64) {
    let [g1, g2] = layout.gate;
    let mut pre = vec![0.0; g1.n_out];
    g1.forward(theta, z, &mut pre);
    let act: Vec<f64> = pre.iter().map(|v| silu(*v)).collect();
    let mut logit = [0.0];
    g2.forward(theta, &act, &mut logit);
    let clamped = logit[0].abs() > GATE_LOGIT_CLAMP;
    let g = sigmoid(logit[0].clamp(-GATE_LOGIT_CLAMP, GATE_LOGIT_CLAMP));
    (pre, act, clamped, g)
}

pub(crate) fn row_forward(
    arch: &Architecture,
    layout: &Layout,
    theta: &[f64],
    x: &[f64],
    s: usize,
    z: &[f64],
    gate_override: Option<f64>,
) -> RowTrace {
    let mut u = Vec::with_capacity(arch.expert_input());
    u.extend_from_slice(x);
    u.extend(time_embedding(s, arch.emb_dim));
    u.extend_from_slice(z);
    let base = expert_forward(&layout.base, theta, &u);
    let crisis = expert_forward(&layout.crisis, theta, &u);
    let (gate_pre, gate_act, clamped, g) = gate_forward(layout, theta, z);
    let g = gate_override.unwrap_or(g);
    let eps_hat = base
        .out
        .iter()
        .zip(&crisis.out)
        .map(|(b, c)| (1.0 - g) * b + g * c)
        .collect();
    RowTrace {
        u,
        z: z.to_vec(),
        base,
        crisis,
        gate_pre,
        gate_act,
        clamped,
        g,
        eps_hat,
    }
}

/// Backpropagates `d loss / d eps_hat` through one row.
pub(crate) fn row_backward(layout: &Layout, theta: &[f64], grad: &mut [f64], t: &RowTrace, deps: &[f64]) {
    let g = t.g;
    let db: Vec<f64> = deps.iter().map(|v| (1.0 - g) * v).collect();
    let dc: Vec<f64> = deps.iter().map(|v| g * v).collect();
    expert_backward(&layout.base, theta, grad, &t.u, &t.base, &db);
    expert_backward(&layout.crisis, theta, grad, &t.u, &t.crisis, &dc);
    if t.clamped {
        return;
    }
    let dg: f64 = deps
        .iter()
        .zip(t.crisis.out.iter().zip(&t.base.out))
        .map(|(e, (c, b))| e * (c - b))
        .sum();
    let dlogit = [dg * g * (1.0 - g)];
    let [g1, g2] = layout.gate;
    let mut dact = vec![0.0; g2.n_in];
    g2.backward(theta, grad, &t.gate_act, &dlogit, Some(&mut dact));
    let dpre: Vec<f64> = dact
        .iter()
        .zip(&t.gate_pre)
        .map(|(d, p)| d * silu_grad(*p))
        .collect();
    g1.backward(theta, grad, &t.z, &dpre, None);
}

/// Network weights plus the standardizers that map raw returns and contexts
/// into the network's working scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserParams {
    pub arch: Architecture,
    pub theta: Vec<f64>,
    pub x_mean: Vec<f64>,
    pub x_scale: Vec<f64>,
    pub z_mean: Vec<f64>,
    pub z_scale: Vec<f64>,
}

impl DenoiserParams {
    /// Random initialization: scaled normal weights, zero biases, and a
    /// small output head so initial noise predictions start near zero.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let layout = Layout::new(&arch);
        let mut theta = vec![0.0; layout.n_params];
        let mut rng = rng::seeded(seed);
        let mut fill = |layer: &Dense, gain: f64, theta: &mut [f64]| {
            let std = gain / (layer.n_in.max(1) as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("finite std");
            for v in &mut theta[layer.w..layer.w + layer.n_in * layer.n_out] {
                *v = normal.sample(&mut rng);
            }
        };
        for expert in [&layout.base, &layout.crisis] {
            let last = expert.len() - 1;
            for (l, layer) in expert.iter().enumerate() {
                let gain = if l == last { 0.1 } else if l == 0 { 1.0 } else { 0.5 };
                fill(layer, gain, &mut theta);
            }
        }
        fill(&layout.gate[0], 1.0, &mut theta);
        fill(&layout.gate[1], 0.1, &mut theta);
        Ok(Self {
            arch,
            theta,
            x_mean: vec![0.0; arch.d],
            x_scale: vec![1.0; arch.d],
            z_mean: vec![0.0; arch.z_dim],
            z_scale: vec![1.0; arch.z_dim],
        })
    }

    pub fn n_params(&self) -> usize {
        self.theta.len()
    }

    pub(crate) fn layout(&self) -> Layout {
        Layout::new(&self.arch)
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        let (d, m) = (self.arch.d, self.arch.z_dim);
        if self.theta.len() != self.arch.n_params()
            || self.x_mean.len() != d
            || self.x_scale.len() != d
            || self.z_mean.len() != m
            || self.z_scale.len() != m
        {
            return Err(Error::Dimension("denoiser parameter blocks do not match architecture".into()));
        }
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        if !finite(&self.theta) || !finite(&self.x_mean) || !finite(&self.z_mean) {
            return Err(Error::Numerical("non-finite denoiser parameters".into()));
        }
        if self.x_scale.iter().chain(&self.z_scale).any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Numerical("standardizer scales must be positive".into()));
        }
        Ok(())
    }

    pub fn standardize_z(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(self.z_mean.iter().zip(&self.z_scale))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn standardize_x(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.x_mean.iter().zip(&self.x_scale))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn destandardize_x(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.x_mean.iter().zip(&self.x_scale))
            .map(|(v, (m, s))| m + s * v)
            .collect()
    }

    fn check_context(&self, z: &RegimeContext) -> Result<()> {
        if z.dim() != self.arch.z_dim {
            return Err(Error::Dimension(format!(
                "context has {} features, denoiser expects {}",
                z.dim(),
                self.arch.z_dim
            )));
        }
        Ok(())
    }

    /// Gate value `g in (0, 1)` for a raw context.
    pub fn gate(&self, z: &RegimeContext) -> Result<f64> {
        self.check_context(z)?;
        let zs = self.standardize_z(&z.z);
        Ok(gate_forward(&self.layout(), &self.theta, &zs).3)
    }

    /// Base and crisis expert outputs for working-scale `x` at step `s`.
    pub fn experts(&self, x: &[f64], s: usize, z: &RegimeContext) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_context(z)?;
        let zs = self.standardize_z(&z.z);
        let t = row_forward(&self.arch, &self.layout(), &self.theta, x, s, &zs, None);
        Ok((t.base.out, t.crisis.out))
    }
}

/// Mixture-of-experts noise prediction `(1 - g) eps_base + g eps_crisis`
/// for working-scale `x` at diffusion step `s`.
pub fn moe_denoise(x: &[f64], s: usize, z: &RegimeContext, params: &DenoiserParams) -> Result<Vec<f64>> {
    denoise_inner(x, s, z, params, None)
}

/// As [`moe_denoise`] with the gate pinned to `gate`.
pub fn moe_denoise_with_gate(
    x: &[f64],
    s: usize,
    z: &RegimeContext,
    params: &DenoiserParams,
    gate: f64,
) -> Result<Vec<f64>> {
    denoise_inner(x, s, z, params, Some(gate))
}

fn denoise_inner(
    x: &[f64],
    s: usize,
    z: &RegimeContext,
    params: &DenoiserParams,
    gate: Option<f64>,
) -> Result<Vec<f64>> {
    if x.len() != params.arch.d {
        return Err(Error::Dimension(format!(
            "input has {} entries, denoiser expects {}",
            x.len(),
            params.arch.d
        )));
    }
    params.check_context(z)?;
    let zs = params.standardize_z(&z.z);
    Ok(row_forward(&params.arch, &params.layout(), &params.theta, x, s, &zs, gate).eps_hat)
}

/// Gate values along a probe grid of the crisis-posterior coordinate with
/// every other feature held at `base`; returns the values and whether they
/// are non-decreasing.
pub fn gate_monotonicity(
    params: &DenoiserParams,
    base: &RegimeContext,
    coord: usize,
    grid: &[f64],
) -> Result<(Vec<f64>, bool)> {
    if coord >= base.dim() {
        return Err(Error::Dimension(format!("probe coordinate {coord} out of range")));
    }
    let mut values = Vec::with_capacity(grid.len());
    for &p in grid {
        let mut z = base.clone();
        z.z[coord] = p;
        values.push(params.gate(&z)?);
    }
    let monotone = values.windows(2).all(|w| w[1] >= w[0]);
    Ok((values, monotone))
}
