//! Noise schedules, forward corruption, the noise-prediction training loss,
//! the Tweedie denoiser, and DDPM/DDIM reverse steps in closed
//! `A_t * x0_hat + B_t * x_t + C_t` form.
//!
//! Time indexing convention: states live at t = 0..T, schedule arrays at
//! t = 1..T, and alpha_bar(0) = 1.

use crate::autodiff::Tape;
use crate::error::{GraphDpsError, Result};
use crate::score::{
    dgn_forward, dgn_forward_on_tape, HierarchyIndex, MountedParams, ScoreNetConfig,
    ScoreNetParams,
};
use crate::seeds;
use crate::NodeField;
use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 2e-2;

/// Discrete variance schedule with derived quantities.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    /// Total diffusion steps T.
    pub steps: usize,
    /// beta_t for t = 1..T (index t-1).
    pub beta: Vec<f64>,
    /// alpha_t = 1 - beta_t.
    pub alpha: Vec<f64>,
    /// alpha_bar_t = prod_{s<=t} alpha_s.
    pub alpha_bar: Vec<f64>,
    /// Posterior variances beta_tilde_t = (1 - abar_{t-1})/(1 - abar_t) * beta_t.
    pub beta_tilde: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Linear,
}

impl NoiseSchedule {
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(GraphDpsError::Schedule("empty schedule".into()));
        }
        if beta.iter().any(|&b| !(0.0..1.0).contains(&b) || b == 0.0) {
            return Err(GraphDpsError::Schedule(
                "every beta must lie in (0, 1)".into(),
            ));
        }
        let steps = beta.len();
        let alpha: Vec<f64> = beta.iter().map(|&b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(steps);
        let mut prod = 1.0;
        for &a in &alpha {
            prod *= a;
            alpha_bar.push(prod);
        }
        let mut beta_tilde = Vec::with_capacity(steps);
        for t in 1..=steps {
            let abar_prev = if t == 1 { 1.0 } else { alpha_bar[t - 2] };
            beta_tilde.push((1.0 - abar_prev) / (1.0 - alpha_bar[t - 1]) * beta[t - 1]);
        }
        Ok(Self {
            steps,
            beta,
            alpha,
            alpha_bar,
            beta_tilde,
        })
    }

    /// alpha_bar_t with the alpha_bar_0 = 1 convention; t in 0..=T.
    pub fn alpha_bar_at(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn beta_at(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha_at(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    pub fn beta_tilde_at(&self, t: usize) -> f64 {
        self.beta_tilde[t - 1]
    }
}

/// Linearly interpolated beta schedule.
pub fn make_schedule(
    steps: usize,
    kind: ScheduleKind,
    beta_start: f64,
    beta_end: f64,
) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(GraphDpsError::Schedule("need at least one step".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(GraphDpsError::Schedule(format!(
            "invalid beta bounds ({beta_start}, {beta_end})"
        )));
    }
    let ScheduleKind::Linear = kind;
    let beta = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps as f64 - 1.0)
            }
        })
        .collect();
    NoiseSchedule::from_betas(beta)
}

/// Reverse-step coefficients x_{t-1} = a * x0_hat + b * x_t + noise_std * z.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepCoefficients {
    pub a: f64,
    pub b: f64,
    /// Standard deviation of the stochastic term; exactly zero for DDIM.
    pub noise_std: f64,
}

impl StepCoefficients {
    /// DDPM closed form from raw (alpha_bar_t, alpha_bar_{t-1}).
    pub fn ddpm_from_alpha_bars(abar_t: f64, abar_prev: f64) -> Self {
        let alpha_t = abar_t / abar_prev;
        let beta_t = 1.0 - alpha_t;
        let a = abar_prev.sqrt() * beta_t / (1.0 - abar_t);
        let b = alpha_t.sqrt() * (1.0 - abar_prev) / (1.0 - abar_t);
        let beta_tilde = (1.0 - abar_prev) / (1.0 - abar_t) * beta_t;
        Self {
            a,
            b,
            noise_std: beta_tilde.max(0.0).sqrt(),
        }
    }

    /// DDIM closed form from raw (alpha_bar_t, alpha_bar_{t-1}).
    pub fn ddim_from_alpha_bars(abar_t: f64, abar_prev: f64) -> Self {
        let b = ((1.0 - abar_prev) / (1.0 - abar_t)).sqrt();
        let a = abar_prev.sqrt() - b * abar_t.sqrt();
        Self {
            a,
            b,
            noise_std: 0.0,
        }
    }

    pub fn ddpm(schedule: &NoiseSchedule, t: usize) -> Self {
        // Use the schedule's exact beta/alpha rather than re-deriving them
        // from alpha_bar ratios, which costs a few ulps.
        let abar_t = schedule.alpha_bar_at(t);
        let abar_prev = schedule.alpha_bar_at(t - 1);
        let beta_t = schedule.beta_at(t);
        let a = abar_prev.sqrt() * beta_t / (1.0 - abar_t);
        let b = schedule.alpha_at(t).sqrt() * (1.0 - abar_prev) / (1.0 - abar_t);
        Self {
            a,
            b,
            noise_std: schedule.beta_tilde_at(t).max(0.0).sqrt(),
        }
    }

    pub fn ddim(schedule: &NoiseSchedule, t: usize) -> Self {
        Self::ddim_from_alpha_bars(schedule.alpha_bar_at(t), schedule.alpha_bar_at(t - 1))
    }
}

/// One draw of the closed-form forward marginal:
/// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps. Returns (x_t, eps).
pub fn forward_corrupt(
    x0: &NodeField,
    t: usize,
    schedule: &NoiseSchedule,
    seed: u64,
) -> (NodeField, NodeField) {
    assert!(t >= 1 && t <= schedule.steps, "t out of range");
    let mut rng = seeds::rng_indexed(seed, "forward-corrupt", t as u64);
    let abar = schedule.alpha_bar_at(t);
    let sa = abar.sqrt();
    let sn = (1.0 - abar).sqrt();
    let eps: Vec<f64> = (0..x0.len()).map(|_| rng.sample(StandardNormal)).collect();
    let x_t: Vec<f64> = x0
        .values
        .iter()
        .zip(&eps)
        .map(|(&x, &e)| sa * x + sn * e)
        .collect();
    (NodeField::new(x_t), NodeField::new(eps))
}

/// Sum of squared differences between injected and predicted noise.
pub fn noise_mse(eps: &NodeField, eps_pred: &NodeField) -> f64 {
    assert_eq!(eps.len(), eps_pred.len(), "noise length mismatch");
    eps.values
        .iter()
        .zip(&eps_pred.values)
        .map(|(a, b)| (a - b).powi(2))
        .sum()
}

/// Mean noise-prediction loss over a batch: per element, draw t uniform in
/// {1..T} and fresh noise, and score ||eps - eps_theta(x_t, t)||^2.
pub fn training_loss(
    params: &ScoreNetParams,
    config: &ScoreNetConfig,
    index: &HierarchyIndex,
    batch: &[NodeField],
    schedule: &NoiseSchedule,
    seed: u64,
) -> f64 {
    assert!(!batch.is_empty(), "empty batch");
    let total: f64 = batch
        .par_iter()
        .enumerate()
        .map(|(i, x0)| {
            let (t, x_t, eps) = corrupt_element(x0, schedule, seed, i as u64);
            let out = dgn_forward(&x_t, t, index, config, params);
            noise_mse(&eps, &out.eps)
        })
        .collect::<Vec<f64>>()
        .into_iter()
        .sum();
    total / batch.len() as f64
}

fn corrupt_element(
    x0: &NodeField,
    schedule: &NoiseSchedule,
    seed: u64,
    elem: u64,
) -> (usize, NodeField, NodeField) {
    let mut rng = seeds::rng_indexed(seed, "loss-t", elem);
    let t = rng.gen_range(1..=schedule.steps);
    let elem_seed = seeds::derive_indexed(seed, "loss-eps", elem);
    let (x_t, eps) = forward_corrupt(x0, t, schedule, elem_seed);
    (t, x_t, eps)
}

/// Training loss together with parameter gradients, averaged over the batch.
/// Batch elements run data-parallel; the reduction order is fixed by index,
/// so results do not depend on the thread count.
pub fn training_loss_and_grads(
    params: &ScoreNetParams,
    config: &ScoreNetConfig,
    index: &HierarchyIndex,
    batch: &[NodeField],
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<(f64, Vec<Array2<f64>>)> {
    assert!(!batch.is_empty(), "empty batch");
    let per_elem: Vec<Result<(f64, Vec<Array2<f64>>)>> = batch
        .par_iter()
        .enumerate()
        .map(|(i, x0)| {
            let (t, x_t, eps) = corrupt_element(x0, schedule, seed, i as u64);
            let n = x_t.len();
            let mut tape = Tape::new();
            let mounted = MountedParams::mount(&mut tape, params);
            let x_var =
                tape.constant(Array2::from_shape_fn((n, 1), |(r, _)| x_t.values[r]));
            let (eps_var, _) = dgn_forward_on_tape(&mut tape, x_var, t, index, config, &mounted);
            let target = tape.constant(Array2::from_shape_fn((n, 1), |(r, _)| eps.values[r]));
            let diff = tape.sub(eps_var, target);
            let sq = tape.square(diff);
            let loss = tape.sum(sq);
            let loss_value = tape.value(loss)[(0, 0)];
            let grads = tape.backward(loss)?;
            let grad_vec = params
                .names()
                .iter()
                .map(|name| grads.wrt(mounted.get(name)))
                .collect();
            Ok((loss_value, grad_vec))
        })
        .collect();

    let inv = 1.0 / batch.len() as f64;
    let mut total_loss = 0.0;
    let mut total_grads: Option<Vec<Array2<f64>>> = None;
    for item in per_elem {
        let (loss, grads) = item?;
        total_loss += loss;
        match &mut total_grads {
            None => total_grads = Some(grads),
            Some(acc) => {
                for (a, g) in acc.iter_mut().zip(grads) {
                    *a += &g;
                }
            }
        }
    }
    let mut grads = total_grads.unwrap();
    for g in grads.iter_mut() {
        *g *= inv;
    }
    Ok((total_loss * inv, grads))
}

/// Posterior-mean denoiser: x0_hat = (x_t - sqrt(1 - abar_t) eps) / sqrt(abar_t).
pub fn tweedie_x0(
    x_t: &NodeField,
    t: usize,
    eps_pred: &NodeField,
    schedule: &NoiseSchedule,
) -> Result<NodeField> {
    if t < 1 || t > schedule.steps {
        return Err(GraphDpsError::Schedule(format!("t={t} out of range")));
    }
    let abar = schedule.alpha_bar_at(t);
    if abar < 1e-12 {
        return Err(GraphDpsError::Schedule(format!(
            "alpha_bar({t}) = {abar:e} below the division guard"
        )));
    }
    let sa = abar.sqrt();
    let sn = (1.0 - abar).sqrt();
    Ok(NodeField::new(
        x_t.values
            .iter()
            .zip(&eps_pred.values)
            .map(|(&x, &e)| (x - sn * e) / sa)
            .collect(),
    ))
}

/// Stochastic DDPM reverse step (noise suppressed at t = 1 through
/// beta_tilde_1 = 0).
pub fn ddpm_step(
    x_t: &NodeField,
    t: usize,
    eps_pred: &NodeField,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<NodeField> {
    let x0_hat = tweedie_x0(x_t, t, eps_pred, schedule)?;
    let c = StepCoefficients::ddpm(schedule, t);
    let mut rng = seeds::rng_indexed(seed, "ddpm-step", t as u64);
    Ok(NodeField::new(
        x_t.values
            .iter()
            .zip(&x0_hat.values)
            .map(|(&xt, &x0)| {
                let z: f64 = if c.noise_std > 0.0 {
                    rng.sample(StandardNormal)
                } else {
                    0.0
                };
                c.a * x0 + c.b * xt + c.noise_std * z
            })
            .collect(),
    ))
}

/// Deterministic DDIM reverse step.
pub fn ddim_step(
    x_t: &NodeField,
    t: usize,
    eps_pred: &NodeField,
    schedule: &NoiseSchedule,
) -> Result<NodeField> {
    let x0_hat = tweedie_x0(x_t, t, eps_pred, schedule)?;
    let c = StepCoefficients::ddim(schedule, t);
    Ok(NodeField::new(
        x_t.values
            .iter()
            .zip(&x0_hat.values)
            .map(|(&xt, &x0)| c.a * x0 + c.b * xt)
            .collect(),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerKind {
    Ddpm,
    Ddim,
}

impl SamplerKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            SamplerKind::Ddpm => "ddpm",
            SamplerKind::Ddim => "ddim",
        }
    }

    pub fn parse(s: &str) -> Option<SamplerKind> {
        match s {
            "ddpm" => Some(SamplerKind::Ddpm),
            "ddim" => Some(SamplerKind::Ddim),
            _ => None,
        }
    }
}

/// Draw x_T ~ N(0, I) for a sampling chain.
pub fn initial_state(n: usize, seed: u64) -> NodeField {
    let mut rng = seeds::rng(seed, "sampling-init");
    NodeField::new((0..n).map(|_| rng.sample(StandardNormal)).collect())
}

/// Full unconditional reverse pass from seeded Gaussian noise.
pub fn sample_unconditional(
    params: &ScoreNetParams,
    config: &ScoreNetConfig,
    index: &HierarchyIndex,
    schedule: &NoiseSchedule,
    sampler: SamplerKind,
    seed: u64,
) -> Result<NodeField> {
    let n = index.fine_node_count();
    let mut x = initial_state(n, seed);
    for t in (1..=schedule.steps).rev() {
        let out = dgn_forward(&x, t, index, config, params);
        x = match sampler {
            SamplerKind::Ddim => ddim_step(&x, t, &out.eps, schedule)?,
            SamplerKind::Ddpm => ddpm_step(&x, t, &out.eps, schedule, seed)?,
        };
    }
    Ok(x)
}
